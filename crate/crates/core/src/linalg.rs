//! Dense linear-algebra helpers shared by the analysis and design modules.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value threshold below which a direction counts as zero.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
        }
    }
    out
}

/// Numerical rank with a relative singular-value tolerance.
///
/// Returns `(rank, smallest retained singular value)`; the latter is `0.0`
/// when the rank is zero.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> (usize, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, 0.0);
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return (0, 0.0);
    }
    let cut = rel_tol * smax;
    let mut rank = 0;
    let mut smallest = smax;
    for &s in sv.iter() {
        if s > cut {
            rank += 1;
            smallest = smallest.min(s);
        }
    }
    (rank, smallest)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix (upper and lower triangles are averaged).
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `L = A L Aᵀ + Q` for Schur-stable `A` by repeated squaring.
///
/// Returns `None` if the iteration does not settle, which happens when
/// `ρ(A) ≥ 1` or is so close to one that 60 doublings are not enough.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut sum = q.clone();
    let mut power = a.clone();
    for _ in 0..60 {
        let incr = &power * &sum * power.transpose();
        let incr_norm = incr.amax();
        sum += incr;
        if !sum.iter().all(|v| v.is_finite()) {
            return None;
        }
        if incr_norm <= 1e-15 * sum.amax().max(f64::MIN_POSITIVE) {
            return Some(sum);
        }
        power = &power * &power;
    }
    None
}

/// Block-diagonal assembly of equally sized square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks a list of equally sized vectors into one.
pub fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}
