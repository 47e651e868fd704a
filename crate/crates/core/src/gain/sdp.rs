//! Primal-dual interior-point solver for small block-diagonal SDPs.
//!
//! Problem form, with `S(z) = F0 + Σ z_i F_i` block-diagonal:
//!
//! ```text
//!   minimize cᵀz   subject to   S(z) ⪰ 0
//! ```
//!
//! and its dual `maximize −tr(F0 Z)` over `Z ⪰ 0` with `tr(F_i Z) = c_i`.
//! Iterates keep `S(z) ≻ 0` at all times (the caller supplies a strictly
//! feasible `z`), while `Z` starts at a multiple of the identity and reaches
//! dual feasibility along the way. Search directions are HKM with a Mehrotra
//! predictor-corrector; the Schur complement is factored with faer.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

/// Sparse symmetric coefficient matrix entry. Off-diagonal entries must be
/// listed in both triangles.
#[derive(Clone, Copy, Debug)]
pub struct Entry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub val: f64,
}

#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub c: Vec<f64>,
    pub f0: Vec<DMatrix<f64>>,
    pub coeffs: Vec<Vec<Entry>>,
}

#[derive(Clone, Copy, Debug)]
pub struct SdpOptions {
    pub max_iter: usize,
    /// Stop once `tr(SZ) ≤ gap_tol · max(1, |cᵀz|)` ...
    pub gap_tol: f64,
    /// ... and `‖c − tr(F·Z)‖ ≤ feas_tol · (1 + ‖c‖)`.
    pub feas_tol: f64,
    pub step_fraction: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { max_iter: 80, gap_tol: 1e-8, feas_tol: 1e-8, step_fraction: 0.95 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// Iteration cap or numerical breakdown; the iterate is still primal feasible.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub gap: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SdpStatus,
    /// Smallest eigenvalue of `S(z)` over all blocks.
    pub min_eig: f64,
}

/// Per-block coefficient lists in structure-of-arrays form.
struct BlockCoeffs {
    vars: Vec<usize>,
    ptr: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SdpProblem {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    fn validate(&self) -> Result<()> {
        if self.coeffs.len() != self.c.len() || self.f0.len() != self.block_sizes.len() {
            return Err(Error::InvalidInput("SDP dimensions disagree".into()));
        }
        for (b, f) in self.f0.iter().enumerate() {
            if f.nrows() != self.block_sizes[b] || f.ncols() != self.block_sizes[b] {
                return Err(Error::InvalidInput(format!("F0 block {b} has wrong size")));
            }
        }
        for list in &self.coeffs {
            for e in list {
                if e.block >= self.block_sizes.len()
                    || e.row >= self.block_sizes[e.block]
                    || e.col >= self.block_sizes[e.block]
                {
                    return Err(Error::InvalidInput("SDP coefficient out of range".into()));
                }
            }
        }
        Ok(())
    }

    fn split_blocks(&self) -> Vec<BlockCoeffs> {
        let mut out: Vec<BlockCoeffs> = self
            .block_sizes
            .iter()
            .map(|_| BlockCoeffs { vars: vec![], ptr: vec![0], rows: vec![], cols: vec![], vals: vec![] })
            .collect();
        for (var, list) in self.coeffs.iter().enumerate() {
            for (b, bc) in out.iter_mut().enumerate() {
                let before = bc.rows.len();
                for e in list.iter().filter(|e| e.block == b) {
                    bc.rows.push(e.row);
                    bc.cols.push(e.col);
                    bc.vals.push(e.val);
                }
                if bc.rows.len() > before {
                    bc.vars.push(var);
                    bc.ptr.push(bc.rows.len());
                }
            }
        }
        out
    }

    /// `F0 + Σ z_i F_i`.
    pub fn slack(&self, z: &[f64]) -> Vec<DMatrix<f64>> {
        let mut s = self.f0.clone();
        self.scatter(z, &mut s);
        s
    }

    fn scatter(&self, z: &[f64], into: &mut [DMatrix<f64>]) {
        for (list, &zi) in self.coeffs.iter().zip(z) {
            if zi == 0.0 {
                continue;
            }
            for e in list {
                into[e.block][(e.row, e.col)] += zi * e.val;
            }
        }
    }

    /// `tr(F_i X)` for every variable.
    fn traces(&self, x: &[DMatrix<f64>]) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|list| list.iter().map(|e| e.val * x[e.block][(e.col, e.row)]).sum())
            .collect()
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn dot(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Largest `α ≤ 1` keeping `X + α·ΔX ⪰ 0`, shrunk by `fraction`.
fn step_length(x: &[Cholesky<f64, nalgebra::Dyn>], dx: &[DMatrix<f64>], fraction: f64) -> f64 {
    let mut alpha_max = f64::INFINITY;
    for (ch, d) in x.iter().zip(dx) {
        let l = ch.l();
        let Some(a) = l.solve_lower_triangular(d) else { return 0.0 };
        let Some(b) = l.solve_lower_triangular(&a.transpose()) else { return 0.0 };
        let lam = crate::linalg::sym_min_eigenvalue(&b);
        if lam < 0.0 {
            alpha_max = alpha_max.min(-1.0 / lam);
        }
    }
    (fraction * alpha_max).min(1.0)
}

fn cholesky_all(blocks: &[DMatrix<f64>]) -> Option<Vec<Cholesky<f64, nalgebra::Dyn>>> {
    blocks.iter().map(|b| Cholesky::new(sym(b))).collect()
}

/// Schur complement `M_ij = Σ_blocks tr(F_i Z F_j S⁻¹)`.
fn schur_complement(m: usize, split: &[BlockCoeffs], z: &[DMatrix<f64>], sinv: &[DMatrix<f64>]) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(m, m);
    for (b, bc) in split.iter().enumerate() {
        let nb = z[b].nrows();
        // Row-major copies: zr[q*nb + r] = Z[q, r], sr[s*nb + p] = S⁻¹[s, p].
        let zr: Vec<f64> = (0..nb * nb).map(|k| z[b][(k / nb, k % nb)]).collect();
        let sr: Vec<f64> = (0..nb * nb).map(|k| sinv[b][(k / nb, k % nb)]).collect();
        let nv = bc.vars.len();
        for a in 0..nv {
            let (ia, ja) = (bc.ptr[a], bc.ptr[a + 1]);
            let vi = bc.vars[a];
            for bb in a..nv {
                let (ib, jb) = (bc.ptr[bb], bc.ptr[bb + 1]);
                let mut acc = 0.0;
                for e in ia..ja {
                    let (p, q, ve) = (bc.rows[e], bc.cols[e], bc.vals[e]);
                    let zq = &zr[q * nb..(q + 1) * nb];
                    let mut inner = 0.0;
                    for f in ib..jb {
                        inner += bc.vals[f] * zq[bc.rows[f]] * sr[bc.cols[f] * nb + p];
                    }
                    acc += ve * inner;
                }
                let vj = bc.vars[bb];
                let (lo, hi) = if vi <= vj { (vi, vj) } else { (vj, vi) };
                out[(hi, lo)] += acc;
            }
        }
    }
    out
}

/// Solves from the strictly feasible point `z0`.
pub fn solve(problem: &SdpProblem, z0: &[f64], opts: &SdpOptions) -> Result<SdpSolution> {
    problem.validate()?;
    let m = problem.num_vars();
    if z0.len() != m {
        return Err(Error::DimensionMismatch { context: "SDP start", expected: m, got: z0.len() });
    }
    let split = problem.split_blocks();
    let total_dim: usize = problem.block_sizes.iter().sum();
    let c_norm = problem.c.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut z = z0.to_vec();
    let mut s = problem.slack(&z);
    if cholesky_all(&s).is_none() {
        return Err(Error::Infeasible);
    }
    let zeta = problem
        .coeffs
        .iter()
        .zip(&problem.c)
        .map(|(list, ci)| {
            let fnorm = list.iter().map(|e| e.val * e.val).sum::<f64>().sqrt();
            (1.0 + ci.abs()) / (1.0 + fnorm)
        })
        .fold(1.0, f64::max);
    let mut zd: Vec<DMatrix<f64>> = problem.block_sizes.iter().map(|&n| DMatrix::identity(n, n) * zeta).collect();

    let mut status = SdpStatus::Stalled;
    let mut iterations = 0;
    let mut last_gap = f64::INFINITY;
    let mut last_res = f64::INFINITY;

    for it in 0..opts.max_iter {
        iterations = it;
        let Some(s_chol) = cholesky_all(&s) else { break };
        let Some(z_chol) = cholesky_all(&zd) else { break };
        let sinv: Vec<DMatrix<f64>> = s_chol.iter().map(|c| c.inverse()).collect();
        let gap = dot(&s, &zd);
        let mu = gap / total_dim as f64;
        let objective: f64 = problem.c.iter().zip(&z).map(|(a, b)| a * b).sum();
        let tr_fz = problem.traces(&zd);
        let res = problem.c.iter().zip(&tr_fz).map(|(c, t)| (c - t) * (c - t)).sum::<f64>().sqrt();
        last_gap = gap;
        last_res = res;
        if gap <= opts.gap_tol * objective.abs().max(1.0) && res <= opts.feas_tol * (1.0 + c_norm) {
            status = SdpStatus::Optimal;
            break;
        }

        let mut schur = schur_complement(m, &split, &zd, &sinv);
        let diag_max = (0..m).map(|i| schur[(i, i)]).fold(0.0, f64::max);
        let llt = match schur.llt(Side::Lower) {
            Ok(f) => f,
            Err(_) => {
                for i in 0..m {
                    schur[(i, i)] += 1e-12 * diag_max.max(1e-300);
                }
                match schur.llt(Side::Lower) {
                    Ok(f) => f,
                    Err(_) => break,
                }
            }
        };
        let tr_sinv = problem.traces(&sinv);

        let solve_dir = |rhs: &[f64]| -> Vec<f64> {
            let mut col = Mat::<f64>::from_fn(m, 1, |i, _| rhs[i]);
            llt.solve_in_place(&mut col);
            (0..m).map(|i| col[(i, 0)]).collect()
        };
        let ds_of = |dz: &[f64]| -> Vec<DMatrix<f64>> {
            let mut ds: Vec<DMatrix<f64>> = problem.block_sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect();
            problem.scatter(dz, &mut ds);
            ds
        };

        // Predictor.
        let rhs_a: Vec<f64> = problem.c.iter().map(|c| -c).collect();
        let dz_a = solve_dir(&rhs_a);
        let ds_a = ds_of(&dz_a);
        let dzd_a: Vec<DMatrix<f64>> = (0..zd.len())
            .map(|b| -&zd[b] - sym(&(&zd[b] * &ds_a[b] * &sinv[b])))
            .collect();
        let ap = step_length(&s_chol, &ds_a, 1.0);
        let ad = step_length(&z_chol, &dzd_a, 1.0);
        let s_aff: Vec<DMatrix<f64>> = s.iter().zip(&ds_a).map(|(x, d)| x + d * ap).collect();
        let z_aff: Vec<DMatrix<f64>> = zd.iter().zip(&dzd_a).map(|(x, d)| x + d * ad).collect();
        let mu_aff = dot(&s_aff, &z_aff) / total_dim as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let second: Vec<DMatrix<f64>> = (0..zd.len()).map(|b| &dzd_a[b] * &ds_a[b] * &sinv[b]).collect();
        let tr_second = problem.traces(&second);
        let rhs: Vec<f64> = (0..m).map(|i| sigma * mu * tr_sinv[i] - problem.c[i] - tr_second[i]).collect();
        let dz = solve_dir(&rhs);
        let ds = ds_of(&dz);
        let dzd: Vec<DMatrix<f64>> = (0..zd.len())
            .map(|b| &sinv[b] * (sigma * mu) - &zd[b] - sym(&(&zd[b] * &ds[b] * &sinv[b])) - sym(&second[b]))
            .collect();
        let mut ap = step_length(&s_chol, &ds, opts.step_fraction);
        let ad = step_length(&z_chol, &dzd, opts.step_fraction);
        if ap <= 1e-14 && ad <= 1e-14 {
            break;
        }
        // Rounding can leave the eigenvalue-based step a hair too long.
        let mut accepted = None;
        for _ in 0..20 {
            let trial: Vec<f64> = z.iter().zip(&dz).map(|(zi, d)| zi + ap * d).collect();
            let trial_s = problem.slack(&trial);
            if cholesky_all(&trial_s).is_some() {
                accepted = Some((trial, trial_s));
                break;
            }
            ap *= 0.5;
        }
        let Some((next_z, next_s)) = accepted else { break };
        z = next_z;
        s = next_s;
        for (x, d) in zd.iter_mut().zip(&dzd) {
            *x += d * ad;
        }
        iterations = it + 1;
    }

    let objective: f64 = problem.c.iter().zip(&z).map(|(a, b)| a * b).sum();
    let dual_objective = -dot(&problem.f0, &zd);
    let min_eig = s.iter().map(crate::linalg::sym_min_eigenvalue).fold(f64::INFINITY, f64::min);
    Ok(SdpSolution {
        z,
        objective,
        dual_objective,
        gap: last_gap,
        dual_residual: last_res,
        iterations,
        status,
        min_eig,
    })
}
