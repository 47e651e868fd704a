//! Block-diagonal gain synthesis for the collective error dynamics.
//!
//! `K^i` only ever multiplies `C_iᵀ(·)`, so only column `m_i` of `K^i` matters;
//! the design works with those `n` numbers per sensor, stored flat as
//! `k[i·n + r] = K[(i·n + r, i·n + m_i)]`.

pub mod sdp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{kron, spectral_norm, spectral_radius, sym_min_eigenvalue};
use crate::network::SensorNetwork;
use crate::observability::build_output_blocks;
use crate::system::{MeasurementModel, SystemModel};
use sdp::{Entry, SdpOptions, SdpProblem, SdpStatus};

#[derive(Clone, Debug)]
pub struct GainDesignProblem {
    n: usize,
    sensors: usize,
    /// `W ⊗ A`.
    fa: DMatrix<f64>,
    dc: DMatrix<f64>,
    measured: Vec<usize>,
    c2: Vec<f64>,
    /// Relative trace gap `|f − 2nN| / 2nN` accepted as converged.
    pub eps: f64,
    pub max_iter: usize,
    pub sdp: SdpOptions,
}

impl GainDesignProblem {
    pub fn new(net: &SensorNetwork, sys: &SystemModel, mm: &MeasurementModel) -> Result<Self> {
        Self::from_parts(net.w(), &sys.a, mm)
    }

    pub fn from_parts(w: &DMatrix<f64>, a: &DMatrix<f64>, mm: &MeasurementModel) -> Result<Self> {
        check_dim("W rows vs sensors", mm.len(), w.nrows())?;
        check_dim("W columns", w.nrows(), w.ncols())?;
        check_dim("A vs measurement model", mm.n(), a.nrows())?;
        check_dim("A columns", a.nrows(), a.ncols())?;
        if mm.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let (dc, _) = build_output_blocks(mm);
        Ok(Self {
            n: mm.n(),
            sensors: mm.len(),
            fa: kron(w, a),
            dc,
            measured: mm.measured_states(),
            c2: mm.sensors().iter().map(|s| s.gain * s.gain).collect(),
            eps: 1e-3,
            max_iter: 200,
            sdp: SdpOptions::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n * self.sensors
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sensors(&self) -> usize {
        self.sensors
    }

    pub fn kron_wa(&self) -> &DMatrix<f64> {
        &self.fa
    }

    pub fn dc(&self) -> &DMatrix<f64> {
        &self.dc
    }

    /// Row of `W⊗A` that sensor `i`'s innovation reads.
    fn pivot(&self, i: usize) -> usize {
        i * self.n + self.measured[i]
    }

    /// Dense block-diagonal `K` from the free column entries.
    pub fn k_matrix(&self, k: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..self.sensors {
            for r in 0..self.n {
                out[(i * self.n + r, self.pivot(i))] = k[i * self.n + r];
            }
        }
        out
    }

    /// `Â = W⊗A − K D_C (W⊗A)`; row `i·n + r` loses `k·c_i²` times the pivot row.
    pub fn ahat(&self, k: &[f64]) -> DMatrix<f64> {
        let mut a = self.fa.clone();
        for i in 0..self.sensors {
            let p = self.pivot(i);
            let pivot_row = self.fa.row(p).clone_owned();
            for r in 0..self.n {
                let coef = k[i * self.n + r] * self.c2[i];
                if coef != 0.0 {
                    let row = i * self.n + r;
                    let updated = a.row(row) - pivot_row.clone() * coef;
                    a.row_mut(row).copy_from(&updated);
                }
            }
        }
        a
    }

    fn result(&self, k: Vec<f64>, method: GainMethod, history: Vec<f64>, iterations: usize, lmi_min_eig: Option<f64>) -> GainResult {
        let ahat = self.ahat(&k);
        let check = verify_schur(&ahat);
        let per_sensor = (0..self.sensors)
            .map(|i| (self.c2[i] * k[i * self.n + self.measured[i]]).abs())
            .collect();
        GainResult {
            k: self.k_matrix(&k),
            k_params: k,
            ahat,
            rho: check.rho,
            b: check.spectral_norm,
            success: check.stable,
            method,
            history,
            iterations,
            per_sensor,
            lmi_min_eig,
            n: self.n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMethod {
    Lmi,
    Fallback,
}

#[derive(Clone, Debug)]
pub struct GainResult {
    pub k: DMatrix<f64>,
    /// Free entries, `k_params[i·n + r]`.
    pub k_params: Vec<f64>,
    pub ahat: DMatrix<f64>,
    pub rho: f64,
    pub b: f64,
    pub success: bool,
    pub method: GainMethod,
    /// Cone-complementarity objective after each subproblem.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// `|C_i K^i C_iᵀ|` per sensor.
    pub per_sensor: Vec<f64>,
    /// Smallest eigenvalue over both LMI blocks at the returned point.
    pub lmi_min_eig: Option<f64>,
    n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainJson {
    pub method: GainMethod,
    pub success: bool,
    pub rho: f64,
    pub b: f64,
    pub history: Vec<f64>,
    pub iterations: usize,
    pub per_sensor: Vec<f64>,
    pub lmi_min_eig: Option<f64>,
    /// Row `i` holds the active column of `K^i`.
    pub k_columns: Vec<Vec<f64>>,
    /// Full `K`, row-major.
    pub k: Vec<Vec<f64>>,
}

impl GainResult {
    pub fn to_json(&self) -> GainJson {
        GainJson {
            method: self.method,
            success: self.success,
            rho: self.rho,
            b: self.b,
            history: self.history.clone(),
            iterations: self.iterations,
            per_sensor: self.per_sensor.clone(),
            lmi_min_eig: self.lmi_min_eig,
            k_columns: self.k_params.chunks(self.n).map(|c| c.to_vec()).collect(),
            k: (0..self.k.nrows()).map(|i| self.k.row(i).iter().cloned().collect()).collect(),
        }
    }
}

/// `W⊗A − K D_C (W⊗A)` from dense operands; `K` must vanish outside its `n×n` diagonal blocks.
pub fn assemble_ahat(w: &DMatrix<f64>, a: &DMatrix<f64>, k: &DMatrix<f64>, dc: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (nw, n) = (w.nrows(), a.nrows());
    let d = nw * n;
    check_dim("K rows", d, k.nrows())?;
    check_dim("K columns", d, k.ncols())?;
    check_dim("D_C rows", d, dc.nrows())?;
    check_dim("D_C columns", d, dc.ncols())?;
    for r in 0..d {
        for c in 0..d {
            if r / n != c / n && k[(r, c)] != 0.0 {
                return Err(Error::InvalidInput(format!("K[{r},{c}] lies outside the diagonal blocks")));
            }
        }
    }
    let f = kron(w, a);
    Ok(&f - k * dc * &f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchurCheck {
    pub rho: f64,
    pub spectral_norm: f64,
    pub stable: bool,
}

/// A lower bound on `‖Â‖₂` that holds for every admissible gain.
///
/// If `(Av)_m = 0` at every measured state `m`, the correction term vanishes
/// on `1⊗v` and `Â(1⊗v) = 1⊗Av`, so `‖Â‖₂ ≥ ‖Av‖/‖v‖` on that subspace.
/// Returns 0 when the subspace is trivial.
pub fn norm_lower_bound(a: &DMatrix<f64>, mm: &MeasurementModel) -> f64 {
    let n = a.nrows();
    let mut rows = DMatrix::zeros(n, n);
    for s in mm.sensors() {
        rows.row_mut(s.state).copy_from(&a.row(s.state));
    }
    let svd = rows.svd(false, true);
    let Some(v_t) = svd.v_t else { return 0.0 };
    let cut = 1e-12 * svd.singular_values.max().max(1.0);
    let null: Vec<DVector<f64>> = (0..n)
        .filter(|&k| svd.singular_values[k] <= cut)
        .map(|k| v_t.row(k).transpose())
        .collect();
    if null.is_empty() {
        return 0.0;
    }
    spectral_norm(&(a * DMatrix::from_columns(&null)))
}

pub fn verify_schur(ahat: &DMatrix<f64>) -> SchurCheck {
    let rho = spectral_radius(ahat);
    SchurCheck { rho, spectral_norm: spectral_norm(ahat), stable: rho < 1.0 }
}

/// Variable layout of one cone-complementarity subproblem: `svec(X)`, `svec(Y)`, then `k`.
struct CclLayout {
    d: usize,
    pairs: Vec<(usize, usize)>,
}

impl CclLayout {
    fn new(d: usize) -> Self {
        let pairs = (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect();
        Self { d, pairs }
    }

    fn sym_count(&self) -> usize {
        self.pairs.len()
    }

    fn k_offset(&self) -> usize {
        2 * self.sym_count()
    }

    fn unpack_sym(&self, z: &[f64], offset: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        for (idx, &(a, b)) in self.pairs.iter().enumerate() {
            let v = z[offset + idx];
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
        m
    }

    fn pack(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, k: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.k_offset() + k.len());
        z.extend(self.pairs.iter().map(|&(a, b)| x[(a, b)]));
        z.extend(self.pairs.iter().map(|&(a, b)| y[(a, b)]));
        z.extend_from_slice(k);
        z
    }

    /// `tr(Y_t X + X_t Y)` as a linear cost on `z`.
    fn cost(&self, xt: &DMatrix<f64>, yt: &DMatrix<f64>, nk: usize) -> Vec<f64> {
        let w = |a: usize, b: usize| if a == b { 1.0 } else { 2.0 };
        let mut c = Vec::with_capacity(self.k_offset() + nk);
        c.extend(self.pairs.iter().map(|&(a, b)| w(a, b) * yt[(a, b)]));
        c.extend(self.pairs.iter().map(|&(a, b)| w(a, b) * xt[(a, b)]));
        c.extend(std::iter::repeat_n(0.0, nk));
        c
    }
}

/// Builds the two LMIs `[X Âᵀ; Â Y] ≻ 0` and `[X I; I Y] ≻ 0` with `Â` affine in `k`.
fn ccl_constraints(p: &GainDesignProblem, layout: &CclLayout) -> SdpProblem {
    let d = p.dim();
    let mut f0a = DMatrix::zeros(2 * d, 2 * d);
    f0a.view_mut((d, 0), (d, d)).copy_from(&p.fa);
    f0a.view_mut((0, d), (d, d)).copy_from(&p.fa.transpose());
    let mut f0b = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        f0b[(i, d + i)] = 1.0;
        f0b[(d + i, i)] = 1.0;
    }

    let sym_entries = |offset: usize, a: usize, b: usize| -> Vec<Entry> {
        let mut v = Vec::with_capacity(4);
        for block in 0..2 {
            v.push(Entry { block, row: offset + a, col: offset + b, val: 1.0 });
            if a != b {
                v.push(Entry { block, row: offset + b, col: offset + a, val: 1.0 });
            }
        }
        v
    };
    let mut coeffs: Vec<Vec<Entry>> = Vec::with_capacity(layout.k_offset() + d);
    coeffs.extend(layout.pairs.iter().map(|&(a, b)| sym_entries(0, a, b)));
    coeffs.extend(layout.pairs.iter().map(|&(a, b)| sym_entries(d, a, b)));
    for i in 0..p.sensors {
        let pivot = p.pivot(i);
        for r in 0..p.n {
            let row = d + i * p.n + r;
            let mut v = Vec::new();
            for col in 0..d {
                let val = -p.c2[i] * p.fa[(pivot, col)];
                if val != 0.0 {
                    v.push(Entry { block: 0, row, col, val });
                    v.push(Entry { block: 0, row: col, col: row, val });
                }
            }
            coeffs.push(v);
        }
    }
    SdpProblem { block_sizes: vec![2 * d, 2 * d], c: vec![0.0; layout.k_offset() + d], f0: vec![f0a, f0b], coeffs }
}

/// Iterative cone-complementarity linearization.
///
/// Starts from the trivially feasible `X = Y = tI`, `K = 0`, then repeatedly
/// minimizes `tr(Y_t X + X_t Y)` over both LMIs. The objective sequence is
/// non-increasing because the previous point is feasible for the next
/// subproblem with the same value; a solver result that breaks this is
/// discarded in favor of the previous point. Stops once `ρ(Â) < 1` and the
/// objective is within `eps` (relative) of `2nN`, or when progress stalls.
pub fn cone_complementarity_design(p: &GainDesignProblem) -> Result<GainResult> {
    let d = p.dim();
    let nk = d;
    let target = 2.0 * d as f64;
    let layout = CclLayout::new(d);
    let mut sdp_problem = ccl_constraints(p, &layout);

    let t0 = 1.5 * spectral_norm(&p.fa).max(1.0) + 1.0;
    let x0 = DMatrix::identity(d, d) * t0;
    let anchor = layout.pack(&x0, &x0, &vec![0.0; nk]);
    let (mut xt, mut yt) = (x0.clone(), x0);
    let mut z = anchor.clone();
    let mut k = vec![0.0; nk];
    let mut history: Vec<f64> = Vec::new();
    let mut best_stable: Option<(Vec<f64>, f64)> = None;
    let mut lmi_min_eig = None;
    let mut iterations = 0;

    for it in 0..p.max_iter {
        iterations = it + 1;
        sdp_problem.c = layout.cost(&xt, &yt, nk);
        // Pull the warm start slightly inward; the previous optimum sits on the boundary.
        let start: Vec<f64> = z.iter().zip(&anchor).map(|(a, b)| 0.9 * a + 0.1 * b).collect();
        let sol = sdp::solve(&sdp_problem, &start, &p.sdp)?;
        let prev = history.last().copied().unwrap_or(f64::INFINITY);
        if sol.objective > prev || !sol.objective.is_finite() {
            history.push(prev);
            break;
        }
        z = sol.z;
        lmi_min_eig = Some(sol.min_eig);
        xt = layout.unpack_sym(&z, 0);
        yt = layout.unpack_sym(&z, layout.sym_count());
        k = z[layout.k_offset()..].to_vec();
        history.push(sol.objective);

        let rho = spectral_radius(&p.ahat(&k));
        if rho < 1.0 {
            best_stable = Some((k.clone(), rho));
        }
        let gap = (sol.objective - target).abs() / target;
        if rho < 1.0 && gap <= p.eps {
            break;
        }
        let improvement = (prev - sol.objective) / target;
        if improvement.is_finite() && improvement < 1e-9 && sol.status != SdpStatus::Stalled {
            break;
        }
    }

    let final_rho = spectral_radius(&p.ahat(&k));
    if final_rho < 1.0 {
        return Ok(p.result(k, GainMethod::Lmi, history, iterations, lmi_min_eig));
    }
    match best_stable {
        Some((kb, _)) => Ok(p.result(kb, GainMethod::Lmi, history, iterations, lmi_min_eig)),
        None => Err(Error::NotConverged { iterations, rho: final_rho }),
    }
}

/// Smallest eigenvalue of both LMI blocks at a given `(X, Y, k)`.
pub fn lmi_min_eigenvalue(p: &GainDesignProblem, x: &DMatrix<f64>, y: &DMatrix<f64>, k: &[f64]) -> f64 {
    let d = p.dim();
    let ah = p.ahat(k);
    let mut m1 = DMatrix::zeros(2 * d, 2 * d);
    m1.view_mut((0, 0), (d, d)).copy_from(x);
    m1.view_mut((d, d), (d, d)).copy_from(y);
    m1.view_mut((d, 0), (d, d)).copy_from(&ah);
    m1.view_mut((0, d), (d, d)).copy_from(&ah.transpose());
    let mut m2 = m1.clone();
    m2.view_mut((d, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
    m2.view_mut((0, d), (d, d)).copy_from(&DMatrix::identity(d, d));
    sym_min_eigenvalue(&m1).min(sym_min_eigenvalue(&m2))
}

/// Randomized search over the free gain entries minimizing `ρ(Â)`.
///
/// Starts from the best `K^i = γ C_iᵀ` on a log grid of `γ`, then takes
/// Gaussian perturbations, keeping improvements and halving the step after
/// a run of failures. `budget` counts spectral-radius evaluations.
pub fn fallback_gain_search<R: Rng + ?Sized>(p: &GainDesignProblem, budget: usize, rng: &mut R) -> Result<GainResult> {
    let nk = p.dim();
    let zero = vec![0.0; nk];
    let rho0 = spectral_radius(&p.fa);
    if rho0 < 1.0 {
        return Ok(p.result(zero, GainMethod::Fallback, vec![], 0, None));
    }
    let gains: Vec<f64> = (0..p.sensors).map(|i| p.c2[i].sqrt()).collect();
    let candidate = |gamma: f64| -> Vec<f64> {
        let mut k = vec![0.0; nk];
        for i in 0..p.sensors {
            k[i * p.n + p.measured[i]] = gamma * gains[i];
        }
        k
    };
    let mut evals = 0usize;
    let mut best = zero;
    let mut best_rho = rho0;
    for step in 0..=40 {
        let gamma = 10f64.powf(-2.0 + 3.0 * step as f64 / 40.0);
        let k = candidate(gamma);
        let rho = spectral_radius(&p.ahat(&k));
        evals += 1;
        if rho < best_rho {
            best_rho = rho;
            best = k;
        }
    }
    let mut sigma = 0.3;
    let mut failures = 0;
    while evals < budget && best_rho >= 0.99 {
        let trial: Vec<f64> = best.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let rho = spectral_radius(&p.ahat(&trial));
        evals += 1;
        if rho < best_rho {
            best_rho = rho;
            best = trial;
            failures = 0;
        } else {
            failures += 1;
            if failures >= 30 {
                sigma = (sigma * 0.5).max(1e-4);
                failures = 0;
            }
        }
    }
    if best_rho < 1.0 {
        Ok(p.result(best, GainMethod::Fallback, vec![], evals, None))
    } else {
        Err(Error::NotConverged { iterations: evals, rho: best_rho })
    }
}

/// Cone-complementarity first; the randomized search if that fails.
pub fn design_gain(p: &GainDesignProblem, fallback_budget: usize, seed: u64) -> Result<GainResult> {
    match cone_complementarity_design(p) {
        Ok(r) if r.success => Ok(r),
        Ok(_) | Err(Error::NotConverged { .. }) | Err(Error::Infeasible) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            fallback_gain_search(p, fallback_budget, &mut rng)
        }
        Err(e) => Err(e),
    }
}

/// Wall-clock helper used by reports.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Active column of each `K^i`, taken from a full `K`.
pub fn k_columns(k: &DMatrix<f64>, mm: &MeasurementModel) -> Vec<DVector<f64>> {
    let n = mm.n();
    mm.sensors()
        .iter()
        .enumerate()
        .map(|(i, s)| DVector::from_fn(n, |r, _| k[(i * n + r, i * n + s.state)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::Covariance;

    fn scalar_problem(a: f64) -> GainDesignProblem {
        let mm = MeasurementModel::unit(1, &[0], 0.1).unwrap();
        GainDesignProblem::from_parts(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, a), &mm).unwrap()
    }

    #[test]
    fn scalar_ahat() {
        let p = scalar_problem(0.5);
        assert!((p.ahat(&[0.5])[(0, 0)] - 0.25).abs() < 1e-15);
        let dense = assemble_ahat(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((dense[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scalar_ccl_is_stable() {
        let r = cone_complementarity_design(&scalar_problem(0.5)).unwrap();
        assert!(r.success);
        assert!(r.k[(0, 0)] > -1.0 && r.k[(0, 0)] < 3.0);
        let r = cone_complementarity_design(&scalar_problem(1.5)).unwrap();
        assert!(r.rho < 1.0);
    }

    #[test]
    fn fallback_scalar_and_stable_open_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let r = fallback_gain_search(&scalar_problem(1.5), 100, &mut rng).unwrap();
        assert!(r.rho < 1.0);
        let r = fallback_gain_search(&scalar_problem(0.5), 100, &mut rng).unwrap();
        assert_eq!(r.k_params, vec![0.0]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn verify_schur_basic() {
        assert!(!verify_schur(&DMatrix::identity(3, 3)).stable);
        let c = verify_schur(&(DMatrix::identity(3, 3) * 0.5));
        assert!(c.stable && (c.rho - 0.5).abs() < 1e-12 && (c.spectral_norm - 0.5).abs() < 1e-12);
    }

    #[test]
    fn off_block_gain_rejected() {
        let w = DMatrix::from_element(2, 2, 0.5);
        let a = DMatrix::identity(2, 2);
        let mut k = DMatrix::zeros(4, 4);
        k[(0, 3)] = 1.0;
        assert!(assemble_ahat(&w, &a, &k, &DMatrix::identity(4, 4)).is_err());
    }

    #[test]
    fn two_state_unstable_plant() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 1.0, 0.5]);
        let sys = SystemModel::new(a, Covariance::Scalar(0.0)).unwrap();
        let mm = MeasurementModel::unit(2, &[1], 0.1).unwrap();
        let p = GainDesignProblem::from_parts(&DMatrix::identity(1, 1), &sys.a, &mm).unwrap();
        let r = cone_complementarity_design(&p).unwrap();
        assert!(r.success);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}
