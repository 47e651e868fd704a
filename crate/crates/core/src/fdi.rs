//! Residual thresholds, covariance-bound checks and fault detection/isolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::GainResult;
use crate::linalg::{discrete_lyapunov, spectral_norm};
use crate::system::{Covariance, MeasurementModel};

/// How the steady-state amplification `Σ_j ‖Â^j‖²`-type factor is bounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `1 / (1 − b²)`; needs `b = ‖Â‖₂ < 1`.
    Geometric,
    /// `‖L‖₂` with `L = Â L Âᵀ + I`; needs only `ρ(Â) < 1`.
    Gramian,
    /// `Φ = max_i ‖P_ii‖₂` for the exact stationary error covariance
    /// `P = Â P Âᵀ + Σ_η`; needs only `ρ(Â) < 1`.
    Stationary,
    /// `Geometric` when `b < 1`, otherwise `Gramian`.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Geometric,
    Gramian,
    /// `factor` is the effective multiplier `Φ·N / (α₁ N q + α₂ β r)`.
    Stationary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub b: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub c: f64,
    pub q_norm: f64,
    pub r: f64,
    pub sensors: usize,
    pub factor_kind: FactorKind,
    pub factor: f64,
    pub phi: f64,
    pub t68: f64,
    pub t95: f64,
    pub t99: f64,
}

impl ThresholdSet {
    pub fn level(&self, level: Level) -> f64 {
        match level {
            Level::L68 => self.t68,
            Level::L95 => self.t95,
            Level::L99 => self.t99,
        }
    }
}

/// `Φ = (α₁ N q + α₂ β r) · factor / N`, `T_j = j·(cΦ + r)`.
fn assemble(
    b: f64,
    alpha1: f64,
    alpha2: f64,
    beta: f64,
    c: f64,
    q: f64,
    r: f64,
    sensors: usize,
    factor_kind: FactorKind,
    factor: f64,
) -> ThresholdSet {
    let n = sensors as f64;
    let phi = (alpha1 * n * q + alpha2 * beta * r) * factor / n;
    let base = c * phi + r;
    ThresholdSet {
        b,
        alpha1,
        alpha2,
        beta,
        c,
        q_norm: q,
        r,
        sensors,
        factor_kind,
        factor,
        phi,
        t68: base,
        t95: 2.0 * base,
        t99: 3.0 * base,
    }
}

/// Thresholds from already-computed scalar terms, with the `1/(1 − b²)` factor.
pub fn thresholds_from_terms(
    alpha1: f64,
    alpha2: f64,
    beta: f64,
    c: f64,
    b: f64,
    q: f64,
    r: f64,
    sensors: usize,
) -> Result<ThresholdSet> {
    if !(0.0..1.0).contains(&b) {
        return Err(Error::ThresholdUnavailable { b });
    }
    if sensors == 0 {
        return Err(Error::EmptyGraph);
    }
    Ok(assemble(b, alpha1, alpha2, beta, c, q, r, sensors, FactorKind::Geometric, 1.0 / (1.0 - b * b)))
}

/// Computes `α₁ = ‖I − K D_C‖²`, `α₂ = ‖K‖²`, `β = ‖R̄‖/‖R‖` with
/// `R̄ = blockdiag(C_iᵀ R_i C_i)`, `c = max|c_i|`, `R = max R_i`, then `Φ`
/// and the three residual thresholds.
pub fn compute_thresholds(gain: &GainResult, mm: &MeasurementModel, q: &Covariance, mode: ThresholdMode) -> Result<ThresholdSet> {
    let n = mm.n();
    let sensors = mm.len();
    if sensors == 0 {
        return Err(Error::EmptyGraph);
    }
    let d = n * sensors;
    crate::error::check_dim("gain dimension", d, gain.k.nrows())?;
    let (dc, _) = crate::observability::build_output_blocks(mm);
    let alpha1 = spectral_norm(&(DMatrix::identity(d, d) - &gain.k * &dc)).powi(2);
    let alpha2 = spectral_norm(&gain.k).powi(2);
    let r = mm.r_max();
    let rbar = mm.sensors().iter().map(|s| s.gain * s.gain * s.r).fold(0.0, f64::max);
    let beta = if r > 0.0 { rbar / r } else { 1.0 };
    let c = mm.c_max();
    let qn = q.norm(n)?;
    let b = gain.b;
    let kind = match mode {
        ThresholdMode::Geometric => FactorKind::Geometric,
        ThresholdMode::Gramian => FactorKind::Gramian,
        ThresholdMode::Stationary => FactorKind::Stationary,
        ThresholdMode::Auto if b < 1.0 => FactorKind::Geometric,
        ThresholdMode::Auto => FactorKind::Gramian,
    };
    let factor = match kind {
        FactorKind::Geometric => {
            if b >= 1.0 {
                return Err(Error::ThresholdUnavailable { b });
            }
            1.0 / (1.0 - b * b)
        }
        FactorKind::Gramian => {
            let l = discrete_lyapunov(&gain.ahat, &DMatrix::identity(d, d)).ok_or(Error::ThresholdUnavailable { b })?;
            spectral_norm(&l)
        }
        FactorKind::Stationary => {
            let phi = stationary_phi(gain, mm, q)?;
            let denom = alpha1 * sensors as f64 * qn + alpha2 * beta * r;
            if denom > 0.0 {
                phi * sensors as f64 / denom
            } else {
                0.0
            }
        }
    };
    Ok(assemble(b, alpha1, alpha2, beta, c, qn, r, sensors, kind, factor))
}

/// Stationary covariance of the noise term driving the error recursion:
/// `(I − K D_C)(11ᵀ ⊗ Q)(I − K D_C)ᵀ + K D̄_C diag(R) D̄_Cᵀ Kᵀ`.
pub fn error_noise_covariance(gain: &GainResult, mm: &MeasurementModel, q: &Covariance) -> Result<DMatrix<f64>> {
    let (n, sensors) = (mm.n(), mm.len());
    let d = n * sensors;
    let (dc, dcb) = crate::observability::build_output_blocks(mm);
    let ikd = DMatrix::identity(d, d) - &gain.k * &dc;
    let qq = crate::linalg::kron(&DMatrix::from_element(sensors, sensors, 1.0), &q.to_matrix(n)?);
    let kd = &gain.k * &dcb;
    let rr = DMatrix::from_diagonal(&mm.r_diag());
    Ok(&ikd * qq * ikd.transpose() + &kd * rr * kd.transpose())
}

/// Largest per-sensor block norm of the stationary error covariance.
pub fn stationary_phi(gain: &GainResult, mm: &MeasurementModel, q: &Covariance) -> Result<f64> {
    let n = mm.n();
    let sigma = error_noise_covariance(gain, mm, q)?;
    let p = discrete_lyapunov(&gain.ahat, &sigma).ok_or(Error::ThresholdUnavailable { b: gain.b })?;
    Ok((0..mm.len()).map(|i| spectral_norm(&p.view((i * n, i * n), (n, n)).into_owned())).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Largest per-sensor variance in each replication.
    pub max_variance: Vec<f64>,
    pub phi: f64,
    pub holds: bool,
}

/// Empirical per-sensor variance: for each replication and sensor, the mean of
/// `(e^i_{k,r})²` over post-burn-in steps, maximized over state components.
/// `errors[rep][k]` is the collective error at step `k`.
pub fn steady_state_covariance_bound_check(errors: &[Vec<DVector<f64>>], n: usize, thresholds: &ThresholdSet, burn_in: usize) -> BoundCheck {
    let max_variance: Vec<f64> = errors.iter().map(|rep| per_sensor_variance(rep, n, burn_in).into_iter().fold(0.0, f64::max)).collect();
    let holds = max_variance.iter().all(|&v| v <= thresholds.phi);
    BoundCheck { max_variance, phi: thresholds.phi, holds }
}

/// Per-sensor maximum over components of the time-averaged squared error.
pub fn per_sensor_variance(rep: &[DVector<f64>], n: usize, burn_in: usize) -> Vec<f64> {
    let tail: Vec<&DVector<f64>> = rep.iter().skip(burn_in).collect();
    let Some(first) = tail.first() else { return Vec::new() };
    let d = first.len();
    let mut acc = vec![0.0; d];
    for e in &tail {
        for (a, v) in acc.iter_mut().zip(e.iter()) {
            *a += v * v;
        }
    }
    let count = tail.len() as f64;
    acc.chunks(n)
        .map(|c| c.iter().map(|s| s / count).fold(0.0, f64::max))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "68")]
    L68,
    #[serde(rename = "95")]
    L95,
    #[serde(rename = "99")]
    L99,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L68, Level::L95, Level::L99];

    pub fn percent(self) -> u32 {
        match self {
            Level::L68 => 68,
            Level::L95 => 95,
            Level::L99 => 99,
        }
    }

    pub fn from_percent(p: u32) -> Option<Self> {
        match p {
            68 => Some(Level::L68),
            95 => Some(Level::L95),
            99 => Some(Level::L99),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorVerdict {
    pub sensor: usize,
    /// Highest level ever flagged.
    pub level: Option<Level>,
    /// First flagged step at 68, 95 and 99 %.
    pub first_crossing: [Option<usize>; 3],
    pub isolated: bool,
}

impl SensorVerdict {
    pub fn crossing(&self, level: Level) -> Option<usize> {
        self.first_crossing[level as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdiConfig {
    pub burn_in: usize,
    pub persistence: usize,
    pub decision_level: Level,
}

impl Default for FdiConfig {
    fn default() -> Self {
        Self { burn_in: 10, persistence: 1, decision_level: Level::L95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdiReport {
    pub verdicts: Vec<SensorVerdict>,
    pub isolated: Vec<usize>,
    pub config: FdiConfig,
}

/// `residuals[k − 1][i]` is `r^i_k`. Sensor `i` is flagged at level `L` at the
/// first step `k` such that the `m` steps ending at `k` are all past burn-in
/// and all exceed `T_L`.
pub fn detect_and_isolate(residuals: &[Vec<f64>], thresholds: &ThresholdSet, cfg: &FdiConfig) -> FdiReport {
    let sensors = residuals.first().map_or(0, |r| r.len());
    let m = cfg.persistence.max(1);
    let verdicts: Vec<SensorVerdict> = (0..sensors)
        .map(|i| {
            let mut first = [None; 3];
            for level in Level::ALL {
                let t = thresholds.level(level);
                let mut run = 0usize;
                for (idx, r) in residuals.iter().enumerate() {
                    let k = idx + 1;
                    if k < cfg.burn_in {
                        continue;
                    }
                    if r[i] > t {
                        run += 1;
                        if run >= m {
                            first[level as usize] = Some(k);
                            break;
                        }
                    } else {
                        run = 0;
                    }
                }
            }
            let level = Level::ALL.iter().rev().copied().find(|l| first[*l as usize].is_some());
            let isolated = first[cfg.decision_level as usize].is_some();
            SensorVerdict { sensor: i, level, first_crossing: first, isolated }
        })
        .collect();
    let isolated = verdicts.iter().filter(|v| v.isolated).map(|v| v.sensor).collect();
    FdiReport { verdicts, isolated, config: cfg.clone() }
}

/// Fraction of post-burn-in samples above `T_68`, `T_95`, `T_99`, and the sample count.
pub fn exceedance_rates(residuals: &[Vec<f64>], thresholds: &ThresholdSet, burn_in: usize) -> ([f64; 3], usize) {
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    for (idx, row) in residuals.iter().enumerate() {
        if idx + 1 < burn_in {
            continue;
        }
        for &r in row {
            total += 1;
            for level in Level::ALL {
                if r > thresholds.level(level) {
                    counts[level as usize] += 1;
                }
            }
        }
    }
    let rate = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    ([rate(counts[0]), rate(counts[1]), rate(counts[2])], total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_terms() {
        let t = thresholds_from_terms(3.83, 3.84, 1.0, 1.0, 0.63, 0.04, 0.04, 4).unwrap();
        assert!((t.phi - 0.31770).abs() < 1e-4, "{}", t.phi);
        assert!((t.t68 - (t.phi + 0.04)).abs() < 1e-15);
        assert_eq!(t.t95, 2.0 * t.t68);
        assert_eq!(t.t99, 3.0 * t.t68);
    }

    #[test]
    fn noiseless_terms() {
        let t = thresholds_from_terms(3.0, 3.0, 1.0, 1.0, 0.5, 0.0, 0.0, 4).unwrap();
        assert_eq!((t.phi, t.t68, t.t95, t.t99), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn unavailable_when_norm_not_contractive() {
        assert!(matches!(
            thresholds_from_terms(1.0, 1.0, 1.0, 1.0, 1.0, 0.04, 0.04, 4),
            Err(Error::ThresholdUnavailable { .. })
        ));
    }

    #[test]
    fn flags_with_persistence_and_burn_in() {
        let t = thresholds_from_terms(1.0, 0.0, 1.0, 1.0, 0.0, 0.25, 0.0, 1).unwrap();
        // T68 = 0.25, T95 = 0.5, T99 = 0.75
        let series: Vec<Vec<f64>> = [0.9, 0.0, 0.3, 0.3, 0.6, 0.6, 0.8].iter().map(|&v| vec![v]).collect();
        let cfg = FdiConfig { burn_in: 2, persistence: 2, decision_level: Level::L95 };
        let rep = detect_and_isolate(&series, &t, &cfg);
        let v = &rep.verdicts[0];
        assert_eq!(v.first_crossing, [Some(4), Some(6), None]);
        assert_eq!(v.level, Some(Level::L95));
        assert_eq!(rep.isolated, vec![0]);
    }

    #[test]
    fn silent_residuals_never_flag() {
        let t = thresholds_from_terms(1.0, 1.0, 1.0, 1.0, 0.5, 0.04, 0.04, 2).unwrap();
        let rep = detect_and_isolate(&vec![vec![0.0, 0.0]; 50], &t, &FdiConfig::default());
        assert!(rep.isolated.is_empty());
        assert!(rep.verdicts.iter().all(|v| v.level.is_none()));
    }

    #[test]
    fn variance_of_constant_error() {
        let rep = vec![DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0]); 5];
        assert_eq!(per_sensor_variance(&rep, 2, 1), vec![1.0, 4.0]);
    }
}
