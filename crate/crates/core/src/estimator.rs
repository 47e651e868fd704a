//! Single time-scale networked estimator and its collective error recursion.
//!
//! Step `k ≥ 1` of a simulation, in order:
//! `x_k = A x_{k−1} + ν_{k−1}`, `y_k = C x_k + ζ_k + f_k`, one consensus
//! exchange producing the priors, one local correction producing the
//! posteriors. Noise records are indexed so that entry `k−1` holds the
//! `ν_{k−1}`, `ζ_k` and `f_k` used at step `k`.
//!
//! [`Simulation`] runs the protocol on the deviations `d^i = x̂^i − x` rather
//! than on the estimates themselves. Both update maps are affine and `W` is
//! row-stochastic, so `d` obeys the same prior and posterior updates driven
//! by `−ν` and by the measurement deviation `y − Cx = ζ + f`. For an unstable
//! plant `x` grows geometrically and `x − x̂` computed directly would lose all
//! precision to cancellation within a few hundred steps.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{check_dim, Error, Result};
use crate::gain::GainResult;
use crate::network::SensorNetwork;
use crate::system::{measure, sample_measurement_noise, sample_noise, FaultProfile, MeasurementModel, SystemModel};

/// Active column of each `K^i`; only these entries touch the innovation.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGains {
    cols: Vec<DVector<f64>>,
}

impl LocalGains {
    pub fn new(cols: Vec<DVector<f64>>) -> Self {
        Self { cols }
    }

    pub fn from_result(g: &GainResult, n: usize) -> Self {
        Self { cols: g.k_params.chunks(n).map(|c| DVector::from_column_slice(c)).collect() }
    }

    pub fn zeros(sensors: usize, n: usize) -> Self {
        Self { cols: vec![DVector::zeros(n); sensors] }
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn col(&self, i: usize) -> &DVector<f64> {
        &self.cols[i]
    }

    /// Dense block-diagonal `K`.
    pub fn to_matrix(&self, mm: &MeasurementModel) -> DMatrix<f64> {
        let n = mm.n();
        let d = n * self.cols.len();
        let mut k = DMatrix::zeros(d, d);
        for (i, col) in self.cols.iter().enumerate() {
            let m = mm.sensor(i).state;
            for r in 0..n {
                k[(i * n + r, i * n + m)] = col[r];
            }
        }
        k
    }
}

/// `x̂^i_{k|k−1} = Σ_j W_ij A x̂^j_{k−1|k−1}`.
pub fn prior_update(posteriors: &[DVector<f64>], net: &SensorNetwork, a: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    check_dim("posterior count", net.len(), posteriors.len())?;
    let propagated: Vec<DVector<f64>> = posteriors
        .iter()
        .map(|p| {
            check_dim("posterior", a.ncols(), p.len())?;
            Ok(a * p)
        })
        .collect::<Result<_>>()?;
    let w = net.w();
    Ok((0..net.len())
        .map(|i| {
            let mut acc = DVector::zeros(a.nrows());
            for (j, pj) in propagated.iter().enumerate() {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    acc.axpy(wij, pj, 1.0);
                }
            }
            acc
        })
        .collect())
}

/// `x̂^i_{k|k} = x̂^i_{k|k−1} + K^i C_iᵀ (y_i − C_i x̂^i_{k|k−1})`.
pub fn posterior_update(
    priors: &[DVector<f64>],
    mm: &MeasurementModel,
    gains: &LocalGains,
    y: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_dim("prior count", mm.len(), priors.len())?;
    check_dim("gain count", mm.len(), gains.len())?;
    check_dim("measurement", mm.len(), y.len())?;
    priors
        .iter()
        .enumerate()
        .map(|(i, prior)| {
            check_dim("prior", mm.n(), prior.len())?;
            let s = mm.sensor(i);
            let innovation = y[i] - s.gain * prior[s.state];
            let mut post = prior.clone();
            post.axpy(s.gain * innovation, gains.col(i), 1.0);
            Ok(post)
        })
        .collect()
}

/// `|y_i − C_i x̂^i|`.
pub fn residual(y_i: f64, estimate: &DVector<f64>, state: usize, gain: f64) -> f64 {
    (y_i - gain * estimate[state]).abs()
}

/// Everything recorded at one simulation step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    /// `ν_{k−1}`.
    pub nu: DVector<f64>,
    /// `ζ_k`.
    pub zeta: DVector<f64>,
    pub fault: DVector<f64>,
    pub y: DVector<f64>,
    pub posteriors: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
}

/// Plant, sensors and all local estimators advanced together under one RNG stream.
#[derive(Clone, Debug)]
pub struct Simulation {
    sys: SystemModel,
    mm: MeasurementModel,
    net: SensorNetwork,
    gains: LocalGains,
    faults: FaultProfile,
    rng: ChaCha20Rng,
    x: DVector<f64>,
    /// `x̂^i_{k|k} − x_k` per sensor.
    deviations: Vec<DVector<f64>>,
    k: usize,
    exchanges: usize,
}

impl Simulation {
    /// Estimates start at zero.
    pub fn new(
        sys: &SystemModel,
        mm: &MeasurementModel,
        net: &SensorNetwork,
        gains: &LocalGains,
        faults: &FaultProfile,
        seed: u64,
    ) -> Result<Self> {
        check_dim("state dimension", sys.n(), mm.n())?;
        check_dim("sensor count", mm.len(), net.len())?;
        check_dim("gain count", mm.len(), gains.len())?;
        Ok(Self {
            sys: sys.clone(),
            mm: mm.clone(),
            net: net.clone(),
            gains: gains.clone(),
            faults: faults.clone(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            x: sys.x0.clone(),
            deviations: vec![-&sys.x0; mm.len()],
            k: 0,
            exchanges: 0,
        })
    }

    pub fn with_initial_estimates(mut self, est: Vec<DVector<f64>>) -> Result<Self> {
        check_dim("initial estimates", self.mm.len(), est.len())?;
        for e in &est {
            check_dim("initial estimate", self.sys.n(), e.len())?;
        }
        self.deviations = est.iter().map(|e| e - &self.x).collect();
        Ok(self)
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    /// Consensus rounds performed so far; one per step.
    pub fn exchanges(&self) -> usize {
        self.exchanges
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    /// Current posteriors `x + d^i`.
    pub fn posteriors(&self) -> Vec<DVector<f64>> {
        self.deviations.iter().map(|d| &self.x + d).collect()
    }

    /// Current `x̂^i_{k|k} − x_k`, without cancellation.
    pub fn deviations(&self) -> &[DVector<f64>] {
        &self.deviations
    }

    pub fn measurement_model(&self) -> &MeasurementModel {
        &self.mm
    }

    pub fn network(&self) -> &SensorNetwork {
        &self.net
    }

    /// Collective error `x_k − x̂^i_{k|k}` stacked over sensors.
    pub fn collective_error(&self) -> DVector<f64> {
        let n = self.sys.n();
        let mut e = DVector::zeros(n * self.deviations.len());
        for (i, d) in self.deviations.iter().enumerate() {
            e.rows_mut(i * n, n).copy_from(&-d);
        }
        e
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let n = self.sys.n();
        let nu = sample_noise(&self.sys.q, n, &mut self.rng)?;
        let zeta = sample_measurement_noise(&self.mm, &mut self.rng);
        self.k += 1;
        self.x = &self.sys.a * &self.x + &nu;
        let fault = self.faults.evaluate(self.k, self.mm.len());
        let y = measure(&self.mm, &self.x, &zeta, &fault)?;
        let mut priors = prior_update(&self.deviations, &self.net, &self.sys.a)?;
        for p in &mut priors {
            *p -= &nu;
        }
        self.exchanges += 1;
        let y_dev = &zeta + &fault;
        self.deviations = posterior_update(&priors, &self.mm, &self.gains, &y_dev)?;
        let residuals = self
            .mm
            .sensors()
            .iter()
            .enumerate()
            .map(|(i, s)| residual(y_dev[i], &self.deviations[i], s.state, s.gain))
            .collect();
        Ok(StepRecord {
            k: self.k,
            x: self.x.clone(),
            nu,
            zeta,
            fault,
            y,
            posteriors: self.posteriors(),
            residuals,
        })
    }

    /// Swaps in a new sensor set. `deviations` gives each new sensor's
    /// starting `x̂ − x`; the plant state, step counter and RNG carry on.
    pub fn reconfigure(
        &mut self,
        mm: MeasurementModel,
        net: SensorNetwork,
        gains: LocalGains,
        faults: FaultProfile,
        deviations: Vec<DVector<f64>>,
    ) -> Result<()> {
        check_dim("state dimension", self.sys.n(), mm.n())?;
        check_dim("sensor count", mm.len(), net.len())?;
        check_dim("gain count", mm.len(), gains.len())?;
        check_dim("deviations", mm.len(), deviations.len())?;
        self.mm = mm;
        self.net = net;
        self.gains = gains;
        self.faults = faults;
        self.deviations = deviations;
        Ok(())
    }
}

/// Per-step error statistics. Index 0 is the initial error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorTrace {
    pub errors: Vec<DVector<f64>>,
    /// `‖e^i_k‖²` per step, per sensor.
    pub squared_errors: Vec<Vec<f64>>,
    /// Mean over sensors of `‖e^i_k‖² / n`.
    pub msee: Vec<f64>,
}

impl ErrorTrace {
    pub fn push(&mut self, e: DVector<f64>, n: usize) {
        let per: Vec<f64> = e.as_slice().chunks(n).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let msee = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / (per.len() * n) as f64 };
        self.errors.push(e);
        self.squared_errors.push(per);
        self.msee.push(msee);
    }
}

/// Output of [`run_filter`]: index `k−1` of each record belongs to step `k`.
#[derive(Clone, Debug, Default)]
pub struct FilterRun {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub process_noise: Vec<DVector<f64>>,
    pub measurement_noise: Vec<DVector<f64>>,
    pub faults: Vec<DVector<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub trace: ErrorTrace,
    pub exchanges: usize,
}

impl FilterRun {
    pub fn record(&mut self, rec: StepRecord, error: DVector<f64>, n: usize) {
        self.states.push(rec.x);
        self.measurements.push(rec.y);
        self.process_noise.push(rec.nu);
        self.measurement_noise.push(rec.zeta);
        self.faults.push(rec.fault);
        self.residuals.push(rec.residuals);
        self.trace.push(error, n);
    }
}

pub fn run_filter(
    sys: &SystemModel,
    mm: &MeasurementModel,
    net: &SensorNetwork,
    gains: &LocalGains,
    faults: &FaultProfile,
    steps: usize,
    seed: u64,
) -> Result<FilterRun> {
    let sim = Simulation::new(sys, mm, net, gains, faults, seed)?;
    run_simulation(sim, steps)
}

/// Advances `sim` by `steps`, recording the initial error first.
pub fn run_simulation(mut sim: Simulation, steps: usize) -> Result<FilterRun> {
    let n = sim.sys.n();
    let mut run = FilterRun::default();
    run.trace.push(sim.collective_error(), n);
    for _ in 0..steps {
        let rec = sim.step()?;
        run.record(rec, sim.collective_error(), n);
    }
    run.exchanges = sim.exchanges();
    Ok(run)
}

/// Propagates `e_k = Â e_{k−1} + η_k` with
/// `η_k = 1⊗ν_{k−1} − K D_C (1⊗ν_{k−1}) − K D̄_C ζ_k − K D̄_C f_k`.
pub fn error_recursion_oracle(
    ahat: &DMatrix<f64>,
    k: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    dcb: &DMatrix<f64>,
    nu: &[DVector<f64>],
    zeta: &[DVector<f64>],
    faults: &[DVector<f64>],
    e0: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    if nu.len() != zeta.len() || nu.len() != faults.len() {
        return Err(Error::InvalidInput(format!(
            "record lengths differ: {} process, {} measurement, {} fault",
            nu.len(),
            zeta.len(),
            faults.len()
        )));
    }
    let d = ahat.nrows();
    check_dim("e0", d, e0.len())?;
    let sensors = dcb.ncols();
    let kd = k * dc;
    let kdb = k * dcb;
    let mut out = Vec::with_capacity(nu.len() + 1);
    out.push(e0.clone());
    for step in 0..nu.len() {
        let n = nu[step].len();
        check_dim("collective dimension", d, n * sensors)?;
        let mut lifted = DVector::zeros(d);
        for i in 0..sensors {
            lifted.rows_mut(i * n, n).copy_from(&nu[step]);
        }
        let eta = &lifted - &kd * &lifted - &kdb * (&zeta[step] + &faults[step]);
        let next = ahat * out.last().expect("seeded with e0") + eta;
        out.push(next);
    }
    Ok(out)
}

/// `η_k` alone, for locality checks.
pub fn eta(k: &DMatrix<f64>, dc: &DMatrix<f64>, dcb: &DMatrix<f64>, nu: &DVector<f64>, zeta: &DVector<f64>, fault: &DVector<f64>) -> DVector<f64> {
    let sensors = dcb.ncols();
    let n = nu.len();
    let mut lifted = DVector::zeros(n * sensors);
    for i in 0..sensors {
        lifted.rows_mut(i * n, n).copy_from(nu);
    }
    &lifted - k * dc * &lifted - k * dcb * (zeta + fault)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_row_stochastic, cycle_edges, ConsensusRule};
    use crate::system::Covariance;

    fn small() -> (SystemModel, MeasurementModel, SensorNetwork) {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.8]);
        let sys = SystemModel::new(a, Covariance::Scalar(0.0)).unwrap();
        let mm = MeasurementModel::unit(2, &[0, 1, 0], 0.0).unwrap();
        let net = build_row_stochastic(3, &cycle_edges(3), ConsensusRule::Uniform, 0).unwrap();
        (sys, mm, net)
    }

    #[test]
    fn consensus_fixed_point() {
        let (sys, _, net) = small();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let pri = prior_update(&vec![x.clone(); 3], &net, &sys.a).unwrap();
        for p in pri {
            assert!((p - &sys.a * &x).amax() < 1e-14);
        }
    }

    #[test]
    fn zero_innovation_and_zero_gain() {
        let (_, mm, _) = small();
        let priors = vec![DVector::from_vec(vec![1.0, 2.0]); 3];
        let y = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let g = LocalGains::new(vec![DVector::from_vec(vec![0.5, 0.5]); 3]);
        assert_eq!(posterior_update(&priors, &mm, &g, &y).unwrap(), priors);
        let y2 = DVector::from_vec(vec![5.0, 5.0, 5.0]);
        assert_eq!(posterior_update(&priors, &mm, &LocalGains::zeros(3, 2), &y2).unwrap(), priors);
    }

    #[test]
    fn exact_initialization_stays_exact() {
        let (sys, mm, net) = small();
        let sys = sys.with_x0(DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let g = LocalGains::new(vec![DVector::from_vec(vec![0.3, 0.1]); 3]);
        let sim = Simulation::new(&sys, &mm, &net, &g, &FaultProfile::none(), 1)
            .unwrap()
            .with_initial_estimates(vec![sys.x0.clone(); 3])
            .unwrap();
        let run = run_simulation(sim, 20).unwrap();
        assert!(run.trace.msee.iter().all(|&v| v < 1e-28));
        assert_eq!(run.exchanges, 20);
    }

    #[test]
    fn residual_of_perfect_estimate() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(residual(2.0, &x, 1, 1.0), 0.0);
        assert!((residual(2.1, &x, 1, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_ragged_records() {
        let z = DMatrix::zeros(2, 2);
        let r = error_recursion_oracle(&z, &z, &z, &DMatrix::zeros(2, 1), &[DVector::zeros(2)], &[], &[], &DVector::zeros(2));
        assert!(r.is_err());
    }
}
