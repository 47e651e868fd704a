//! Plant model, faulty sensor measurements and their simulation primitives.
//!
//! Index convention: every index in this crate is 0-based. Human-facing
//! formats (scenario configs, JSON reports) convert at their own boundary.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{numerical_rank, spectral_radius, RANK_REL_TOL};

/// Maximum number of seeds tried by [`realize_system`].
pub const REALIZE_ATTEMPTS: usize = 100;

/// Zero/nonzero pattern of a square matrix.
///
/// Entry `(i, j)` set means state `i` drives state `j`; this is also the
/// digraph edge `i -> j`. The realized dynamics matrix is therefore the
/// transpose of the realized pattern (see [`realize_system`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredMatrix {
    n: usize,
    cells: Vec<bool>,
}

impl StructuredMatrix {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self> {
        check_dim("pattern cells", n * n, cells.len())?;
        if n == 0 {
            return Err(Error::InvalidInput("pattern must have at least one row".into()));
        }
        Ok(Self { n, cells })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let cells = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self::new(n, cells)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, |i, j| i == j)
    }

    pub fn full(n: usize) -> Result<Self> {
        Self::from_fn(n, |_, _| true)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    pub fn nonzero_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Nonzero positions in row-major order.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(k, _)| (k / n, k % n))
    }

    /// Grid text: `n` lines of `n` characters, `*` nonzero, `0` zero.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse_grid(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<bool>> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| match c {
                    '*' => Ok(true),
                    '0' => Ok(false),
                    other => Err(Error::PatternParse {
                        line: lineno + 1,
                        msg: format!("unexpected character {other:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if n == 0 {
            return Err(Error::PatternParse { line: 0, msg: "empty pattern".into() });
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::PatternParse {
                    line: i + 1,
                    msg: format!("row has {} cells, pattern has {n} rows", row.len()),
                });
            }
        }
        Self::new(n, rows.into_iter().flatten().collect())
    }

    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.get(i, j) { '*' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

impl FromStr for StructuredMatrix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse_grid(s)
    }
}

impl fmt::Display for StructuredMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid())
    }
}

/// How nonzero weights are drawn before the spectral rescaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightRule {
    /// Diagonal weights `U[diag_lo, diag_hi]` kept positive; off-diagonal
    /// weights `U[off_lo, off_hi]`, negated with probability 1/2 when
    /// `random_sign` is set.
    Uniform {
        diag_lo: f64,
        diag_hi: f64,
        off_lo: f64,
        off_hi: f64,
        random_sign: bool,
    },
    Constant { value: f64 },
}

impl Default for WeightRule {
    fn default() -> Self {
        WeightRule::Uniform {
            diag_lo: 0.5,
            diag_hi: 1.5,
            off_lo: 0.5,
            off_hi: 1.5,
            random_sign: true,
        }
    }
}

impl WeightRule {
    fn is_deterministic(&self) -> bool {
        matches!(self, WeightRule::Constant { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            WeightRule::Uniform { diag_lo, diag_hi, off_lo, off_hi, .. } => {
                if !(diag_lo > 0.0 && diag_lo <= diag_hi && off_lo > 0.0 && off_lo <= off_hi) {
                    return Err(Error::InvalidInput(
                        "weight ranges must be positive with lo <= hi".into(),
                    ));
                }
                Ok(())
            }
            WeightRule::Constant { value } if value != 0.0 && value.is_finite() => Ok(()),
            WeightRule::Constant { .. } => {
                Err(Error::InvalidInput("constant weight must be finite and nonzero".into()))
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, diagonal: bool, rng: &mut R) -> f64 {
        match *self {
            WeightRule::Constant { value } => value,
            WeightRule::Uniform { diag_lo, diag_hi, off_lo, off_hi, random_sign } => {
                if diagonal {
                    rng.random_range(diag_lo..=diag_hi)
                } else {
                    let v = rng.random_range(off_lo..=off_hi);
                    if random_sign && rng.random_bool(0.5) {
                        -v
                    } else {
                        v
                    }
                }
            }
        }
    }
}

/// Noise variance: `Scalar(q)` stands for `q·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Covariance {
    pub fn to_matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            Covariance::Scalar(q) => Ok(DMatrix::identity(dim, dim) * *q),
            Covariance::Matrix(rows) => {
                check_dim("covariance rows", dim, rows.len())?;
                let mut m = DMatrix::zeros(dim, dim);
                for (i, row) in rows.iter().enumerate() {
                    check_dim("covariance columns", dim, row.len())?;
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                Ok(m)
            }
        }
    }

    /// Spectral norm, which for a PSD matrix is the largest eigenvalue.
    pub fn norm(&self, dim: usize) -> Result<f64> {
        match self {
            Covariance::Scalar(q) => Ok(q.abs()),
            Covariance::Matrix(_) => Ok(crate::linalg::spectral_norm(&self.to_matrix(dim)?)),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Covariance::Scalar(q) if *q >= 0.0 && q.is_finite() => Ok(()),
            Covariance::Scalar(q) => Err(Error::NotPsd { min_eig: *q }),
            Covariance::Matrix(_) => {
                let m = self.to_matrix(dim)?;
                let asym = (&m - m.transpose()).amax();
                if asym > 1e-12 * m.amax().max(1.0) {
                    return Err(Error::InvalidInput("covariance is not symmetric".into()));
                }
                let min_eig = crate::linalg::sym_min_eigenvalue(&m);
                if min_eig < -1e-12 * m.amax().max(1.0) {
                    return Err(Error::NotPsd { min_eig });
                }
                Ok(())
            }
        }
    }
}

/// Plant `x_{k+1} = A x_k + ν_k` with `ν_k ~ N(0, Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub q: Covariance,
    pub x0: DVector<f64>,
    /// Seed that produced `a`, if it was realized from a pattern.
    pub seed: Option<u64>,
}

impl SystemModel {
    /// Validates squareness, full rank and the covariance; `x0` defaults to zero.
    pub fn new(a: DMatrix<f64>, q: Covariance) -> Result<Self> {
        check_dim("A columns", a.nrows(), a.ncols())?;
        let n = a.nrows();
        let (rank, _) = numerical_rank(&a, RANK_REL_TOL);
        if rank < n {
            return Err(Error::InvalidInput(format!("A has rank {rank} < {n}")));
        }
        q.validate(n)?;
        Ok(Self { x0: DVector::zeros(n), a, q, seed: None })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn with_q(mut self, q: Covariance) -> Result<Self> {
        q.validate(self.n())?;
        self.q = q;
        Ok(self)
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Result<Self> {
        check_dim("x0", self.n(), x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn to_json(&self) -> SystemJson {
        SystemJson {
            n: self.n(),
            a: (0..self.n()).map(|i| self.a.row(i).iter().cloned().collect()).collect(),
            q: self.q.clone(),
            x0: self.x0.iter().cloned().collect(),
            seed: self.seed,
        }
    }

    pub fn from_json(doc: &SystemJson) -> Result<Self> {
        check_dim("A rows", doc.n, doc.a.len())?;
        let mut a = DMatrix::zeros(doc.n, doc.n);
        for (i, row) in doc.a.iter().enumerate() {
            check_dim("A row length", doc.n, row.len())?;
            for (j, v) in row.iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        let mut model = Self::new(a, doc.q.clone())?.with_x0(DVector::from_vec(doc.x0.clone()))?;
        model.seed = doc.seed;
        Ok(model)
    }
}

/// Serialized form of a [`SystemModel`]; `A` is a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemJson {
    pub n: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Covariance,
    pub x0: Vec<f64>,
    pub seed: Option<u64>,
}

/// Samples weights on the pattern support and rescales them to `target_rho`.
///
/// Pattern entry `(i, j)` becomes `A[(j, i)]`: the state that drives sits in
/// the column. Rank-deficient or nilpotent draws retry with `seed + 1`, up to
/// [`REALIZE_ATTEMPTS`] seeds; the seed actually used is stored in the model.
pub fn realize_system(
    pattern: &StructuredMatrix,
    rule: &WeightRule,
    target_rho: f64,
    seed: u64,
) -> Result<SystemModel> {
    if !(target_rho > 0.0 && target_rho.is_finite()) {
        return Err(Error::InvalidInput(format!("target spectral radius {target_rho} must be positive")));
    }
    rule.validate()?;
    let n = pattern.n();
    let attempts = if rule.is_deterministic() { 1 } else { REALIZE_ATTEMPTS };
    for attempt in 0..attempts {
        let s = seed.wrapping_add(attempt as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut a = DMatrix::zeros(n, n);
        for (i, j) in pattern.nonzeros() {
            a[(j, i)] = rule.sample(i == j, &mut rng);
        }
        let rho = spectral_radius(&a);
        if rho <= 1e-12 {
            continue;
        }
        a *= target_rho / rho;
        if numerical_rank(&a, RANK_REL_TOL).0 < n {
            continue;
        }
        let mut model = SystemModel::new(a, Covariance::Scalar(0.0))?;
        model.seed = Some(s);
        return Ok(model);
    }
    Err(Error::RankDeficient { attempts })
}

pub fn step_dynamics(model: &SystemModel, x: &DVector<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("state", model.n(), x.len())?;
    check_dim("process noise", model.n(), noise.len())?;
    Ok(&model.a * x + noise)
}

/// One scalar sensor: `y_i = gain · x[state] + ζ_i + f_i` with `ζ_i ~ N(0, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub state: usize,
    pub gain: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementModel {
    n: usize,
    sensors: Vec<Sensor>,
}

impl MeasurementModel {
    /// `r = 0` is accepted so that noiseless runs remain expressible.
    pub fn new(n: usize, sensors: Vec<Sensor>) -> Result<Self> {
        for (i, s) in sensors.iter().enumerate() {
            if s.state >= n {
                return Err(Error::InvalidInput(format!(
                    "sensor {i} measures state {} outside 0..{n}",
                    s.state
                )));
            }
            if s.gain == 0.0 || !s.gain.is_finite() {
                return Err(Error::InvalidInput(format!("sensor {i} has zero or non-finite gain")));
            }
            if !(s.r >= 0.0 && s.r.is_finite()) {
                return Err(Error::NotPsd { min_eig: s.r });
            }
        }
        Ok(Self { n, sensors })
    }

    /// Unit gains and a common noise variance.
    pub fn unit(n: usize, states: &[usize], r: f64) -> Result<Self> {
        Self::new(n, states.iter().map(|&state| Sensor { state, gain: 1.0, r }).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn sensor(&self, i: usize) -> &Sensor {
        &self.sensors[i]
    }

    pub fn measured_states(&self) -> Vec<usize> {
        self.sensors.iter().map(|s| s.state).collect()
    }

    /// Dense `N × n` output matrix.
    pub fn c_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.len(), self.n);
        for (i, s) in self.sensors.iter().enumerate() {
            c[(i, s.state)] = s.gain;
        }
        c
    }

    /// Largest absolute row gain.
    pub fn c_max(&self) -> f64 {
        self.sensors.iter().map(|s| s.gain.abs()).fold(0.0, f64::max)
    }

    /// Largest noise variance.
    pub fn r_max(&self) -> f64 {
        self.sensors.iter().map(|s| s.r).fold(0.0, f64::max)
    }

    pub fn r_diag(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.sensors.iter().map(|s| s.r))
    }
}

pub fn measure(
    mm: &MeasurementModel,
    x: &DVector<f64>,
    noise: &DVector<f64>,
    fault: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("state", mm.n(), x.len())?;
    check_dim("measurement noise", mm.len(), noise.len())?;
    check_dim("fault", mm.len(), fault.len())?;
    Ok(DVector::from_iterator(
        mm.len(),
        mm.sensors()
            .iter()
            .enumerate()
            .map(|(i, s)| s.gain * x[s.state] + noise[i] + fault[i]),
    ))
}

/// Zero-mean Gaussian vector of length `dim` with the given covariance.
pub fn sample_noise<R: Rng + ?Sized>(cov: &Covariance, dim: usize, rng: &mut R) -> Result<DVector<f64>> {
    cov.validate(dim)?;
    match cov {
        Covariance::Scalar(q) => {
            if *q == 0.0 {
                return Ok(DVector::zeros(dim));
            }
            let sd = q.sqrt();
            Ok(DVector::from_fn(dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal)))
        }
        Covariance::Matrix(_) => {
            let m = cov.to_matrix(dim)?;
            let eig = ((&m + m.transpose()) * 0.5).symmetric_eigen();
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let scaled = DVector::from_fn(dim, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
            Ok(&eig.eigenvectors * scaled)
        }
    }
}

/// Per-sensor noise with variances `r_i`, one standard normal draw per sensor.
pub fn sample_measurement_noise<R: Rng + ?Sized>(mm: &MeasurementModel, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(
        mm.len(),
        mm.sensors().iter().map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            s.r.sqrt() * z
        }),
    )
}

/// A constant bias on one sensor over `onset ≤ k < offset` (open-ended when
/// `offset` is `None`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultInterval {
    pub sensor: usize,
    pub onset: usize,
    pub offset: Option<usize>,
    pub bias: f64,
}

impl FaultInterval {
    pub fn is_active(&self, k: usize) -> bool {
        k >= self.onset && self.offset.is_none_or(|off| k < off)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultProfile {
    intervals: Vec<FaultInterval>,
}

impl FaultProfile {
    pub fn none() -> Self {
        Self::default()
    }

    /// Rejects empty intervals and overlaps on the same sensor.
    pub fn new(intervals: Vec<FaultInterval>) -> Result<Self> {
        for iv in &intervals {
            if let Some(off) = iv.offset {
                if off <= iv.onset {
                    return Err(Error::InvalidInput(format!(
                        "fault interval on sensor {} ends at {off} before it starts at {}",
                        iv.sensor, iv.onset
                    )));
                }
            }
        }
        for (a_idx, a) in intervals.iter().enumerate() {
            for b in &intervals[a_idx + 1..] {
                if a.sensor != b.sensor {
                    continue;
                }
                let a_end = a.offset.unwrap_or(usize::MAX);
                let b_end = b.offset.unwrap_or(usize::MAX);
                if a.onset < b_end && b.onset < a_end {
                    return Err(Error::InvalidInput(format!(
                        "overlapping fault intervals on sensor {}",
                        a.sensor
                    )));
                }
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[FaultInterval] {
        &self.intervals
    }

    pub fn max_sensor(&self) -> Option<usize> {
        self.intervals.iter().map(|iv| iv.sensor).max()
    }

    /// Fault vector `f_k` over `n_sensors` sensors.
    pub fn evaluate(&self, k: usize, n_sensors: usize) -> DVector<f64> {
        let mut f = DVector::zeros(n_sensors);
        for iv in &self.intervals {
            if iv.sensor < n_sensors && iv.is_active(k) {
                f[iv.sensor] += iv.bias;
            }
        }
        f
    }

    /// Onset of the first interval on `sensor`, if any.
    pub fn onset(&self, sensor: usize) -> Option<usize> {
        self.intervals.iter().filter(|iv| iv.sensor == sensor).map(|iv| iv.onset).min()
    }

    /// Re-indexes sensors through `map`; intervals whose sensor maps to `None` are dropped.
    pub fn remap(&self, map: impl Fn(usize) -> Option<usize>) -> Self {
        Self {
            intervals: self
                .intervals
                .iter()
                .filter_map(|iv| map(iv.sensor).map(|sensor| FaultInterval { sensor, ..*iv }))
                .collect(),
        }
    }
}
