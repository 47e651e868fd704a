//! Scenario configuration (TOML). Sensor and state indices are 1-based here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fdi::{FdiConfig, Level, ThresholdMode};
use crate::network::ConsensusRule;
use crate::system::{FaultInterval, FaultProfile, MeasurementModel, Sensor, StructuredMatrix, WeightRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon: usize,
    pub system: SystemSection,
    pub sensors: Vec<SensorSection>,
    pub network: NetworkSection,
    #[serde(default)]
    pub gain: GainSection,
    #[serde(default)]
    pub thresholds: ThresholdSection,
    #[serde(default)]
    pub fdi: FdiSection,
    #[serde(default)]
    pub faults: Vec<FaultSection>,
    #[serde(default)]
    pub recovery: RecoverySection,
    /// Directory that relative paths resolve against; set by [`ScenarioConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Path to a grid file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_file: Option<String>,
    /// Inline grid, used when no file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub target_rho: f64,
    pub q: f64,
    #[serde(default)]
    pub weights: WeightRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSection {
    pub state: usize,
    #[serde(default = "one")]
    pub gain: f64,
    pub r: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `[from, to]`: `from` sends its estimate to `to`.
    pub edges: Vec<[usize; 2]>,
    /// Adds the reverse of every edge.
    #[serde(default)]
    pub undirected: bool,
    #[serde(default)]
    pub rule: ConsensusRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub eps: f64,
    pub max_iter: usize,
    pub fallback_budget: usize,
}

impl Default for GainSection {
    fn default() -> Self {
        Self { eps: 1e-3, max_iter: 200, fallback_budget: 5000 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub mode: ThresholdMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdiSection {
    pub burn_in: usize,
    pub persistence: usize,
    /// 68, 95 or 99.
    pub decision_level: u32,
}

impl Default for FdiSection {
    fn default() -> Self {
        Self { burn_in: 10, persistence: 1, decision_level: 95 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub sensor: usize,
    pub onset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    pub bias: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverySection {
    pub enabled: bool,
    /// Steps simulated after the sensor swap.
    pub continuation: usize,
}

impl Default for RecoverySection {
    fn default() -> Self {
        Self { enabled: true, continuation: 500 }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    /// SHA-256 of the canonical serialization plus the pattern grid.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        h.update(self.pattern()?.to_grid().as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn pattern(&self) -> Result<StructuredMatrix> {
        match (&self.system.pattern_file, &self.system.pattern) {
            (Some(file), None) => {
                let path = self.base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| bad(format!("cannot read pattern {}: {e}", path.display())))?;
                StructuredMatrix::parse_grid(&text)
            }
            (None, Some(grid)) => StructuredMatrix::parse_grid(grid),
            _ => Err(bad("exactly one of system.pattern_file and system.pattern must be set")),
        }
    }

    pub fn validate(&self) -> Result<StructuredMatrix> {
        let pattern = self.pattern()?;
        let n = pattern.n();
        let big_n = self.sensors.len();
        if big_n == 0 {
            return Err(bad("at least one sensor is required"));
        }
        if !(self.system.target_rho > 0.0) {
            return Err(bad("system.target_rho must be positive"));
        }
        if !(self.system.q >= 0.0) {
            return Err(bad("system.q must be non-negative"));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if s.state == 0 || s.state > n {
                return Err(bad(format!("sensor {} measures state {} outside 1..={n}", i + 1, s.state)));
            }
        }
        for e in &self.network.edges {
            if e.iter().any(|&v| v == 0 || v > big_n) {
                return Err(bad(format!("network edge {e:?} outside 1..={big_n}")));
            }
        }
        for f in &self.faults {
            if f.sensor == 0 || f.sensor > big_n {
                return Err(bad(format!("fault on sensor {} outside 1..={big_n}", f.sensor)));
            }
        }
        if self.horizon <= self.fdi.burn_in {
            return Err(bad(format!("horizon {} must exceed burn-in {}", self.horizon, self.fdi.burn_in)));
        }
        if Level::from_percent(self.fdi.decision_level).is_none() {
            return Err(bad("fdi.decision_level must be 68, 95 or 99"));
        }
        if !(self.gain.eps > 0.0) {
            return Err(bad("gain.eps must be positive"));
        }
        self.measurement_model(n)?;
        self.fault_profile()?;
        Ok(pattern)
    }

    pub fn measurement_model(&self, n: usize) -> Result<MeasurementModel> {
        MeasurementModel::new(
            n,
            self.sensors
                .iter()
                .map(|s| Sensor { state: s.state.wrapping_sub(1), gain: s.gain, r: s.r })
                .collect(),
        )
    }

    /// Zero-based directed edges, with reverses when `undirected` is set.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &[a, b] in &self.network.edges {
            out.push((a - 1, b - 1));
            if self.network.undirected {
                out.push((b - 1, a - 1));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn fault_profile(&self) -> Result<FaultProfile> {
        FaultProfile::new(
            self.faults
                .iter()
                .map(|f| FaultInterval { sensor: f.sensor.wrapping_sub(1), onset: f.onset, offset: f.offset, bias: f.bias })
                .collect(),
        )
    }

    pub fn fdi_config(&self) -> FdiConfig {
        FdiConfig {
            burn_in: self.fdi.burn_in,
            persistence: self.fdi.persistence,
            decision_level: Level::from_percent(self.fdi.decision_level).unwrap_or(Level::L95),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
horizon = 40

[system]
pattern = """
**
0*
"""
target_rho = 1.1
q = 0.01

[[sensors]]
state = 2
r = 0.01

[network]
edges = []
"#;

    #[test]
    fn parse_defaults_and_round_trip() {
        let cfg = ScenarioConfig::parse(SMALL).unwrap();
        assert_eq!(cfg.fdi.burn_in, 10);
        assert_eq!(cfg.sensors[0].gain, 1.0);
        assert!(cfg.recovery.enabled);
        let back = ScenarioConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range_indices() {
        let mut cfg = ScenarioConfig::parse(SMALL).unwrap();
        cfg.sensors[0].state = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::parse(SMALL).unwrap();
        cfg.horizon = 5;
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::parse("seed = 1\nbogus = 2").is_err());
    }
}
