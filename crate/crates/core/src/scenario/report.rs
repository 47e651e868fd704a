//! Artifact files for a scenario run, and re-analysis of stored traces.
//!
//! All sensor and state labels written here are 1-based.
//!
//! | file | columns / content |
//! |------|-------------------|
//! | `residuals.csv` | `k,sensor,residual,squared_error,msee` |
//! | `fdi.csv` | `k,sensor,residual,t68,t95,t99,level` |
//! | `msee.csv` | `k,msee` |
//! | `recovery_*.csv` | same columns, continuation steps only |
//! | `verdicts.json`, `thresholds.json`, `gain.json`, `system.json`, `scc.json`, `report.json` | summaries |
//! | `timings.json` | wall-clock timings (not hashed) |
//! | `manifest.json` | seed, config hash, gain method, SHA-256 of every other file |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScenarioConfig, ScenarioRun};
use crate::error::{Error, Result};
use crate::estimator::FilterRun;
use crate::fdi::{detect_and_isolate, exceedance_rates, FdiConfig, FdiReport, Level, ThresholdSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub system_seed: Option<u64>,
    pub config_hash: String,
    pub gain_method: String,
    pub horizon: usize,
    pub fdi: FdiConfig,
    pub estimator_init: String,
    pub replacement_init: String,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictOut {
    pub sensor: usize,
    pub level: Option<u32>,
    pub first_crossing: BTreeMap<String, Option<usize>>,
    pub isolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictsOut {
    pub decision_level: u32,
    pub isolated: Vec<usize>,
    pub verdicts: Vec<VerdictOut>,
}

pub fn verdicts_out(fdi: &FdiReport) -> VerdictsOut {
    VerdictsOut {
        decision_level: fdi.config.decision_level.percent(),
        isolated: fdi.isolated.iter().map(|s| s + 1).collect(),
        verdicts: fdi
            .verdicts
            .iter()
            .map(|v| VerdictOut {
                sensor: v.sensor + 1,
                level: v.level.map(Level::percent),
                first_crossing: Level::ALL.iter().map(|l| (l.percent().to_string(), v.crossing(*l))).collect(),
                isolated: v.isolated,
            })
            .collect(),
    }
}

fn level_label(r: f64, t: &ThresholdSet) -> &'static str {
    if r > t.t99 {
        "99"
    } else if r > t.t95 {
        "95"
    } else if r > t.t68 {
        "68"
    } else {
        ""
    }
}

/// `first_k` is the step label of the first recorded step.
fn write_series(dir: &Path, prefix: &str, run: &FilterRun, thresholds: &ThresholdSet, first_k: usize) -> Result<Vec<String>> {
    let res_name = format!("{prefix}residuals.csv");
    let fdi_name = format!("{prefix}fdi.csv");
    let msee_name = format!("{prefix}msee.csv");
    let mut res = csv::Writer::from_path(dir.join(&res_name))?;
    let mut fdi = csv::Writer::from_path(dir.join(&fdi_name))?;
    let mut msee = csv::Writer::from_path(dir.join(&msee_name))?;
    res.write_record(["k", "sensor", "residual", "squared_error", "msee"])?;
    fdi.write_record(["k", "sensor", "residual", "t68", "t95", "t99", "level"])?;
    msee.write_record(["k", "msee"])?;
    for (idx, row) in run.residuals.iter().enumerate() {
        let k = (first_k + idx).to_string();
        let step_msee = run.trace.msee[idx + 1];
        for (i, r) in row.iter().enumerate() {
            let sq = run.trace.squared_errors[idx + 1][i];
            let sensor = (i + 1).to_string();
            res.write_record([k.as_str(), &sensor, &r.to_string(), &sq.to_string(), &step_msee.to_string()])?;
            fdi.write_record([
                k.as_str(),
                &sensor,
                &r.to_string(),
                &thresholds.t68.to_string(),
                &thresholds.t95.to_string(),
                &thresholds.t99.to_string(),
                level_label(*r, thresholds),
            ])?;
        }
        msee.write_record([k.as_str(), &step_msee.to_string()])?;
    }
    res.flush()?;
    fdi.flush()?;
    msee.flush()?;
    Ok(vec![res_name, fdi_name, msee_name])
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(name.to_string())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes every artifact of `out` into `dir` and returns the manifest.
pub fn emit_reports(out: &ScenarioRun, cfg: &ScenarioConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let rep = &out.report;
    let mut names = write_series(dir, "", &out.run, &rep.thresholds, 1)?;
    if let (Some(run), Some(phase)) = (&out.recovery_run, &rep.recovery) {
        names.extend(write_series(dir, "recovery_", run, &phase.thresholds, out.recovery_start)?);
        names.push(write_json(dir, "recovery_verdicts.json", &verdicts_out(&phase.fdi))?);
    }
    names.push(write_json(dir, "verdicts.json", &verdicts_out(&rep.fdi))?);
    names.push(write_json(dir, "thresholds.json", &rep.thresholds)?);
    names.push(write_json(dir, "gain.json", &rep.gain)?);
    names.push(write_json(dir, "system.json", &out.instance.sys.to_json())?);
    names.push(write_json(dir, "scc.json", &rep.scc)?);
    let mut report_value = serde_json::to_value(rep)?;
    if let Some(obj) = report_value.as_object_mut() {
        obj.remove("timings");
    }
    names.push(write_json(dir, "report.json", &report_value)?);
    write_json(dir, "timings.json", &rep.timings)?;

    let files = names
        .into_iter()
        .map(|name| Ok(FileEntry { sha256: sha256_file(&dir.join(&name))?, name }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: cfg.seed,
        system_seed: rep.system_seed,
        config_hash: rep.config_hash.clone(),
        gain_method: format!("{:?}", rep.gain.method).to_lowercase(),
        horizon: cfg.horizon,
        fdi: cfg.fdi_config(),
        estimator_init: "zero".into(),
        replacement_init: "neighbor_average".into(),
        files,
    };
    write_json(dir, "manifest.json", &manifest)?;
    Ok(manifest)
}

/// Re-check every hashed file against the manifest. Returns the names that differ.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        if sha256_file(&dir.join(&f.name))? != f.sha256 {
            bad.push(f.name.clone());
        }
    }
    Ok(bad)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Analysis {
    pub steps: usize,
    pub sensors: usize,
    pub exceedance: BTreeMap<String, f64>,
    pub samples: usize,
    pub verdicts: VerdictsOut,
}

#[derive(Debug, Deserialize)]
struct ResidualRow {
    k: usize,
    sensor: usize,
    residual: f64,
}

/// Loads `residuals.csv` as `rows[k − first_k][sensor − 1]`.
pub fn load_residuals(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut by_step: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ResidualRow = row?;
        if row.sensor == 0 {
            return Err(Error::InvalidInput("sensor labels are 1-based".into()));
        }
        by_step.entry(row.k).or_default().push((row.sensor - 1, row.residual));
    }
    by_step
        .into_values()
        .map(|mut cells| {
            cells.sort_by_key(|c| c.0);
            if cells.iter().enumerate().any(|(i, c)| c.0 != i) {
                return Err(Error::InvalidInput("residual rows skip a sensor".into()));
            }
            Ok(cells.into_iter().map(|c| c.1).collect())
        })
        .collect()
}

/// Re-runs detection on the stored residuals and thresholds of a run directory.
pub fn analyze(dir: &Path, cfg: Option<FdiConfig>) -> Result<Analysis> {
    let residuals = load_residuals(&dir.join("residuals.csv"))?;
    let thresholds: ThresholdSet = serde_json::from_str(&fs::read_to_string(dir.join("thresholds.json"))?)?;
    let cfg = match cfg {
        Some(c) => c,
        None => {
            let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
            manifest.fdi
        }
    };
    let report = detect_and_isolate(&residuals, &thresholds, &cfg);
    let (rates, samples) = exceedance_rates(&residuals, &thresholds, cfg.burn_in);
    Ok(Analysis {
        steps: residuals.len(),
        sensors: residuals.first().map_or(0, Vec::len),
        exceedance: Level::ALL.iter().map(|l| (l.percent().to_string(), rates[*l as usize])).collect(),
        samples,
        verdicts: verdicts_out(&report),
    })
}
