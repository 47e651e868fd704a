//! End-to-end scenario pipeline: realize, analyse, design, simulate, detect, recover.

pub mod config;
pub mod recovery;
pub mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::digraph::{build_digraph, scc_decompose, SccDecomposition, SccReport};
use crate::error::Result;
use crate::estimator::{run_simulation, FilterRun, LocalGains, Simulation};
use crate::fdi::{compute_thresholds, detect_and_isolate, FdiReport, ThresholdSet};
use crate::gain::{design_gain, GainDesignProblem, GainJson, GainResult};
use crate::network::{build_row_stochastic, SensorNetwork};
use crate::observability::{networked_observability, plant_observability, ObservabilityReport};
use crate::system::{realize_system, Covariance, MeasurementModel, SystemModel};

pub use config::ScenarioConfig;
pub use recovery::{plan_recovery, recover, Recovery, RecoveryAction};

/// Static instance shared by every phase of a scenario.
#[derive(Clone, Debug)]
pub struct Instance {
    pub sys: SystemModel,
    pub mm: MeasurementModel,
    pub net: SensorNetwork,
    pub dec: SccDecomposition,
}

/// Builds the plant, sensors, network and SCC structure from a config.
pub fn build_instance(cfg: &ScenarioConfig) -> Result<Instance> {
    let pattern = cfg.validate().map_err(|e| e.at_stage("config"))?;
    let sys = realize_system(&pattern, &cfg.system.weights, cfg.system.target_rho, cfg.seed)
        .and_then(|s| s.with_q(Covariance::Scalar(cfg.system.q)))
        .map_err(|e| e.at_stage("realize"))?;
    let mm = cfg.measurement_model(pattern.n()).map_err(|e| e.at_stage("sensors"))?;
    let net = build_row_stochastic(mm.len(), &cfg.edges(), cfg.network.rule, cfg.seed).map_err(|e| e.at_stage("network"))?;
    let dec = scc_decompose(&build_digraph(&pattern));
    Ok(Instance { sys, mm, net, dec })
}

/// Gain design (cone-complementarity, then fallback) for one sensor set.
pub fn design_for(cfg: &ScenarioConfig, sys: &SystemModel, mm: &MeasurementModel, net: &SensorNetwork) -> Result<GainResult> {
    let mut problem = GainDesignProblem::new(net, sys, mm)?;
    problem.eps = cfg.gain.eps;
    problem.max_iter = cfg.gain.max_iter;
    design_gain(&problem, cfg.gain.fallback_budget, cfg.seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityPair {
    pub plant: ObservabilityReport,
    pub networked: ObservabilityReport,
}

fn observability(sys: &SystemModel, mm: &MeasurementModel, net: &SensorNetwork) -> Result<ObservabilityPair> {
    Ok(ObservabilityPair { plant: plant_observability(sys, mm)?, networked: networked_observability(net, sys, mm)? })
}

/// Result of `check`: structure, observability and gain only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub system_seed: Option<u64>,
    pub scc: SccReport,
    pub observability: ObservabilityPair,
    pub gain: GainJson,
    pub thresholds: ThresholdSet,
}

pub fn run_check(cfg: &ScenarioConfig) -> Result<CheckReport> {
    let inst = build_instance(cfg)?;
    let obs = observability(&inst.sys, &inst.mm, &inst.net).map_err(|e| e.at_stage("observability"))?;
    let gain = design_for(cfg, &inst.sys, &inst.mm, &inst.net).map_err(|e| e.at_stage("gain"))?;
    let thresholds = compute_thresholds(&gain, &inst.mm, &inst.sys.q, cfg.thresholds.mode).map_err(|e| e.at_stage("thresholds"))?;
    Ok(CheckReport {
        system_seed: inst.sys.seed,
        scc: inst.dec.report(),
        observability: obs,
        gain: gain.to_json(),
        thresholds,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryPhase {
    pub actions: Vec<RecoveryAction>,
    pub degraded: bool,
    pub measured_states: Vec<usize>,
    pub observability: ObservabilityPair,
    pub gain: GainJson,
    pub thresholds: ThresholdSet,
    pub fdi: FdiReport,
    pub max_msee: f64,
    pub median_msee: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub setup_s: f64,
    pub gain_s: f64,
    pub simulate_s: f64,
    pub recovery_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub system_seed: Option<u64>,
    pub config_hash: String,
    pub scc: SccReport,
    pub observability: ObservabilityPair,
    pub gain: GainJson,
    pub thresholds: ThresholdSet,
    pub fdi: FdiReport,
    pub max_msee: f64,
    pub recovery: Option<RecoveryPhase>,
    pub timings: Timings,
}

/// Report plus the raw series needed to write artifacts.
#[derive(Clone, Debug)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub instance: Instance,
    pub run: FilterRun,
    pub recovery_run: Option<FilterRun>,
    /// First step index of the continuation run.
    pub recovery_start: usize,
}

/// Maximum MSEE over steps `burn_in..`.
pub fn max_msee_after(msee: &[f64], burn_in: usize) -> f64 {
    msee.iter().skip(burn_in).cloned().fold(0.0, f64::max)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let t_total = Instant::now();
    let inst = build_instance(cfg)?;
    let config_hash = cfg.hash().map_err(|e| e.at_stage("config"))?;
    let obs = observability(&inst.sys, &inst.mm, &inst.net).map_err(|e| e.at_stage("observability"))?;
    let setup_s = t_total.elapsed().as_secs_f64();

    let t = Instant::now();
    let gain = design_for(cfg, &inst.sys, &inst.mm, &inst.net).map_err(|e| e.at_stage("gain"))?;
    let thresholds = compute_thresholds(&gain, &inst.mm, &inst.sys.q, cfg.thresholds.mode).map_err(|e| e.at_stage("thresholds"))?;
    let gain_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let faults = cfg.fault_profile().map_err(|e| e.at_stage("config"))?;
    let gains = LocalGains::from_result(&gain, inst.sys.n());
    let mut sim = Simulation::new(&inst.sys, &inst.mm, &inst.net, &gains, &faults, cfg.seed).map_err(|e| e.at_stage("simulate"))?;
    let run = step_and_record(&mut sim, cfg.horizon).map_err(|e| e.at_stage("simulate"))?;
    let fdi_cfg = cfg.fdi_config();
    let fdi = detect_and_isolate(&run.residuals, &thresholds, &fdi_cfg);
    let max_msee = max_msee_after(&run.trace.msee, fdi_cfg.burn_in);
    let simulate_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut recovery_phase = None;
    let mut recovery_run = None;
    if cfg.recovery.enabled && !fdi.isolated.is_empty() {
        let plan = plan_recovery(&fdi.isolated, &inst.dec, &inst.mm, &inst.net, cfg.network.rule, cfg.seed)
            .map_err(|e| e.at_stage("recovery"))?;
        let post_obs = observability(&inst.sys, &plan.mm, &plan.net).map_err(|e| e.at_stage("recovery"))?;
        let new_gain = design_for(cfg, &inst.sys, &plan.mm, &plan.net).map_err(|e| e.at_stage("recovery gain"))?;
        let new_thresholds =
            compute_thresholds(&new_gain, &plan.mm, &inst.sys.q, cfg.thresholds.mode).map_err(|e| e.at_stage("recovery thresholds"))?;
        let replaced_old: Vec<usize> = plan.replaced.iter().map(|&j| plan.origin[j]).collect();
        let new_faults = faults.remap(|old| {
            if replaced_old.contains(&old) {
                None
            } else {
                plan.origin.iter().position(|&o| o == old)
            }
        });
        let estimates = plan.initial_estimates(sim.deviations());
        sim.reconfigure(
            plan.mm.clone(),
            plan.net.clone(),
            LocalGains::from_result(&new_gain, inst.sys.n()),
            new_faults,
            estimates,
        )
        .map_err(|e| e.at_stage("recovery"))?;
        let cont = step_and_record(&mut sim, cfg.recovery.continuation).map_err(|e| e.at_stage("recovery simulate"))?;
        let cont_fdi = detect_and_isolate(&cont.residuals, &new_thresholds, &fdi_cfg);
        let tail: Vec<f64> = cont.trace.msee.iter().skip(fdi_cfg.burn_in).cloned().collect();
        recovery_phase = Some(RecoveryPhase {
            actions: plan.actions.clone(),
            degraded: plan.degraded,
            measured_states: plan.mm.measured_states(),
            observability: post_obs,
            gain: new_gain.to_json(),
            thresholds: new_thresholds,
            fdi: cont_fdi,
            max_msee: tail.iter().cloned().fold(0.0, f64::max),
            median_msee: median(&tail),
        });
        recovery_run = Some(cont);
    }
    let recovery_s = t.elapsed().as_secs_f64();

    let report = ScenarioReport {
        seed: cfg.seed,
        system_seed: inst.sys.seed,
        config_hash,
        scc: inst.dec.report(),
        observability: obs,
        gain: gain.to_json(),
        thresholds,
        fdi,
        max_msee,
        recovery: recovery_phase,
        timings: Timings { setup_s, gain_s, simulate_s, recovery_s, total_s: t_total.elapsed().as_secs_f64() },
    };
    Ok(ScenarioRun { report, instance: inst, run, recovery_run, recovery_start: cfg.horizon + 1 })
}

/// Like [`run_simulation`] but on a borrowed simulation so it can continue afterwards.
fn step_and_record(sim: &mut Simulation, steps: usize) -> Result<FilterRun> {
    let n = sim.state().len();
    let mut run = FilterRun::default();
    run.trace.push(sim.collective_error(), n);
    let before = sim.exchanges();
    for _ in 0..steps {
        let rec = sim.step()?;
        run.record(rec, sim.collective_error(), n);
    }
    run.exchanges = sim.exchanges() - before;
    Ok(run)
}

/// Runs a fresh simulation for an already designed gain; used by sweeps and tests.
pub fn simulate(inst: &Instance, gain: &GainResult, faults: &crate::system::FaultProfile, steps: usize, seed: u64) -> Result<FilterRun> {
    let gains = LocalGains::from_result(gain, inst.sys.n());
    run_simulation(Simulation::new(&inst.sys, &inst.mm, &inst.net, &gains, faults, seed)?, steps)
}

/// One row of a Monte Carlo sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub gain_method: String,
    pub rho: f64,
    pub b: f64,
    pub phi: f64,
    pub isolated: String,
    pub max_msee: f64,
    pub recovered: bool,
}

pub fn sweep(cfg: &ScenarioConfig, seeds: std::ops::RangeInclusive<u64>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let out = run_scenario(&c)?;
        let r = &out.report;
        rows.push(SweepRow {
            seed,
            gain_method: format!("{:?}", r.gain.method).to_lowercase(),
            rho: r.gain.rho,
            b: r.gain.b,
            phi: r.thresholds.phi,
            isolated: r.fdi.isolated.iter().map(|s| (s + 1).to_string()).collect::<Vec<_>>().join(" "),
            max_msee: r.max_msee,
            recovered: r.recovery.as_ref().is_some_and(|p| p.observability.networked.observable),
        });
    }
    Ok(rows)
}
