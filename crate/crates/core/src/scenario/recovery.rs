//! Observability recovery after sensor isolation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::digraph::{replacement_candidates_excluding, Replacement, SccDecomposition};
use crate::error::{Error, Result};
use crate::network::{build_row_stochastic, remove_node, repair_strong_connectivity, ConsensusRule, SensorNetwork};
use crate::system::{MeasurementModel, Sensor};

/// What happened to one isolated sensor. Indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    /// A new sensor takes the faulty one's slot and links but measures `to`.
    Replaced { sensor: usize, from: usize, to: usize },
    /// The sensor was dropped; `added_edges` restored strong connectivity.
    Removed { sensor: usize, state: usize, added_edges: Vec<(usize, usize)> },
    Unrecoverable { sensor: usize, state: usize },
}

#[derive(Clone, Debug)]
pub struct Recovery {
    pub mm: MeasurementModel,
    pub net: SensorNetwork,
    pub actions: Vec<RecoveryAction>,
    /// `origin[j]` is the old index of new sensor `j`.
    pub origin: Vec<usize>,
    /// New indices of replacement sensors.
    pub replaced: Vec<usize>,
    pub degraded: bool,
}

impl Recovery {
    /// Starting estimates for the new sensor set: carried over for kept
    /// sensors, the mean of the new neighbors' carried-over estimates for
    /// replacements. Affine, so it applies equally to estimates or to their
    /// deviations from the plant state.
    pub fn initial_estimates(&self, old: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let carried: Vec<DVector<f64>> = self.origin.iter().map(|&o| old[o].clone()).collect();
        (0..self.origin.len())
            .map(|j| {
                if !self.replaced.contains(&j) {
                    return carried[j].clone();
                }
                let nbrs: Vec<usize> = self.net.neighborhood(j).into_iter().filter(|&v| v != j).collect();
                if nbrs.is_empty() {
                    return carried[j].clone();
                }
                let mut acc = DVector::zeros(carried[j].len());
                for &v in &nbrs {
                    acc += &carried[v];
                }
                acc / nbrs.len() as f64
            })
            .collect()
    }
}

/// Applies the replacement rules to every isolated sensor, lowest index first.
///
/// Replacements pick the lowest-index candidate not already measured. Removals
/// drop the sensor and add edges until the network is strongly connected
/// again. Irreplaceable sensors stay in place and mark the result degraded.
pub fn plan_recovery(
    isolated: &[usize],
    dec: &SccDecomposition,
    mm: &MeasurementModel,
    net: &SensorNetwork,
    rule: ConsensusRule,
    seed: u64,
) -> Result<Recovery> {
    let mut isolated: Vec<usize> = isolated.to_vec();
    isolated.sort_unstable();
    isolated.dedup();
    if let Some(&bad) = isolated.iter().find(|&&s| s >= mm.len()) {
        return Err(Error::InvalidInput(format!("isolated sensor {bad} out of range")));
    }
    let mut sensors: Vec<Sensor> = mm.sensors().to_vec();
    let mut taken: Vec<usize> = mm
        .sensors()
        .iter()
        .enumerate()
        .filter(|(i, _)| !isolated.contains(i))
        .map(|(_, s)| s.state)
        .collect();
    let mut actions = Vec::new();
    let mut to_remove = Vec::new();
    let mut replaced = Vec::new();
    let mut degraded = false;

    for &s in &isolated {
        let state = mm.sensor(s).state;
        match replacement_candidates_excluding(dec, mm, &isolated, s) {
            Replacement::ReplaceWith(cands) => match cands.into_iter().find(|c| !taken.contains(c)) {
                Some(to) => {
                    sensors[s].state = to;
                    taken.push(to);
                    replaced.push(s);
                    actions.push(RecoveryAction::Replaced { sensor: s, from: state, to });
                }
                None => to_remove.push(s),
            },
            Replacement::RemovalSafe => to_remove.push(s),
            Replacement::Irreplaceable => {
                degraded = true;
                actions.push(RecoveryAction::Unrecoverable { sensor: s, state });
            }
        }
    }

    let mut links = net.links();
    let mut origin: Vec<usize> = (0..mm.len()).collect();
    // Highest index first so earlier indices stay valid.
    for &s in to_remove.iter().rev() {
        if origin.len() == 1 {
            return Err(Error::NetworkRepair);
        }
        links = remove_node(&links, s);
        origin.remove(s);
        let state = sensors.remove(s).state;
        actions.push(RecoveryAction::Removed { sensor: s, state, added_edges: Vec::new() });
    }
    let added = repair_strong_connectivity(origin.len(), &mut links)?;
    if let Some(RecoveryAction::Removed { added_edges, .. }) =
        actions.iter_mut().rev().find(|a| matches!(a, RecoveryAction::Removed { .. }))
    {
        *added_edges = added;
    }
    let replaced_new: Vec<usize> = replaced
        .iter()
        .filter_map(|&old| origin.iter().position(|&o| o == old))
        .collect();
    let new_mm = MeasurementModel::new(mm.n(), sensors)?;
    let new_net = build_row_stochastic(origin.len(), &links, rule, seed)?;
    Ok(Recovery { mm: new_mm, net: new_net, actions, origin, replaced: replaced_new, degraded })
}

/// Like [`plan_recovery`] but fails with [`Error::Unrecoverable`] on any
/// sensor whose measured state has no replacement.
pub fn recover(
    isolated: &[usize],
    dec: &SccDecomposition,
    mm: &MeasurementModel,
    net: &SensorNetwork,
    rule: ConsensusRule,
    seed: u64,
) -> Result<Recovery> {
    if isolated.is_empty() {
        return Err(Error::InvalidInput("nothing to recover: isolated set is empty".into()));
    }
    let plan = plan_recovery(isolated, dec, mm, net, rule, seed)?;
    if let Some(RecoveryAction::Unrecoverable { sensor, state }) =
        plan.actions.iter().find(|a| matches!(a, RecoveryAction::Unrecoverable { .. }))
    {
        return Err(Error::Unrecoverable { sensor: *sensor, state: *state });
    }
    Ok(plan)
}
