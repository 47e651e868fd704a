//! Classical and networked observability rank tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::linalg::{kron, RANK_REL_TOL};
use crate::network::SensorNetwork;
use crate::system::{MeasurementModel, SystemModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub dim: usize,
    pub rank: usize,
    pub observable: bool,
    pub smallest_singular_value: f64,
    /// Set only for networked tests: whether the consensus graph is strongly connected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network_strongly_connected: Option<bool>,
}

/// `(D_C, D̄_C)`: block `i` of `D_C` is `C_iᵀC_i`, column block `i` of `D̄_C` is `C_iᵀ`.
pub fn build_output_blocks(mm: &MeasurementModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, big_n) = (mm.n(), mm.len());
    let mut dc = DMatrix::zeros(n * big_n, n * big_n);
    let mut dcb = DMatrix::zeros(n * big_n, big_n);
    for (i, s) in mm.sensors().iter().enumerate() {
        let p = i * n + s.state;
        dc[(p, p)] = s.gain * s.gain;
        dcb[(p, i)] = s.gain;
    }
    (dc, dcb)
}

/// Rank of `[H; HF; …; HF^{d−1}]` with a relative singular-value cut.
///
/// Blocks are rescaled to unit max-entry before stacking (a row scaling, so
/// rank-preserving), and the stack is kept compressed as `ΣVᵀ` of its SVD,
/// which has the same singular values as the full stack. The loop stops as
/// soon as the rank reaches `d`.
pub fn is_observable(f: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<ObservabilityReport> {
    check_dim("F columns", f.nrows(), f.ncols())?;
    check_dim("H columns", f.nrows(), h.ncols())?;
    let d = f.nrows();
    let mut acc = DMatrix::<f64>::zeros(0, d);
    let mut block = h.clone();
    let mut rank = 0;
    let mut smallest = 0.0;
    for _ in 0..d.max(1) {
        let scale = block.amax();
        if scale > 0.0 {
            block /= scale;
        }
        let stacked = stack_rows(&acc, &block);
        let svd = stacked.svd(false, true);
        let vt = svd.v_t.expect("requested right singular vectors");
        let sv = &svd.singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        rank = sv.iter().filter(|&&s| s > RANK_REL_TOL * smax && smax > 0.0).count();
        smallest = sv
            .iter()
            .cloned()
            .filter(|&s| s > RANK_REL_TOL * smax && smax > 0.0)
            .fold(f64::INFINITY, f64::min);
        acc = DMatrix::from_diagonal(&DVector::from_iterator(sv.len(), sv.iter().cloned())) * vt;
        if rank == d {
            break;
        }
        block = &block * f;
    }
    Ok(ObservabilityReport {
        dim: d,
        rank,
        observable: rank == d,
        smallest_singular_value: if rank == 0 { 0.0 } else { smallest },
        network_strongly_connected: None,
    })
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Observability of `(W⊗A, D_C)`, annotated with strong connectivity of the network.
pub fn networked_observability(net: &SensorNetwork, sys: &SystemModel, mm: &MeasurementModel) -> Result<ObservabilityReport> {
    check_dim("sensor count", net.len(), mm.len())?;
    check_dim("state dimension", sys.n(), mm.n())?;
    let f = kron(net.w(), &sys.a);
    let (dc, _) = build_output_blocks(mm);
    let mut report = is_observable(&f, &dc)?;
    report.network_strongly_connected = Some(net.is_strongly_connected());
    Ok(report)
}

/// Observability of `(A, C)`.
pub fn plant_observability(sys: &SystemModel, mm: &MeasurementModel) -> Result<ObservabilityReport> {
    is_observable(&sys.a, &mm.c_matrix())
}
