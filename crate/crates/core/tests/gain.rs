use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netfdi::gain::{cone_complementarity_design, fallback_gain_search, norm_lower_bound, GainDesignProblem, GainMethod};
use netfdi::linalg::spectral_norm;
use netfdi::network::{build_row_stochastic, cycle_edges, ConsensusRule};
use netfdi::system::{realize_system, Covariance, MeasurementModel, StructuredMatrix, WeightRule};

/// `ρ(M) < 1` iff powers decay; checked without any eigen-solver.
fn powers_decay(m: &DMatrix<f64>) -> bool {
    let mut p = m.clone();
    for _ in 0..10 {
        p = &p * &p;
        let s = p.amax();
        if !s.is_finite() || s > 1e12 {
            return false;
        }
    }
    // 1024th power
    p.amax() < 1e-2
}

fn chain_problem(seed: u64) -> GainDesignProblem {
    // 0 <-> 1 -> 2 <-> 3, both 2-cycles self-looped
    let pattern = StructuredMatrix::parse_grid("**00\n***0\n00**\n00**\n").unwrap();
    let sys = realize_system(&pattern, &WeightRule::default(), 1.1, seed)
        .unwrap()
        .with_q(Covariance::Scalar(0.01))
        .unwrap();
    let mm = MeasurementModel::unit(4, &[1, 3, 2], 0.01).unwrap();
    let net = build_row_stochastic(3, &cycle_edges(3), ConsensusRule::Uniform, seed).unwrap();
    GainDesignProblem::new(&net, &sys, &mm).unwrap()
}

#[test]
fn cone_complementarity_stabilizes_small_unstable_instance() {
    let p = chain_problem(5);
    let wa = p.kron_wa();
    assert!(!powers_decay(wa), "open loop should be unstable");
    let g = cone_complementarity_design(&p).unwrap();
    assert_eq!(g.method, GainMethod::Lmi);
    assert!(g.rho < 1.0);
    assert!(powers_decay(&g.ahat));
    for w in g.history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "trace objective increased: {:?}", g.history);
    }
    let target = 2.0 * p.dim() as f64;
    let last = *g.history.last().unwrap();
    assert!(last >= target * (1.0 - 1e-6), "objective {last} below its lower bound {target}");

    // Only the active column of each K^i may be nonzero.
    let n = p.n();
    for (i, s) in [1usize, 3, 2].iter().enumerate() {
        for r in 0..p.dim() {
            for c in 0..p.dim() {
                let active = r / n == i && c == i * n + s;
                if !active && r / n == i {
                    assert_eq!(g.k[(r, c)], 0.0);
                }
            }
        }
    }
    // Â = W⊗A − K D_C (W⊗A), rebuilt by hand.
    let rebuilt = wa - &g.k * p.dc() * wa;
    assert!((rebuilt - &g.ahat).amax() < 1e-12);
    assert!((spectral_norm(&g.ahat) - g.b).abs() < 1e-9);
}

#[test]
fn norm_floor_holds_for_designed_and_random_gains() {
    let p = chain_problem(5);
    let mm = MeasurementModel::unit(4, &[1, 3, 2], 0.01).unwrap();
    let sys_a = {
        let pattern = StructuredMatrix::parse_grid("**00\n***0\n00**\n00**\n").unwrap();
        realize_system(&pattern, &WeightRule::default(), 1.1, 5).unwrap().a
    };
    let floor = norm_lower_bound(&sys_a, &mm);
    assert!(floor > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let k: Vec<f64> = (0..p.dim()).map(|_| rand::Rng::random_range(&mut rng, -3.0..3.0)).collect();
        assert!(spectral_norm(&p.ahat(&k)) >= floor - 1e-12);
    }
    let g = cone_complementarity_design(&p).unwrap();
    assert!(g.b >= floor - 1e-9);
}

#[test]
fn fallback_search_finds_a_stabilizing_gain() {
    let p = chain_problem(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = fallback_gain_search(&p, 5000, &mut rng).unwrap();
    assert_eq!(g.method, GainMethod::Fallback);
    assert!(g.rho < 1.0 && powers_decay(&g.ahat));
}
