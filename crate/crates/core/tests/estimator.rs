use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use netfdi::estimator::{error_recursion_oracle, eta, run_filter, LocalGains};
use netfdi::gain::assemble_ahat;
use netfdi::network::{build_row_stochastic, cycle_edges, ConsensusRule};
use netfdi::observability::build_output_blocks;
use netfdi::system::{Covariance, FaultInterval, FaultProfile, MeasurementModel, Sensor, SystemModel};

struct Case {
    sys: SystemModel,
    mm: MeasurementModel,
    net: netfdi::network::SensorNetwork,
    gains: LocalGains,
    faults: FaultProfile,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..6);
    let sensors = rng.random_range(2..5);
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { rng.random_range(0.6..1.1) } else { rng.random_range(-0.3..0.3) });
    let sys = SystemModel::new(a, Covariance::Scalar(rng.random_range(0.01..0.1)))
        .unwrap()
        .with_x0(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .unwrap();
    let mm = MeasurementModel::new(
        n,
        (0..sensors)
            .map(|_| Sensor { state: rng.random_range(0..n), gain: rng.random_range(0.5..2.0), r: rng.random_range(0.01..0.1) })
            .collect(),
    )
    .unwrap();
    let net = build_row_stochastic(sensors, &cycle_edges(sensors), ConsensusRule::Random, seed).unwrap();
    let gains = LocalGains::new((0..sensors).map(|_| DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5))).collect());
    let faults = FaultProfile::new(vec![FaultInterval { sensor: 0, onset: 50, offset: Some(120), bias: 0.7 }]).unwrap();
    Case { sys, mm, net, gains, faults }
}

#[test]
fn filter_error_matches_recursion_oracle() {
    for seed in 0..12 {
        let c = random_case(seed);
        let run = run_filter(&c.sys, &c.mm, &c.net, &c.gains, &c.faults, 200, seed).unwrap();
        let k = c.gains.to_matrix(&c.mm);
        let (dc, dcb) = build_output_blocks(&c.mm);
        let ahat = assemble_ahat(c.net.w(), &c.sys.a, &k, &dc).unwrap();
        let oracle = error_recursion_oracle(
            &ahat,
            &k,
            &dc,
            &dcb,
            &run.process_noise,
            &run.measurement_noise,
            &run.faults,
            &run.trace.errors[0],
        )
        .unwrap();
        assert_eq!(oracle.len(), 201);
        for (step, (got, want)) in run.trace.errors.iter().zip(&oracle).enumerate() {
            let scale = want.amax().max(1.0);
            assert!((got - want).amax() <= 1e-9 * scale, "seed {seed} step {step}: {}", (got - want).amax());
        }
    }
}

#[test]
fn fault_only_noise_term_is_local() {
    let c = random_case(7);
    let n = c.sys.n();
    let k = c.gains.to_matrix(&c.mm);
    let (dc, dcb) = build_output_blocks(&c.mm);
    let sensors = c.mm.len();
    for i in 0..sensors {
        let mut f = DVector::zeros(sensors);
        f[i] = 1.3;
        let e = eta(&k, &dc, &dcb, &DVector::zeros(n), &DVector::zeros(sensors), &f);
        for (row, v) in e.iter().enumerate() {
            if row / n != i {
                assert_eq!(*v, 0.0);
            }
        }
        let expected = -(c.gains.col(i) * (c.mm.sensor(i).gain * 1.3));
        assert!((e.rows(i * n, n) - expected).amax() < 1e-14);
    }
}

#[test]
fn same_seed_same_trace() {
    let c = random_case(3);
    let a = run_filter(&c.sys, &c.mm, &c.net, &c.gains, &c.faults, 60, 9).unwrap();
    let b = run_filter(&c.sys, &c.mm, &c.net, &c.gains, &c.faults, 60, 9).unwrap();
    assert_eq!(a.residuals, b.residuals);
    assert_eq!(a.trace.msee, b.trace.msee);
    let other = run_filter(&c.sys, &c.mm, &c.net, &c.gains, &c.faults, 60, 10).unwrap();
    assert_ne!(a.residuals, other.residuals);
}

#[test]
fn one_exchange_per_step() {
    let c = random_case(4);
    let run = run_filter(&c.sys, &c.mm, &c.net, &c.gains, &FaultProfile::none(), 37, 0).unwrap();
    assert_eq!(run.exchanges, 37);
    assert_eq!(run.residuals.len(), 37);
    assert_eq!(run.trace.errors.len(), 38);
}
