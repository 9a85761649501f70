//! Monte-Carlo estimates: reproducibility and convergence.

mod common;

use common::conv;
use relu_precond::graph::{EdgeShape, NetworkGraph, OpKind};
use relu_precond::initplan::{plan, PlanOptions, Scheme};
use relu_precond::verify::{estimate_edge_moments, run_verification, sample_weights, EstimationConfig, Model, ProbeMode};

fn small_model() -> Model {
    let g = NetworkGraph::new(
        EdgeShape::square(3, 8),
        vec![conv(8, 2, 2), OpKind::BiasAdd, OpKind::Relu, conv(16, 2, 2), OpKind::Relu, OpKind::Dropout { p: 0.2 }, OpKind::Linear { out: 4 }],
    );
    Model::from_plan(&plan(&g, Scheme::Geometric { c: None }, &PlanOptions::default()).unwrap())
}

#[test]
fn same_seed_gives_identical_reports() {
    let m = small_model();
    let cfg = EstimationConfig { batch: 300, trials: 3, seed: 17, probes: ProbeMode::Gaussian { count: 2 } };
    let a = run_verification(&m, &cfg).unwrap();
    let b = run_verification(&m, &cfg).unwrap();
    assert_eq!(a, b);
    let c = run_verification(&m, &EstimationConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.layers, c.layers);
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let m = small_model();
    let cfg = EstimationConfig { batch: 300, trials: 3, seed: 7, probes: ProbeMode::Gaussian { count: 1 } };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_verification(&m, &cfg).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn trial_zero_uses_the_sampled_weights() {
    let m = small_model();
    let net = sample_weights(&m, 9).unwrap();
    let setup = relu_precond::verify::trial_setup(&m, &EstimationConfig { seed: 9, ..Default::default() }, 0).unwrap();
    assert_eq!(net, setup.net);
}

#[test]
fn report_entries_are_finite_and_positive() {
    let r = run_verification(&small_model(), &EstimationConfig { batch: 64, trials: 2, ..Default::default() }).unwrap();
    for l in &r.layers {
        for v in [l.nu_hat, l.g_hat, l.gamma_theory, l.gamma_analytic, l.ratio_nu, l.ratio_g] {
            assert!(v.is_finite() && v > 0.0, "{l:?}");
        }
    }
    for e in &r.edges {
        assert!(e.fwd.is_finite() && e.bwd.is_finite() && e.fwd > 0.0 && e.bwd > 0.0, "{e:?}");
    }
}

fn quartiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.25), q(0.5), q(0.75))
}

#[test]
fn nu_hat_concentrates_around_gamma_as_the_budget_grows() {
    let m = small_model();
    let mut iqrs = Vec::new();
    for (batch, trials) in [(16, 1), (32, 2), (64, 4), (128, 8)] {
        let ratios: Vec<f64> = (0..16)
            .flat_map(|seed| {
                let cfg = EstimationConfig { batch, trials, seed, probes: ProbeMode::Gaussian { count: 1 } };
                run_verification(&m, &cfg).unwrap().layers.into_iter().map(|l| l.nu_hat / l.gamma_analytic)
            })
            .collect();
        let (q1, median, q3) = quartiles(ratios);
        iqrs.push(q3 - q1);
        if batch == 128 {
            assert!((0.8..1.25).contains(&median), "median {median}");
        }
    }
    assert!(iqrs.windows(2).all(|w| w[1] < w[0]), "{iqrs:?}");
}

#[test]
fn lenet_forward_moments_track_the_analysis() {
    let g = common::lenet();
    let m = Model::from_plan(&plan(&g, Scheme::Geometric { c: None }, &PlanOptions::default()).unwrap());
    let theory = run_verification(&m, &EstimationConfig { batch: 1, trials: 1, ..Default::default() }).unwrap().edges;
    let cfg = EstimationConfig { batch: 1024, trials: 10, seed: 0, probes: ProbeMode::Gaussian { count: 1 } };
    let measured = estimate_edge_moments(&m, &cfg).unwrap();
    for ((pos, e), t) in measured.flatten().into_iter().zip(&theory) {
        let r = e.fwd / t.fwd_theory;
        assert!((r - 1.0).abs() < 0.2, "{pos}: {r}");
    }
}
