//! APGD against linear objectives, whose maximum over a box-clipped ball is
//! known in closed form.

mod common;

use common::*;
use proptest::prelude::*;
use robustsim::attacks::{apgd, attack_2afc, AttackConfig, AttackResult, ThreatModel};
use robustsim::bench::synth::{gen_2afc, SyntheticSpec};
use robustsim::encoders::Architecture;
use robustsim::{ImageBatch, Result};
use robustsim_autodiff::Tensor;

fn linear(g: Tensor) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> + Sync {
    move |x: &Tensor| Ok((x.dot(&g)?, g.clone()))
}

/// Best gain of `g . delta` with `|delta|_inf <= eps` and `x0 + delta` in
/// the unit box: every coordinate independently moves to its bound.
fn linf_optimum(x0: &Tensor, g: &Tensor, eps: f64) -> f64 {
    x0.data()
        .iter()
        .zip(g.data())
        .map(|(&x, &gi)| {
            let target = if gi >= 0.0 { (x + eps).min(1.0) } else { (x - eps).max(0.0) };
            gi * (target - x)
        })
        .sum()
}

fn check_feasible(res: &AttackResult, x0: &Tensor, threat: &ThreatModel) {
    let adv = res.adversarial.tensor();
    assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "left the unit box");
    let delta = adv.zip_map(x0, |a, b| a - b).unwrap();
    assert!(threat.measure(&delta) <= threat.epsilon + 1e-6, "norm {} > {}", threat.measure(&delta), threat.epsilon);
    assert!(res.best_trace.windows(2).all(|w| w[1] >= w[0]), "best-so-far trace decreased");
    assert!(res.best_objective >= res.initial_objective);
}

#[test]
fn linf_gain_reaches_the_analytic_optimum_inside_the_box() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let eps = 4.0 / 255.0 * (1 + seed % 4) as f64;
        let x0 = uniform(&mut r, &[1, 3, 32, 32], eps, 1.0 - eps);
        let g = uniform(&mut r, &[1, 3, 32, 32], -1.0, 1.0);
        let threat = ThreatModel::linf(eps);
        let res = apgd(&linear(g.clone()), &ImageBatch::new(x0.clone()).unwrap(), &threat, &AttackConfig::default()).unwrap();
        check_feasible(&res, &x0, &threat);
        let gain = res.best_objective - res.initial_objective;
        let analytic = eps * g.data().iter().map(|v| v.abs()).sum::<f64>();
        assert!(gain >= 0.99 * analytic, "seed {seed}: gain {gain} vs {analytic}");
    }
}

#[test]
fn linf_gain_with_an_active_box() {
    for seed in 0..20 {
        let mut r = rng(50 + seed);
        let eps = 16.0 / 255.0;
        let x0 = uniform(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
        let g = uniform(&mut r, &[1, 3, 16, 16], -1.0, 1.0);
        let threat = ThreatModel::linf(eps);
        let res = apgd(&linear(g.clone()), &ImageBatch::new(x0.clone()).unwrap(), &threat, &AttackConfig::default()).unwrap();
        check_feasible(&res, &x0, &threat);
        let gain = res.best_objective - res.initial_objective;
        assert!(gain >= 0.99 * linf_optimum(&x0, &g, eps), "seed {seed}");
    }
}

#[test]
fn l2_gain_reaches_eps_times_gradient_norm() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let eps = 0.3;
        // the ball stays inside the box when every coordinate is >= eps from the faces
        let x0 = uniform(&mut r, &[1, 3, 32, 32], eps, 1.0 - eps);
        let g = uniform(&mut r, &[1, 3, 32, 32], -1.0, 1.0);
        let threat = ThreatModel::l2(eps);
        let res = apgd(&linear(g.clone()), &ImageBatch::new(x0.clone()).unwrap(), &threat, &AttackConfig::default()).unwrap();
        check_feasible(&res, &x0, &threat);
        let gain = res.best_objective - res.initial_objective;
        assert!(gain >= 0.99 * eps * g.l2_norm(), "seed {seed}: {gain}");
    }
}

#[test]
fn random_start_and_momentum_keep_constraints() {
    let mut r = rng(7);
    let x0 = uniform(&mut r, &[2, 3, 8, 8], 0.0, 1.0);
    let g = uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    for threat in [ThreatModel::linf(8.0 / 255.0), ThreatModel::l2(1.0)] {
        let cfg = AttackConfig {
            random_start: true,
            seed: 3,
            ..AttackConfig::with_iterations(37)
        };
        let res = apgd(&linear(g.clone()), &ImageBatch::new(x0.clone()).unwrap(), &threat, &cfg).unwrap();
        check_feasible(&res, &x0, &threat);
        assert_eq!(res.trace.len(), res.best_trace.len());
    }
}

#[test]
fn encoder_attack_outputs_are_feasible() {
    let enc = encoder(Architecture::ConvNet, 5);
    let trip = gen_2afc(&SyntheticSpec::default(), 4, 9).unwrap();
    for threat in [ThreatModel::linf(4.0 / 255.0), "l2:0.5".parse().unwrap()] {
        for t in &trip {
            let out = attack_2afc(t, &enc, &threat, &AttackConfig::with_iterations(20)).unwrap();
            check_feasible(&out.result, &t.reference, &threat);
        }
    }
}

#[test]
fn zero_radius_returns_the_input() {
    let mut r = rng(1);
    let x0 = uniform(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let g = uniform(&mut r, &[1, 3, 8, 8], -1.0, 1.0);
    let res = apgd(&linear(g), &ImageBatch::new(x0.clone()).unwrap(), &ThreatModel::linf(0.0), &AttackConfig::default()).unwrap();
    assert_eq!(res.adversarial.tensor(), &x0);
}

#[test]
fn zero_iterations_is_a_config_error() {
    let x0 = ImageBatch::new(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let r = apgd(&linear(Tensor::zeros(&[1, 3, 4, 4])), &x0, &ThreatModel::linf(0.1), &AttackConfig::with_iterations(0));
    assert!(matches!(r, Err(robustsim::Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn feasibility_holds_for_any_radius(seed in 0u64..1000, eps in 0.0f64..0.3, l2 in any::<bool>(), iters in 1usize..40) {
        let mut r = rng(seed);
        let x0 = uniform(&mut r, &[1, 3, 6, 6], 0.0, 1.0);
        let g = uniform(&mut r, &[1, 3, 6, 6], -1.0, 1.0);
        let threat = if l2 { ThreatModel::l2(eps * 5.0) } else { ThreatModel::linf(eps) };
        let cfg = AttackConfig { random_start: seed % 2 == 0, seed, ..AttackConfig::with_iterations(iters) };
        let res = apgd(&linear(g), &ImageBatch::new(x0.clone()).unwrap(), &threat, &cfg).unwrap();
        check_feasible(&res, &x0, &threat);
    }
}
