use objret::embedstore::build_store;
use objret::probe::{
    collect_training_set, probe_objective, probe_params, soft_focal_loss, soft_focal_loss_logit, AnchorConfig,
    ObjectnessProbe,
};
use objret::recret::{generate_rec_tasks, prepare_rec_examples, rec_objective, TaskGenConfig, ToyScorer};
use objret::synthworld::{generate_corpus, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const POINTS: u64 = 10;

/// Worst relative error between the analytic gradient and central
/// differences, per component, with `floor` guarding near-zero components.
fn check_gradient(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64], floor: f64) -> f64 {
    let (_, g) = f(x);
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + STEP;
        let up = f(&p).0;
        p[i] = x[i] - STEP;
        let down = f(&p).0;
        p[i] = x[i];
        let fd = (up - down) / (2.0 * STEP);
        let denom = g[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((g[i] - fd).abs() / denom);
    }
    worst
}

#[test]
fn focal_loss_closed_form() {
    let v = soft_focal_loss(0.5f64, 1.0, 2.0).unwrap();
    assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((v - 0.173287).abs() < 5e-7);
    assert!(soft_focal_loss(0.0f64, 1.0, 2.0).is_err());
    assert!(soft_focal_loss(1.0f64, 1.0, 2.0).is_err());
    let (l, _) = soft_focal_loss_logit(0.0, 1.0, 2.0);
    assert!((l - v).abs() < 1e-15);
}

proptest! {
    #[test]
    fn logit_form_agrees_with_probability_form(z in -8.0..8.0f64, y in 0.0..=1.0f64, gamma in 0.0..3.0f64) {
        let p = 1.0 / (1.0 + (-z).exp());
        let (l, _) = soft_focal_loss_logit(z, y, gamma);
        prop_assert!((l - soft_focal_loss(p, y, gamma).unwrap()).abs() < 1e-10);
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn logit_derivative_matches_differences(z in -6.0..6.0f64, y in 0.0..=1.0f64, gamma in 0.0..3.0f64) {
        let (_, d) = soft_focal_loss_logit(z, y, gamma);
        let fd = (soft_focal_loss_logit(z + STEP, y, gamma).0 - soft_focal_loss_logit(z - STEP, y, gamma).0) / (2.0 * STEP);
        prop_assert!((d - fd).abs() <= 1e-7 * d.abs().max(fd.abs()).max(1e-2));
    }
}

#[test]
fn probe_gradient_matches_central_differences() {
    let corpus = generate_corpus(&WorldConfig::new(3, 16, 5)).unwrap();
    let data = collect_training_set(&corpus.scenes, &AnchorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for k in 0..POINTS {
        let mut x = probe_params(&ObjectnessProbe::init(16, k));
        for v in x.iter_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        let e = check_gradient(|p| probe_objective(p, &data, 2.0), &x, 1e-6);
        worst = worst.max(e);
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn scorer_gradient_matches_central_differences() {
    let corpus = generate_corpus(&WorldConfig::new(6, 8, 5)).unwrap();
    let store = build_store(&corpus, &ObjectnessProbe::init(8, 1), &AnchorConfig::default().with_k(6)).unwrap();
    let tasks = generate_rec_tasks(&corpus, &store, &corpus.scenes, &TaskGenConfig::new(8, 3)).unwrap();
    let (data, _, _) = prepare_rec_examples(&corpus, &store, &tasks, 0.5).unwrap();
    let hidden = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for k in 0..POINTS {
        let mut x = ToyScorer::init(8, hidden, k).params();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        let e = check_gradient(|p| rec_objective(p, 8, hidden, &data, 2.0), &x, 1e-6);
        worst = worst.max(e);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
