use tttlab_core::closed_form::population_loss;
use tttlab_core::linalg::{random_orthonormal, seeded_rng};
use tttlab_core::montecarlo::{estimate_ttt_loss, nested_mc_population_loss};
use tttlab_core::theory::{predict_iso_pretrained, predict_zero_init};
use tttlab_core::{
    AttentionWeights, CovarianceModel, DenseMatrix, DenseVector, EtaPolicy, InitPolicy, Sampler, TaskInstance, TrialConfig,
};

fn iso(n: usize, d: usize, k: usize, trials: usize) -> TrialConfig {
    let mut cfg = TrialConfig::new(CovarianceModel::isotropic(d), TaskInstance::noiseless(DenseVector::filled(d, 1.0)).unwrap(), n, k);
    cfg.trials = trials;
    cfg
}

fn agrees(mc: f64, se: f64, theory: f64, rel: f64) -> bool {
    (mc - theory).abs() <= (3.0 * se).max(rel * theory.abs())
}

#[test]
fn pretrained_mc_tracks_refined_theory() {
    let cfg = iso(200, 400, 360, 2000);
    let est = estimate_ttt_loss(&cfg).unwrap();
    let th = predict_iso_pretrained(200, 400, 360, 400.0, 0.0).unwrap();
    assert!(agrees(est.mean, est.std_error, th.predicted_final_loss, 0.07), "{est:?} vs {th:?}");
}

#[test]
fn zero_init_mc_tracks_exact_theory() {
    let mut cfg = iso(200, 400, 360, 2000);
    cfg.init = InitPolicy::Zero;
    cfg.eta_policy = EtaPolicy::TheoryZero;
    let est = estimate_ttt_loss(&cfg).unwrap();
    let th = predict_zero_init(200, 400, 360, 400.0, 0.0).unwrap();
    assert!(agrees(est.mean, est.std_error, th.predicted_final_loss, 0.07), "{est:?} vs {th:?}");
}

#[test]
fn stderr_shrinks_like_inverse_sqrt_trials() {
    let a = estimate_ttt_loss(&iso(40, 60, 50, 500)).unwrap();
    let b = estimate_ttt_loss(&iso(40, 60, 50, 2000)).unwrap();
    let ratio = a.std_error / b.std_error;
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn theory_step_improves_by_half_the_prediction() {
    for (n, d, k) in [(100usize, 100usize, 100usize), (150, 100, 300)] {
        let cfg = iso(n, d, k, 2000);
        let est = estimate_ttt_loss(&cfg).unwrap();
        let th = predict_iso_pretrained(n, d, k, d as f64, 0.0).unwrap();
        let w0 = cfg.initial_weights().unwrap();
        let l0 = population_loss(&w0, &cfg.cov, &cfg.task, n).unwrap().total;
        assert!(est.mean <= l0 - th.predicted_improvement / 2.0, "{n} {d} {k}: {est:?}, L0 {l0}, {th:?}");
    }
}

#[test]
fn samplers_agree_on_rotated_anisotropic_model() {
    let d = 5;
    let q = random_orthonormal(&mut seeded_rng(21), d).unwrap();
    let cov = CovarianceModel::new(
        q,
        DenseVector::new(vec![0.3, 0.8, 1.0, 1.7, 2.5]).unwrap(),
        DenseVector::new(vec![1.0, 0.5, 0.0, 2.0, 1.0]).unwrap(),
    )
    .unwrap();
    let task = TaskInstance::new(DenseVector::new(vec![0.4, -1.0, 0.3, 0.9, -0.2]).unwrap(), 0.3).unwrap();
    let mut cfg = TrialConfig::new(cov, task, 7, 9);
    cfg.eta_policy = EtaPolicy::Manual(0.004);
    cfg.trials = 20_000;
    let fast = estimate_ttt_loss(&cfg).unwrap();
    cfg.sampler = Sampler::Explicit;
    let slow = estimate_ttt_loss(&cfg).unwrap();
    let se = fast.std_error.hypot(slow.std_error);
    assert!((fast.mean - slow.mean).abs() <= 4.0 * se, "{fast:?} vs {slow:?}");
}

#[test]
fn closed_form_matches_prompt_sampling() {
    let d = 3;
    let q = random_orthonormal(&mut seeded_rng(2), d).unwrap();
    let cov = CovarianceModel::new(q, DenseVector::new(vec![0.5, 1.0, 2.0]).unwrap(), DenseVector::filled(d, 1.0)).unwrap();
    let task = TaskInstance::new(DenseVector::new(vec![1.0, -0.5, 0.25]).unwrap(), 0.3).unwrap();
    let w = AttentionWeights::new(DenseMatrix::from_fn(d, d, |i, j| 0.05 * (1.0 + i as f64 - 0.5 * j as f64))).unwrap();
    let exact = population_loss(&w, &cov, &task, 4).unwrap().total;
    let mc = nested_mc_population_loss(&mut seeded_rng(3), &w, &cov, &task, 4, 200_000).unwrap();
    assert!((mc.mean - exact).abs() <= 3.0 * mc.std_error, "{mc:?} vs {exact}");
}
