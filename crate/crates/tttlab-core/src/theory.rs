//! Predicted step sizes, loss improvements and thresholds for one TTT step.
//!
//! The isotropic-pretrained and general-covariance predictions are
//! asymptotic (lower-order terms in `1/n` dropped). The zero-initialisation
//! prediction is the exact expectation of a quadratic in `η`.
//!
//! Every gain below has the form `G(η) = a·η - b·η²`, so the optimal step is
//! `a / 2b` and the improvement is `a² / 4b`.

use alloc::format;
use alloc::vec::Vec;

use crate::model::{AttentionWeights, CovarianceModel, TaskInstance};
use crate::Error;

/// Which prediction produced a [`TheoryReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    IsoPretrained,
    ZeroInit,
    GeneralCov,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::IsoPretrained => "iso_pretrained",
            Regime::ZeroInit => "zero_init",
            Regime::GeneralCov => "general_cov",
        }
    }
}

/// Optimal step size and the loss before and after one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryReport {
    pub eta_star: f64,
    pub initial_loss: f64,
    pub predicted_improvement: f64,
    pub predicted_final_loss: f64,
    pub regime: Regime,
}

impl TheoryReport {
    fn new(regime: Regime, eta_star: f64, initial_loss: f64, improvement: f64) -> Self {
        Self {
            eta_star,
            initial_loss,
            predicted_improvement: improvement,
            predicted_final_loss: initial_loss - improvement,
            regime,
        }
    }
}

/// Misalignment `A` and signal power `B` of weights against a task, in the
/// whitened eigenbasis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentQuantities {
    pub a: f64,
    pub b: f64,
    pub beta_tilde_norm_sq: f64,
}

impl AlignmentQuantities {
    /// `c₁ = A/‖β̃‖²`, `c₂ = B/‖β̃‖²`.
    pub fn ratios(&self) -> (f64, f64) {
        (self.a / self.beta_tilde_norm_sq, self.b / self.beta_tilde_norm_sq)
    }
}

fn require_noiseless(sigma: f64, what: &str) -> Result<(), Error> {
    if sigma != 0.0 {
        return Err(Error::UnsupportedRegime(format!("{what} is only derived for noiseless labels (sigma = {sigma})")));
    }
    Ok(())
}

/// Maximiser and maximum of `a·η - b·η²`; zero when there is nothing to gain.
fn quadratic_optimum(a: f64, b: f64) -> (f64, f64) {
    if a <= 0.0 || b <= 0.0 {
        return (0.0, 0.0);
    }
    (a / (2.0 * b), a * a / (4.0 * b))
}

/// `A = β̃ᵀ(I - nΛ)²β̃`, `B = n‖β̃‖²·tr(Λ²)` with `β̃ = QᵀΣx^{1/2}β` and `Λ` the
/// eigenvalues of `Σx^{1/2} W Σx^{1/2}`.
///
/// `W` must be diagonal in the basis of `cov` and its whitened eigenvalues
/// must lie in `[0, 1/(n+1)]`.
pub fn alignment_quantities(
    w: &AttentionWeights,
    cov: &CovarianceModel,
    task: &TaskInstance,
    n: usize,
) -> Result<AlignmentQuantities, Error> {
    let d = cov.dim();
    if w.dim() != d || task.dim() != d {
        return Err(Error::Shape(format!("alignment: weights {}, covariance {}, task {}", w.dim(), d, task.dim())));
    }
    let sq: Vec<f64> = cov.feature_eigs().as_slice().iter().map(|l| libm::sqrt(*l)).collect();
    let wt = cov.matrix_to_basis(w.matrix())?;
    let mut fro = 0.0;
    let mut off = 0.0;
    let mut lam = Vec::with_capacity(d);
    for i in 0..d {
        for j in 0..d {
            let s = sq[i] * wt[(i, j)] * sq[j];
            fro += s * s;
            if i == j {
                lam.push(s);
            } else {
                off += s * s;
            }
        }
    }
    if libm::sqrt(off) > 1e-10 * libm::sqrt(fro) {
        return Err(Error::Domain("weights are not diagonal in the covariance basis".into()));
    }
    let upper = 1.0 / (n as f64 + 1.0);
    let slack = 1e-9 * upper;
    if let Some(bad) = lam.iter().find(|l| **l < -slack || **l > upper + slack) {
        return Err(Error::Domain(format!("whitened eigenvalue {bad} lies outside [0, 1/(n+1)]")));
    }
    let bt = cov.to_basis(task.beta())?;
    let nf = n as f64;
    let mut a = 0.0;
    let mut norm = 0.0;
    for i in 0..d {
        let b = sq[i] * bt[i];
        let r = 1.0 - nf * lam[i];
        a += r * r * b * b;
        norm += b * b;
    }
    let tr2: f64 = lam.iter().map(|l| l * l).sum();
    Ok(AlignmentQuantities { a, b: nf * norm * tr2, beta_tilde_norm_sq: norm })
}

/// Expected one-step gain at step `eta` from pretrained isotropic weights,
/// keeping the finite-`n` factors.
pub fn iso_pretrained_gain(n: usize, d: usize, k: usize, beta_norm_sq: f64, eta: f64) -> f64 {
    let (lin, quad) = iso_pretrained_coefficients(n, d, k, beta_norm_sq);
    lin * eta - quad * eta * eta
}

fn iso_pretrained_coefficients(n: usize, d: usize, k: usize, b2: f64) -> (f64, f64) {
    let (n, d, k) = (n as f64, d as f64, k as f64);
    let c = (n + d + 1.0) * (n + d + 1.0);
    let lin = 4.0 * k * n * n * d * d * b2 * b2 / c;
    let quad = 4.0 * k * (k + d + 1.0) * n * n * d * (n + d) * (n * n + d) * b2 * b2 * b2 / c;
    (lin, quad)
}

/// Leading-order step size and improvement for pretrained isotropic weights:
/// `d / (2(k+d)n²(n+d)‖β‖²)` and `(k/(k+d))·(d/(n+d))³·‖β‖²`.
pub fn iso_pretrained_leading_order(n: usize, d: usize, k: usize, beta_norm_sq: f64) -> (f64, f64) {
    if beta_norm_sq == 0.0 {
        return (0.0, 0.0);
    }
    let (n, d, k) = (n as f64, d as f64, k as f64);
    let eta = d / (2.0 * (k + d) * n * n * (n + d) * beta_norm_sq);
    let r = d / (n + d);
    (eta, k / (k + d) * r * r * r * beta_norm_sq)
}

/// One step from `W* = I/(n+d+1)` with `Σx = Σβ = I`.
///
/// Uses the refined step `d / (2(k+d+1)(n²+d)(n+d)‖β‖²)`; see
/// [`iso_pretrained_leading_order`] for the coarser variant.
pub fn predict_iso_pretrained(n: usize, d: usize, k: usize, beta_norm_sq: f64, sigma: f64) -> Result<TheoryReport, Error> {
    require_noiseless(sigma, "the pretrained isotropic prediction")?;
    check_counts(n, d)?;
    let initial = beta_norm_sq * (d as f64 + 1.0) / (n as f64 + d as f64 + 1.0);
    let (eta, gain) = if beta_norm_sq == 0.0 {
        (0.0, 0.0)
    } else {
        let (n, d, k) = (n as f64, d as f64, k as f64);
        let eta = d / (2.0 * (k + d + 1.0) * (n * n + d) * (n + d) * beta_norm_sq);
        let gain = k / (k + d + 1.0) * d * d * d / ((n + d + 1.0) * (n + d + 1.0) * (n + d) * (1.0 + d / (n * n)))
            * beta_norm_sq;
        (eta, gain)
    };
    Ok(TheoryReport::new(Regime::IsoPretrained, eta, initial, gain))
}

fn zero_init_coefficients(n: usize, d: usize, k: usize, b2: f64, sigma: f64) -> (f64, f64) {
    let (n, d, k) = (n as f64, d as f64, k as f64);
    let s2 = sigma * sigma;
    let c = s2 * d + (k + d + 1.0) * b2;
    let dd = s2 * s2 * d + b2 * b2 * (n * n + 4.0 * n + 3.0 + d) + 2.0 * s2 * (n + d + 1.0) * b2;
    (4.0 * k * n * n * b2 * b2, 4.0 * k * n * n * c * dd)
}

/// Exact expected one-step gain from `W = 0` with `Σx = I`.
pub fn zero_init_gain(n: usize, d: usize, k: usize, beta_norm_sq: f64, sigma: f64, eta: f64) -> f64 {
    let (lin, quad) = zero_init_coefficients(n, d, k, beta_norm_sq, sigma);
    lin * eta - quad * eta * eta
}

/// One step from `W = 0` with `Σx = I`; noisy labels allowed.
pub fn predict_zero_init(n: usize, d: usize, k: usize, beta_norm_sq: f64, sigma: f64) -> Result<TheoryReport, Error> {
    check_counts(n, d)?;
    let (lin, quad) = zero_init_coefficients(n, d, k, beta_norm_sq, sigma);
    let (eta, gain) = quadratic_optimum(lin, quad);
    Ok(TheoryReport::new(Regime::ZeroInit, eta, beta_norm_sq + sigma * sigma, gain))
}

/// Leading-order one-step gain for general jointly diagonal covariances.
pub fn general_cov_gain(q: &AlignmentQuantities, n: usize, d: usize, k: usize, eta: f64) -> f64 {
    let (lin, quad) = general_coefficients(q, n, d, k);
    lin * eta - quad * eta * eta
}

fn general_coefficients(q: &AlignmentQuantities, n: usize, d: usize, k: usize) -> (f64, f64) {
    let (n, d, k) = (n as f64, d as f64, k as f64);
    let nb = q.beta_tilde_norm_sq;
    (4.0 * k * n * n * nb * q.a, 4.0 * k * (k + d) * (n * n * n * n) * nb * nb * (q.a + q.b))
}

/// One step from weights `W` jointly diagonal with `cov`:
/// `η* ≈ A/(2(k+d)n²‖β̃‖²(A+B))`, improvement `≈ (k/(k+d))·A²/(A+B)`.
pub fn predict_general_cov(
    w: &AttentionWeights,
    cov: &CovarianceModel,
    task: &TaskInstance,
    n: usize,
    k: usize,
) -> Result<TheoryReport, Error> {
    require_noiseless(task.sigma(), "the general-covariance prediction")?;
    check_counts(n, cov.dim())?;
    let q = alignment_quantities(w, cov, task, n)?;
    let (lin, quad) = general_coefficients(&q, n, cov.dim(), k);
    let (eta, gain) = quadratic_optimum(lin, quad);
    Ok(TheoryReport::new(Regime::GeneralCov, eta, q.a + q.b, gain))
}

fn check_counts(n: usize, d: usize) -> Result<(), Error> {
    if n == 0 || d == 0 {
        return Err(Error::Domain(format!("need n, d >= 1 (n = {n}, d = {d})")));
    }
    Ok(())
}

/// The `α = n/d` at which the pretrained post-TTT loss peaks, when `γ > 1/2`.
pub fn nonmonotonic_threshold(gamma: f64) -> Option<f64> {
    if gamma > 0.5 {
        Some(libm::sqrt(3.0 * gamma / (gamma + 1.0)) - 1.0)
    } else {
        None
    }
}

/// `γ* = (α+1)²/(α+2)`: below it, pretrained initialisation beats zero.
pub fn phase_transition_iso(alpha: f64) -> f64 {
    (alpha + 1.0) * (alpha + 1.0) / (alpha + 2.0)
}

/// `γ* = ((c₁+c₂) - (c₁+c₂)²) / (c₂(2c₁+c₂))`. Negative values mean zero
/// initialisation always wins.
pub fn phase_transition_general(c1: f64, c2: f64) -> Result<f64, Error> {
    if !(c1 >= 0.0) || !(c2 >= 0.0) {
        return Err(Error::Domain(format!("c1 = {c1}, c2 = {c2} must be nonnegative")));
    }
    if c2 == 0.0 {
        return Err(Error::Domain("phase transition needs c2 > 0".into()));
    }
    let s = c1 + c2;
    Ok((s - s * s) / (c2 * (2.0 * c1 + c2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::closed_form::{population_loss, pretrained_weights_general, pretrained_weights_isotropic};
    use crate::linalg::DenseVector;

    fn ones_task(d: usize) -> TaskInstance {
        TaskInstance::noiseless(DenseVector::filled(d, 1.0)).unwrap()
    }

    #[test]
    fn alignment_at_zero_weights() {
        let d = 4;
        let task = TaskInstance::noiseless(DenseVector::new(vec![1.0, 2.0, 0.0, -1.0]).unwrap()).unwrap();
        let q = alignment_quantities(&AttentionWeights::zeros(d), &CovarianceModel::isotropic(d), &task, 5).unwrap();
        assert_eq!((q.a, q.b), (6.0, 0.0));
    }

    #[test]
    fn alignment_at_isotropic_pretrained() {
        let (n, d) = (11usize, 7usize);
        let task = ones_task(d);
        let w = pretrained_weights_isotropic(n, d, 0.0);
        let q = alignment_quantities(&w, &CovarianceModel::isotropic(d), &task, n).unwrap();
        let (nf, df) = (n as f64, d as f64);
        let c = nf + df + 1.0;
        assert!((q.a - df * (df + 1.0) * (df + 1.0) / (c * c)).abs() < 1e-12);
        assert!((q.b - nf * df * df / (c * c)).abs() < 1e-12);
    }

    #[test]
    fn alignment_close_to_exact_loss_at_400() {
        let (n, d) = (400, 400);
        let task = ones_task(d);
        let w = pretrained_weights_isotropic(n, d, 0.0);
        let cov = CovarianceModel::isotropic(d);
        let q = alignment_quantities(&w, &cov, &task, n).unwrap();
        let exact = population_loss(&w, &cov, &task, n).unwrap().total;
        assert!(((q.a + q.b) - exact).abs() / exact <= 0.02);
    }

    #[test]
    fn alignment_rejects_bad_weights() {
        let d = 2;
        let task = ones_task(d);
        let cov = CovarianceModel::isotropic(d);
        let off = AttentionWeights::new(crate::linalg::DenseMatrix::from_rows(&[&[0.01, 0.01], &[0.0, 0.01]]).unwrap()).unwrap();
        assert!(matches!(alignment_quantities(&off, &cov, &task, 3), Err(Error::Domain(_))));
        let big = AttentionWeights::scaled_identity(d, 0.5);
        assert!(matches!(alignment_quantities(&big, &cov, &task, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn iso_large_k_limit() {
        let (n, d) = (50usize, 30usize);
        let (_, lead) = iso_pretrained_leading_order(n, d, 1_000_000_000 * d, 2.0);
        let r = d as f64 / (n + d) as f64;
        assert!((lead - r * r * r * 2.0).abs() < 1e-8);
    }

    #[test]
    fn iso_leading_order_n_eq_d_eq_k() {
        let (_, gain) = iso_pretrained_leading_order(64, 64, 64, 1.0);
        assert!((gain - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn iso_k_zero() {
        let r = predict_iso_pretrained(20, 10, 0, 10.0, 0.0).unwrap();
        assert_eq!(r.predicted_improvement, 0.0);
        assert!(r.eta_star.is_finite() && r.eta_star > 0.0);
        assert_eq!(r.predicted_final_loss, r.initial_loss);
    }

    #[test]
    fn iso_rejects_noise() {
        assert!(matches!(predict_iso_pretrained(20, 10, 5, 10.0, 0.1), Err(Error::UnsupportedRegime(_))));
    }

    #[test]
    fn iso_refined_optimum_maximises_gain() {
        let (n, d, k, b2) = (40usize, 60usize, 90usize, 60.0);
        let r = predict_iso_pretrained(n, d, k, b2, 0.0).unwrap();
        let g = iso_pretrained_gain(n, d, k, b2, r.eta_star);
        assert!((g - r.predicted_improvement).abs() < 1e-12 * g);
        assert!(iso_pretrained_gain(n, d, k, b2, r.eta_star * 1.01) < g);
        assert!(iso_pretrained_gain(n, d, k, b2, r.eta_star * 0.99) < g);
    }

    #[test]
    fn zero_init_noiseless_closed_forms() {
        let (n, d, k, b2) = (10usize, 3usize, 7usize, 2.5);
        let r = predict_zero_init(n, d, k, b2, 0.0).unwrap();
        let (nf, df, kf) = (n as f64, d as f64, k as f64);
        let eta = 1.0 / (2.0 * (kf + df + 1.0) * (nf * nf + 4.0 * nf + 3.0 + df) * b2);
        assert!((r.eta_star - eta).abs() < 1e-15 * eta);
        let gain = kf / (kf + df + 1.0) * nf * nf / (nf * nf + 4.0 * nf + 3.0 + df) * b2;
        assert!((r.predicted_improvement - gain).abs() < 1e-12 * gain);
        assert_eq!(r.initial_loss, b2);
    }

    #[test]
    fn zero_init_k_zero() {
        let r = predict_zero_init(10, 3, 0, 4.0, 0.0).unwrap();
        assert_eq!(r.predicted_improvement, 0.0);
        assert_eq!(r.predicted_final_loss, 4.0);
    }

    #[test]
    fn zero_init_large_k_final_loss() {
        let (n, b2) = (30usize, 1.0);
        let r = predict_zero_init(n, n, 1_000_000_000_000, b2, 0.0).unwrap();
        let nf = n as f64;
        let expect = (4.0 * nf + nf + 3.0) / (nf * nf + 4.0 * nf + 3.0 + nf);
        assert!((r.predicted_final_loss - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_init_noisy_is_smaller_gain() {
        let clean = predict_zero_init(20, 10, 30, 10.0, 0.0).unwrap();
        let noisy = predict_zero_init(20, 10, 30, 10.0, 1.0).unwrap();
        assert!(noisy.predicted_improvement < clean.predicted_improvement);
        assert_eq!(noisy.initial_loss, 11.0);
    }

    #[test]
    fn general_matches_iso_leading_order() {
        let (n, d, k) = (400usize, 400usize, 400usize);
        let cov = CovarianceModel::isotropic(d);
        let task = ones_task(d);
        let w = pretrained_weights_general(&cov, n, 0.0).unwrap();
        let g = predict_general_cov(&w, &cov, &task, n, k).unwrap();
        let (eta, gain) = iso_pretrained_leading_order(n, d, k, d as f64);
        assert!((g.eta_star - eta).abs() / eta < 0.01);
        assert!((g.predicted_improvement - gain).abs() / gain < 0.01);
    }

    #[test]
    fn general_at_zero_weights() {
        let (n, d, k) = (30usize, 20usize, 50usize);
        let task = ones_task(d);
        let r = predict_general_cov(&AttentionWeights::zeros(d), &CovarianceModel::isotropic(d), &task, n, k).unwrap();
        assert!((r.predicted_improvement - k as f64 / (k + d) as f64 * d as f64).abs() < 1e-12);
    }

    #[test]
    fn worst_aligned_has_unit_c1() {
        let (n, d) = (250usize, 500usize);
        let mut lb = vec![1.0; d];
        lb[0] = 0.0;
        let cov = CovarianceModel::diagonal(DenseVector::filled(d, 1.0), DenseVector::new(lb).unwrap()).unwrap();
        let task = TaskInstance::noiseless(DenseVector::basis(d, 0)).unwrap();
        let w = pretrained_weights_general(&cov, n, 0.0).unwrap();
        let (c1, c2) = alignment_quantities(&w, &cov, &task, n).unwrap().ratios();
        assert_eq!(c1, 1.0);
        assert!(phase_transition_general(c1, c2).unwrap() < 0.0);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(nonmonotonic_threshold(0.4), None);
        assert!((nonmonotonic_threshold(2.0).unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((nonmonotonic_threshold(1e12).unwrap() - (3f64.sqrt() - 1.0)).abs() < 1e-9);
        assert!((phase_transition_iso(0.5) - 0.9).abs() < 1e-15);
        assert!((phase_transition_iso(1.0) - 4.0 / 3.0).abs() < 1e-15);
        assert!((phase_transition_iso(1e-9) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn general_threshold_reduces_to_iso() {
        for alpha in [0.25, 0.5, 1.0, 2.0, 3.0] {
            let s = (1.0 + alpha) * (1.0 + alpha);
            let (c1, c2) = (1.0 / s, alpha / s);
            let g = phase_transition_general(c1, c2).unwrap();
            assert!((g - phase_transition_iso(alpha)).abs() < 1e-12);
        }
        assert_eq!(phase_transition_general(0.3, 0.7).unwrap(), 0.0);
        assert!(phase_transition_general(0.3, 0.0).is_err());
    }
}
