//! Exact population quantities.
//!
//! With `Σ = Σx`, a fresh prompt of `n` context rows and task `β`, the
//! expected squared error of weights `W` is
//!
//! ```text
//! L(W) = βᵀ[Σ - nΣWΣ - nΣWᵀΣ + n(n+1)ΣWᵀΣWΣ + n·tr(WᵀΣWΣ)·Σ]β
//!        + σ²·n·tr(WᵀΣWΣ) + σ²
//! ```
//!
//! Everything is evaluated in the eigenbasis of `Σx`, which makes the loss
//! O(d²) when the basis is the identity.

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::{diag_pseudoinverse, matmul, DenseMatrix, DenseVector, DEFAULT_REL_TOL};
use crate::model::{AttentionWeights, CovarianceModel, TaskInstance};
use crate::Error;

/// The three summands of the population loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// The quadratic form in `β`.
    pub bias_term: f64,
    /// `σ²·n·tr(WᵀΣWΣ)`.
    pub noise_trace_term: f64,
    /// `σ²`.
    pub noise_floor: f64,
}

impl LossBreakdown {
    fn new(bias_term: f64, noise_trace_term: f64, noise_floor: f64) -> Self {
        Self { total: bias_term + noise_trace_term + noise_floor, bias_term, noise_trace_term, noise_floor }
    }
}

fn check_dims(w: &AttentionWeights, cov: &CovarianceModel, task: &TaskInstance) -> Result<(), Error> {
    if w.dim() != cov.dim() || task.dim() != cov.dim() {
        return Err(Error::Shape(format!(
            "weights {}x{}, covariance dim {}, task dim {}",
            w.dim(),
            w.dim(),
            cov.dim(),
            task.dim()
        )));
    }
    Ok(())
}

/// Expected squared error of `W` on a fresh prompt with `n` context rows.
pub fn population_loss(
    w: &AttentionWeights,
    cov: &CovarianceModel,
    task: &TaskInstance,
    n: usize,
) -> Result<LossBreakdown, Error> {
    check_dims(w, cov, task)?;
    if n == 0 {
        return Err(Error::Shape("population loss needs n >= 1".into()));
    }
    let wt = cov.matrix_to_basis(w.matrix())?;
    let bt = cov.to_basis(task.beta())?;
    let lam = cov.feature_eigs().as_slice();
    let d = cov.dim();
    let nf = n as f64;

    let m: Vec<f64> = (0..d).map(|i| lam[i] * bt[i]).collect();
    let bsb: f64 = (0..d).map(|i| m[i] * bt[i]).sum();
    let mut m_w_m = 0.0;
    let mut wm_sig_wm = 0.0;
    let mut tr = 0.0;
    for i in 0..d {
        let row = wt.row(i);
        let wm_i: f64 = row.iter().zip(&m).map(|(a, b)| a * b).sum();
        m_w_m += m[i] * wm_i;
        wm_sig_wm += lam[i] * wm_i * wm_i;
        let row_tr: f64 = row.iter().zip(lam).map(|(a, l)| a * a * l).sum();
        tr += lam[i] * row_tr;
    }
    let bias = bsb - 2.0 * nf * m_w_m + nf * (nf + 1.0) * wm_sig_wm + nf * tr * bsb;
    let s2 = task.sigma() * task.sigma();
    Ok(LossBreakdown::new(bias, s2 * nf * tr, s2))
}

/// Population loss averaged over tasks `β ~ N(0, Σβ)`: `tr(K Σβ) + noise`.
pub fn pretraining_loss(w: &AttentionWeights, cov: &CovarianceModel, n: usize, sigma: f64) -> Result<f64, Error> {
    let d = cov.dim();
    let noise = population_loss(w, cov, &TaskInstance::new(DenseVector::zeros(d), sigma)?, n)?;
    let mut bias = 0.0;
    for i in 0..d {
        let lb = cov.task_eigs()[i];
        if lb > 0.0 {
            let task = TaskInstance::noiseless(cov.from_basis(&DenseVector::basis(d, i))?)?;
            bias += lb * population_loss(w, cov, &task, n)?.bias_term;
        }
    }
    Ok(bias + noise.noise_trace_term + noise.noise_floor)
}

/// Minimiser of the pretraining loss when `Σx = Σβ = I`: `I / (n + d + 1 + σ²)`.
pub fn pretrained_weights_isotropic(n: usize, d: usize, sigma: f64) -> AttentionWeights {
    AttentionWeights::scaled_identity(d, 1.0 / (n as f64 + d as f64 + 1.0 + sigma * sigma))
}

/// Minimal-norm minimiser of the pretraining loss for jointly diagonal
/// covariances.
///
/// In the basis `Q`, with `pᵢ = λxᵢ·λβᵢ` and `M = σ² + Σ pᵢ`, the whitened
/// weights are `pᵢ / ((n+1)pᵢ + M)`; dividing by `λxᵢ` undoes the whitening.
pub fn pretrained_weights_general(cov: &CovarianceModel, n: usize, sigma: f64) -> Result<AttentionWeights, Error> {
    if n == 0 {
        return Err(Error::Shape("pretrained weights need n >= 1".into()));
    }
    let lx = cov.feature_eigs();
    let lb = cov.task_eigs();
    let d = cov.dim();
    let inv_lx = diag_pseudoinverse(lx, DEFAULT_REL_TOL)?;
    for i in 0..d {
        if inv_lx[i] == 0.0 && lb[i] > 0.0 {
            return Err(Error::Domain(format!(
                "direction {i} has zero feature variance but task variance {}",
                lb[i]
            )));
        }
    }
    let whitened = whitened_pretrained_eigs(cov, n, sigma);
    let diag: Vec<f64> = (0..d).map(|i| whitened[i] * inv_lx[i]).collect();
    AttentionWeights::new(cov.matrix_from_basis(&DenseMatrix::from_diag(&diag))?)
}

/// Eigenvalues of `Σx^{1/2} W* Σx^{1/2}` in the basis `Q`.
pub fn whitened_pretrained_eigs(cov: &CovarianceModel, n: usize, sigma: f64) -> Vec<f64> {
    let d = cov.dim();
    let p: Vec<f64> = (0..d).map(|i| cov.feature_eigs()[i] * cov.task_eigs()[i]).collect();
    let m = sigma * sigma + p.iter().sum::<f64>();
    p.iter()
        .map(|&pi| if pi > 0.0 { pi / ((n as f64 + 1.0) * pi + m) } else { 0.0 })
        .collect()
}

/// Best weights for a single known task (noiseless, `Σx = I`):
/// `ββᵀ / ((n + 2)‖β‖²)`.
pub fn task_optimal_weights(task: &TaskInstance, n: usize) -> Result<AttentionWeights, Error> {
    if task.sigma() != 0.0 {
        return Err(Error::UnsupportedRegime("task-optimal weights are derived for noiseless labels".into()));
    }
    let b2 = task.beta().norm_sq();
    if b2 == 0.0 {
        return Err(Error::Domain("task-optimal weights need a nonzero task".into()));
    }
    let w = DenseMatrix::outer(task.beta(), task.beta()).scaled(1.0 / ((n as f64 + 2.0) * b2));
    AttentionWeights::new(w)
}

/// `E[(XᵀX) M (XᵀX)] = n(n+1)ΣMΣ + n·tr(MΣ)·Σ` for `X` with `n` i.i.d.
/// `N(0, Σ)` rows.
pub fn moment_identity(cov_sigma: &DenseMatrix, m: &DenseMatrix, n: usize) -> Result<DenseMatrix, Error> {
    if !cov_sigma.is_square() || cov_sigma.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "moment identity: Σ {}x{}, M {}x{}",
            cov_sigma.rows(),
            cov_sigma.cols(),
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_symmetric(1e-12 * m.max_abs().max(1.0)) {
        return Err(Error::Domain("moment identity needs a symmetric M".into()));
    }
    let nf = n as f64;
    let ms = matmul(m, cov_sigma)?;
    let sms = matmul(cov_sigma, &ms)?;
    sms.scaled(nf * (nf + 1.0)).add(&cov_sigma.scaled(nf * ms.trace()))
}

/// Absorbs `Σx` into the weights and the task: `W̄ = Σx^{1/2} W Σx^{1/2}`,
/// `β̄ = Σx^{1/2} β`. The loss of `(W̄, β̄)` under `Σx = I` equals the loss of
/// `(W, β)` under `Σx`.
pub fn covariance_shift(
    w: &AttentionWeights,
    cov: &CovarianceModel,
    task: &TaskInstance,
) -> Result<(AttentionWeights, TaskInstance), Error> {
    check_dims(w, cov, task)?;
    if cov.feature_eigs().as_slice().iter().any(|l| *l <= 0.0) {
        return Err(Error::Domain("covariance shift needs a positive definite feature covariance".into()));
    }
    let s = cov.feature_sqrt();
    let w_bar = matmul(&matmul(&s, w.matrix())?, &s)?;
    let beta_bar = s.matvec(task.beta())?;
    Ok((AttentionWeights::new(w_bar)?, TaskInstance::new(beta_bar, task.sigma())?))
}
