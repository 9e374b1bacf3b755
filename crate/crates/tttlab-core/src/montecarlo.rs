//! Trial engine for the post-TTT loss, plus sampling oracles.
//!
//! A trial draws one test-time set, takes the TTT step(s) and scores the
//! adapted weights with [`population_loss`]: the outer expectation over sets
//! is sampled, the inner one over fresh prompts is exact.
//!
//! Two samplers produce the same distribution of adapted weights:
//!
//! - [`Sampler::Explicit`] draws the full `(n + k) × d` design.
//! - [`Sampler::Sufficient`] draws only what the update depends on. With
//!   `Z` an `m × d` standard Gaussian block, `Zᵀ(Zc + σζ)` splits along
//!   `w = c/‖c‖` into `w·hᵀt + ‖t‖·Pz` where `h = Zw`, `t = ‖c‖h + σζ`,
//!   `P = I - wwᵀ` and `z ~ N(0, I)`; only the 2×2 Gram of `(h, ζ)` is needed.
//!   Multi-step runs draw the Gram of the training block instead (Bartlett).
//!
//! Trial `t` always uses [`trial_rng`]`(base_seed, t)`, and per-trial losses
//! are reduced in index order, so estimates do not depend on scheduling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{ChiSquared, Distribution};

use crate::closed_form::{population_loss, pretrained_weights_general};
use crate::linalg::{compensated_sum, gaussian_rows, normal, trial_rng, DenseMatrix, DenseVector, RngState};
use crate::model::{
    empirical_train_loss, sample_test_time_set, ttt_step, AttentionWeights, CovarianceModel, StepSchedule, TaskInstance,
    TestTimeSet,
};
use crate::theory::{self, TheoryReport};
use crate::Error;

/// Starting weights of a trial.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    /// Minimiser of the pretraining loss for the configured covariances.
    Pretrained,
    Zero,
    Explicit(AttentionWeights),
}

impl InitPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InitPolicy::Pretrained => "pretrained",
            InitPolicy::Zero => "zero",
            InitPolicy::Explicit(_) => "explicit",
        }
    }
}

/// How the (initial) step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaPolicy {
    /// Refined optimum for pretrained weights with `Σx = Σβ = I`.
    TheoryIso,
    /// Exact optimum for zero initialisation with `Σx = I`.
    TheoryZero,
    /// Leading-order optimum for jointly diagonal weights.
    TheoryGeneral,
    Manual(f64),
}

impl EtaPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            EtaPolicy::TheoryIso => "theory_iso",
            EtaPolicy::TheoryZero => "theory_zero",
            EtaPolicy::TheoryGeneral => "theory_general",
            EtaPolicy::Manual(_) => "manual",
        }
    }
}

/// Number of gradient steps per trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Single,
    /// `steps` steps with `η_t = η·decayᵗ`.
    Geometric { decay: f64, steps: usize },
}

impl Schedule {
    pub fn steps(&self) -> usize {
        match self {
            Schedule::Single => 1,
            Schedule::Geometric { steps, .. } => *steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Sufficient,
    Explicit,
}

/// Everything that defines a Monte-Carlo estimate of the post-TTT loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub cov: CovarianceModel,
    pub task: TaskInstance,
    pub n: usize,
    pub k: usize,
    pub init: InitPolicy,
    pub eta_policy: EtaPolicy,
    pub schedule: Schedule,
    pub sampler: Sampler,
    pub trials: usize,
    pub base_seed: u64,
}

/// Mean of per-trial losses with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl TrialConfig {
    /// Single step from pretrained weights with the isotropic theory step, 2000
    /// trials, seed 0.
    pub fn new(cov: CovarianceModel, task: TaskInstance, n: usize, k: usize) -> Self {
        Self {
            cov,
            task,
            n,
            k,
            init: InitPolicy::Pretrained,
            eta_policy: EtaPolicy::TheoryIso,
            schedule: Schedule::Single,
            sampler: Sampler::Sufficient,
            trials: 2000,
            base_seed: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.cov.dim()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.task.dim() != self.cov.dim() {
            return Err(Error::Shape(format!("task dim {} vs covariance dim {}", self.task.dim(), self.cov.dim())));
        }
        if self.n == 0 {
            return Err(Error::Shape("context needs n >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Domain("need at least one trial".into()));
        }
        if let InitPolicy::Explicit(w) = &self.init {
            if w.dim() != self.d() {
                return Err(Error::Shape(format!("explicit weights are {}x{}, expected d = {}", w.dim(), w.dim(), self.d())));
            }
        }
        if let Schedule::Geometric { decay, steps } = self.schedule {
            StepSchedule::new(1.0, decay, steps)?;
        }
        Ok(())
    }

    pub fn initial_weights(&self) -> Result<AttentionWeights, Error> {
        match &self.init {
            InitPolicy::Pretrained => pretrained_weights_general(&self.cov, self.n, self.task.sigma()),
            InitPolicy::Zero => Ok(AttentionWeights::zeros(self.d())),
            InitPolicy::Explicit(w) => Ok(w.clone()),
        }
    }

    /// The single-step prediction matching the step-size policy. A manual
    /// step picks the regime from the initialisation.
    pub fn theory_report(&self) -> Result<TheoryReport, Error> {
        self.validate()?;
        let b2 = self.task.beta().norm_sq();
        let (n, d, k, sigma) = (self.n, self.d(), self.k, self.task.sigma());
        match self.eta_policy {
            EtaPolicy::TheoryIso => {
                self.require_iso()?;
                theory::predict_iso_pretrained(n, d, k, b2, sigma)
            }
            EtaPolicy::TheoryZero => {
                self.require_zero()?;
                theory::predict_zero_init(n, d, k, b2, sigma)
            }
            EtaPolicy::TheoryGeneral => theory::predict_general_cov(&self.initial_weights()?, &self.cov, &self.task, n, k),
            EtaPolicy::Manual(_) => match self.init {
                InitPolicy::Pretrained if self.require_iso().is_ok() => theory::predict_iso_pretrained(n, d, k, b2, sigma),
                InitPolicy::Zero if self.require_zero().is_ok() => theory::predict_zero_init(n, d, k, b2, sigma),
                _ => theory::predict_general_cov(&self.initial_weights()?, &self.cov, &self.task, n, k),
            },
        }
    }

    /// Predicted loss after one step at the resolved step size, when a
    /// formula covers this configuration.
    pub fn theory_loss(&self) -> Option<f64> {
        if self.schedule.steps() != 1 {
            return None;
        }
        let report = self.theory_report().ok()?;
        let EtaPolicy::Manual(eta) = self.eta_policy else {
            return Some(report.predicted_final_loss);
        };
        let b2 = self.task.beta().norm_sq();
        let (n, d, k) = (self.n, self.d(), self.k);
        let gain = match report.regime {
            theory::Regime::IsoPretrained => theory::iso_pretrained_gain(n, d, k, b2, eta),
            theory::Regime::ZeroInit => theory::zero_init_gain(n, d, k, b2, self.task.sigma(), eta),
            theory::Regime::GeneralCov => {
                let q = theory::alignment_quantities(&self.initial_weights().ok()?, &self.cov, &self.task, n).ok()?;
                theory::general_cov_gain(&q, n, d, k, eta)
            }
        };
        Some(report.initial_loss - gain)
    }

    fn require_iso(&self) -> Result<(), Error> {
        if !self.cov.is_isotropic() {
            return Err(Error::UnsupportedRegime("theory_iso needs identity feature and task covariances".into()));
        }
        if self.init != InitPolicy::Pretrained {
            return Err(Error::UnsupportedRegime("theory_iso needs pretrained initialisation".into()));
        }
        if self.task.sigma() != 0.0 {
            return Err(Error::UnsupportedRegime("theory_iso needs noiseless labels".into()));
        }
        Ok(())
    }

    fn require_zero(&self) -> Result<(), Error> {
        if !self.cov.features_are_identity() {
            return Err(Error::UnsupportedRegime("theory_zero needs identity feature covariance".into()));
        }
        if self.init != InitPolicy::Zero {
            return Err(Error::UnsupportedRegime("theory_zero needs zero initialisation".into()));
        }
        Ok(())
    }

    pub fn resolve_eta(&self) -> Result<f64, Error> {
        match self.eta_policy {
            EtaPolicy::Manual(eta) => {
                if eta >= 0.0 && eta.is_finite() {
                    Ok(eta)
                } else {
                    Err(Error::Domain(format!("manual step size {eta} must be finite and nonnegative")))
                }
            }
            _ => Ok(self.theory_report()?.eta_star),
        }
    }

    /// Resolves weights and step size once for all trials.
    pub fn prepare(&self) -> Result<PreparedTrials<'_>, Error> {
        self.validate()?;
        let w0 = self.initial_weights()?;
        let eta = self.resolve_eta()?;
        let d = self.d();
        let sqrt_eigs: Vec<f64> = self.cov.feature_eigs().as_slice().iter().map(|l| libm::sqrt(*l)).collect();
        let beta_white = scale(&sqrt_eigs, self.cov.to_basis(self.task.beta())?.as_slice());
        debug_assert_eq!(beta_white.len(), d);
        Ok(PreparedTrials { cfg: self, w0, eta, sqrt_eigs, beta_white })
    }
}

/// A validated configuration with its initial weights and step size.
#[derive(Debug, Clone)]
pub struct PreparedTrials<'a> {
    cfg: &'a TrialConfig,
    w0: AttentionWeights,
    eta: f64,
    sqrt_eigs: Vec<f64>,
    beta_white: Vec<f64>,
}

fn scale(s: &[f64], v: &[f64]) -> Vec<f64> {
    s.iter().zip(v).map(|(a, b)| a * b).collect()
}

fn vector(v: Vec<f64>) -> DenseVector {
    DenseVector::new(v).expect("dimension >= 1")
}

impl PreparedTrials<'_> {
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn initial_weights(&self) -> &AttentionWeights {
        &self.w0
    }

    pub fn trials(&self) -> usize {
        self.cfg.trials
    }

    fn loss(&self, w: &AttentionWeights) -> Result<f64, Error> {
        Ok(population_loss(w, &self.cfg.cov, &self.cfg.task, self.cfg.n)?.total)
    }

    fn eta_at(&self, t: usize) -> f64 {
        match self.cfg.schedule {
            Schedule::Single => self.eta,
            Schedule::Geometric { decay, .. } => self.eta * libm::pow(decay, t as f64),
        }
    }

    /// Loss after the last step of trial `index`.
    pub fn trial_loss(&self, index: usize) -> Result<f64, Error> {
        Ok(*self.trial_path(index)?.last().expect("at least one step"))
    }

    /// Loss after each step of trial `index`.
    pub fn trial_path(&self, index: usize) -> Result<Vec<f64>, Error> {
        let mut rng = trial_rng(self.cfg.base_seed, index as u64);
        let steps = self.cfg.schedule.steps();
        if self.eta == 0.0 {
            return Ok(vec![self.loss(&self.w0)?; steps]);
        }
        match (self.cfg.sampler, steps) {
            (Sampler::Explicit, _) => self.explicit_path(&mut rng),
            (Sampler::Sufficient, 1) => Ok(vec![self.sufficient_single(&mut rng)?]),
            (Sampler::Sufficient, _) => self.sufficient_multi(&mut rng),
        }
    }

    fn explicit_path(&self, rng: &mut RngState) -> Result<Vec<f64>, Error> {
        let set = sample_test_time_set(rng, &self.cfg.cov, &self.cfg.task, self.cfg.n, self.cfg.k)?;
        let mut w = self.w0.clone();
        let mut out = Vec::with_capacity(self.cfg.schedule.steps());
        for t in 0..self.cfg.schedule.steps() {
            w = ttt_step(&w, &set, self.eta_at(t))?;
            out.push(self.loss(&w)?);
        }
        Ok(out)
    }

    /// `u = X_ctxᵀ y_ctx` drawn from its sufficient statistics.
    fn sample_context(&self, rng: &mut RngState) -> Result<DenseVector, Error> {
        let s = cross_moment(rng, &self.beta_white, self.cfg.task.sigma(), self.cfg.n);
        self.cfg.cov.from_basis(&vector(scale(&self.sqrt_eigs, &s)))
    }

    /// Whitened residual direction `D Qᵀ (β - W u)`.
    fn residual_direction(&self, w: &AttentionWeights, u: &DenseVector) -> Result<Vec<f64>, Error> {
        let wu = w.matrix().matvec(u)?;
        let r = self.cfg.task.beta().sub(&wu)?;
        Ok(scale(&self.sqrt_eigs, self.cfg.cov.to_basis(&r)?.as_slice()))
    }

    fn sufficient_single(&self, rng: &mut RngState) -> Result<f64, Error> {
        let u = self.sample_context(rng)?;
        let c = self.residual_direction(&self.w0, &u)?;
        let s = cross_moment(rng, &c, self.cfg.task.sigma(), self.cfg.k);
        let a = self.cfg.cov.from_basis(&vector(scale(&self.sqrt_eigs, &s)))?;
        let mut w = self.w0.matrix().clone();
        w.add_outer(2.0 * self.eta, &a, &u)?;
        self.loss(&AttentionWeights::new(w)?)
    }

    fn sufficient_multi(&self, rng: &mut RngState) -> Result<Vec<f64>, Error> {
        let u = self.sample_context(rng)?;
        let sigma = self.cfg.task.sigma();
        let d = self.cfg.d();
        let with_noise = sigma > 0.0;
        let gram = bartlett_gram(rng, d + usize::from(with_noise), self.cfg.k);
        let mut w = self.w0.clone();
        let mut out = Vec::with_capacity(self.cfg.schedule.steps());
        for t in 0..self.cfg.schedule.steps() {
            let c = self.residual_direction(&w, &u)?;
            let mut s = vec![0.0; d];
            for (i, si) in s.iter_mut().enumerate() {
                let row = gram.row(i);
                *si = row[..d].iter().zip(&c).map(|(g, ci)| g * ci).sum::<f64>();
                if with_noise {
                    *si += sigma * row[d];
                }
            }
            let a = self.cfg.cov.from_basis(&vector(scale(&self.sqrt_eigs, &s)))?;
            let mut next = w.into_matrix();
            next.add_outer(2.0 * self.eta_at(t), &a, &u)?;
            w = AttentionWeights::new(next)?;
            out.push(self.loss(&w)?);
        }
        Ok(out)
    }
}

fn chi_squared(rng: &mut RngState, dof: usize) -> f64 {
    if dof == 0 {
        return 0.0;
    }
    ChiSquared::new(dof as f64).expect("positive degrees of freedom").sample(rng)
}

/// One draw of `Zᵀ(Zc + σζ)` for `Z` an `m × d` standard Gaussian matrix and
/// `ζ ~ N(0, I_m)`, using O(d) random numbers.
pub fn cross_moment(rng: &mut RngState, c: &[f64], sigma: f64, m: usize) -> Vec<f64> {
    let d = c.len();
    if m == 0 {
        return vec![0.0; d];
    }
    let cn = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
    let mut z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    if cn == 0.0 {
        let t = sigma * libm::sqrt(chi_squared(rng, m));
        z.iter_mut().for_each(|x| *x *= t);
        return z;
    }
    // Gram of (h, ζ) by Bartlett: [[g11, g12], [g12, g22]].
    let g11 = chi_squared(rng, m);
    let (g12, g22) = if sigma > 0.0 {
        let b = normal(rng);
        (libm::sqrt(g11) * b, b * b + chi_squared(rng, m - 1))
    } else {
        (0.0, 0.0)
    };
    let ht = cn * g11 + sigma * g12;
    let tt = (cn * cn * g11 + 2.0 * cn * sigma * g12 + sigma * sigma * g22).max(0.0);
    let tn = libm::sqrt(tt);
    let wz: f64 = c.iter().zip(&z).map(|(ci, zi)| ci * zi).sum::<f64>() / cn;
    for (zi, ci) in z.iter_mut().zip(c) {
        let w = ci / cn;
        *zi = w * ht + tn * (*zi - w * wz);
    }
    z
}

/// Gram matrix `ZᵀZ` of an `m × p` standard Gaussian matrix, drawn through
/// its upper-trapezoidal Bartlett factor.
pub fn bartlett_gram(rng: &mut RngState, p: usize, m: usize) -> DenseMatrix {
    let r = m.min(p);
    let mut t = DenseMatrix::zeros(r.max(1), p);
    for i in 0..r {
        t[(i, i)] = libm::sqrt(chi_squared(rng, m - i));
        for j in i + 1..p {
            t[(i, j)] = normal(rng);
        }
    }
    let mut g = DenseMatrix::zeros(p, p);
    for i in 0..r {
        let row = t.row(i);
        for j in i..p {
            let tj = row[j];
            if tj == 0.0 {
                continue;
            }
            for l in j..p {
                g[(j, l)] += tj * row[l];
            }
        }
    }
    for j in 0..p {
        for l in 0..j {
            g[(j, l)] = g[(l, j)];
        }
    }
    g
}

/// Mean and standard error of per-trial values, reduced in index order.
pub fn summarize(values: &[f64]) -> MCEstimate {
    let trials = values.len();
    if trials == 0 {
        return MCEstimate { mean: f64::NAN, std_error: f64::NAN, trials };
    }
    if values.iter().all(|v| *v == values[0]) {
        return MCEstimate { mean: values[0], std_error: 0.0, trials };
    }
    let nf = trials as f64;
    let mean = compensated_sum(values.iter().copied()) / nf;
    let var = if trials > 1 { compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (nf - 1.0) } else { 0.0 };
    MCEstimate { mean, std_error: libm::sqrt(var / nf), trials }
}

/// Serial estimate of the expected loss after TTT.
pub fn estimate_ttt_loss(cfg: &TrialConfig) -> Result<MCEstimate, Error> {
    let prepared = cfg.prepare()?;
    let losses = (0..cfg.trials).map(|t| prepared.trial_loss(t)).collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(&losses))
}

/// Serial estimate of the expected loss after each step.
pub fn estimate_ttt_loss_path(cfg: &TrialConfig) -> Result<Vec<MCEstimate>, Error> {
    let prepared = cfg.prepare()?;
    let paths = (0..cfg.trials).map(|t| prepared.trial_path(t)).collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_paths(&paths))
}

/// Column-wise [`summarize`] of equal-length paths.
pub fn summarize_paths(paths: &[Vec<f64>]) -> Vec<MCEstimate> {
    let steps = paths.first().map_or(0, |p| p.len());
    (0..steps)
        .map(|s| {
            let col: Vec<f64> = paths.iter().map(|p| p[s]).collect();
            summarize(&col)
        })
        .collect()
}

/// Direct Monte-Carlo estimate of the population loss: fresh prompts, one
/// squared error each.
pub fn nested_mc_population_loss(
    rng: &mut RngState,
    w: &AttentionWeights,
    cov: &CovarianceModel,
    task: &TaskInstance,
    n: usize,
    prompts: usize,
) -> Result<MCEstimate, Error> {
    if w.dim() != cov.dim() || task.dim() != cov.dim() {
        return Err(Error::Shape("nested MC: dimensions disagree".into()));
    }
    let mut errs = Vec::with_capacity(prompts);
    for _ in 0..prompts {
        let set = sample_test_time_set(rng, cov, task, n, 1)?;
        errs.push(empirical_train_loss(w, &set)?);
    }
    Ok(summarize(&errs))
}

/// Central-difference gradient of the empirical train loss in every entry of
/// `W`.
pub fn finite_diff_gradient(w: &AttentionWeights, set: &TestTimeSet, epsilon: f64) -> Result<DenseMatrix, Error> {
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(Error::Domain(format!("finite-difference step {epsilon} outside [1e-8, 1e-3]")));
    }
    let d = w.dim();
    let mut g = DenseMatrix::zeros(d, d);
    let mut probe = w.matrix().clone();
    for i in 0..d {
        for j in 0..d {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + epsilon;
            let lp = empirical_train_loss(&AttentionWeights::new(probe.clone())?, set)?;
            probe[(i, j)] = orig - epsilon;
            let lm = empirical_train_loss(&AttentionWeights::new(probe.clone())?, set)?;
            probe[(i, j)] = orig;
            g[(i, j)] = (lp - lm) / (2.0 * epsilon);
        }
    }
    Ok(g)
}

/// Running per-entry mean and second moment.
#[derive(Debug, Clone)]
struct EntryStats {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl EntryStats {
    fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], sum_sq: vec![0.0; len], count: 0 }
    }

    fn push(&mut self, v: &[f64]) {
        for ((s, q), x) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(v) {
            *s += x;
            *q += x * x;
        }
        self.count += 1;
    }

    fn mean_and_se(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(self.sum.len());
        let mut se = Vec::with_capacity(self.sum.len());
        for (s, q) in self.sum.iter().zip(&self.sum_sq) {
            let m = s / n;
            let var = ((q - n * m * m) / (n - 1.0)).max(0.0);
            mean.push(m);
            se.push(libm::sqrt(var / n));
        }
        (mean, se)
    }
}

/// Outcome of [`verify_moment_identity`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub mc_mean: DenseMatrix,
    pub std_error: DenseMatrix,
    pub exact: DenseMatrix,
    /// Largest `|mc - exact| / std_error` over entries.
    pub max_z: f64,
}

/// Monte-Carlo average of `(XᵀX) M (XᵀX)` for `X` with `n` rows from
/// `N(0, Σx)`, compared entrywise with the closed form.
pub fn verify_moment_identity(
    rng: &mut RngState,
    cov: &CovarianceModel,
    m: &DenseMatrix,
    n: usize,
    samples: usize,
) -> Result<MomentCheck, Error> {
    let exact = crate::closed_form::moment_identity(&cov.feature_covariance(), m, n)?;
    if samples < 2 {
        return Err(Error::Domain("need at least two samples".into()));
    }
    let d = cov.dim();
    let factor = cov.feature_factor();
    let mut stats = EntryStats::new(d * d);
    for _ in 0..samples {
        let x = gaussian_rows(rng, n, &factor);
        let xtx = crate::linalg::matmul(&x.transpose(), &x)?;
        let prod = crate::linalg::matmul(&crate::linalg::matmul(&xtx, m)?, &xtx)?;
        stats.push(prod.as_slice());
    }
    let (mean, se) = stats.mean_and_se();
    let scale = exact.max_abs().max(1.0);
    let mut max_z = 0.0f64;
    for i in 0..d * d {
        let diff = (mean[i] - exact.as_slice()[i]).abs();
        let z = if se[i] > 0.0 {
            diff / se[i]
        } else if diff <= 1e-12 * scale {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
    }
    Ok(MomentCheck {
        mc_mean: DenseMatrix::new(d, d, mean)?,
        std_error: DenseMatrix::new(d, d, se)?,
        exact,
        max_z,
    })
}

/// Outcome of [`gaussian_residual_stats`] for the decomposition
/// `XᵀXw/n = w + g + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    /// `E‖e‖²`.
    pub e_norm_sq: MCEstimate,
    /// `9(n+d)/n²`.
    pub bound: f64,
    /// Empirical `E[ggᵀ]` and entrywise standard errors.
    pub g_cov: DenseMatrix,
    pub g_cov_se: DenseMatrix,
    /// `‖g‖²/d`, target `1/n`.
    pub g_diag_mean: MCEstimate,
    /// Mean off-diagonal entry of `ggᵀ`, target 0.
    pub g_offdiag_mean: MCEstimate,
    /// `(wᵀg)²`, target `1/n`.
    pub g_along_w: MCEstimate,
    /// Empirical mean of `XᵀXw/n` with standard errors, target `w`.
    pub q_mean: DenseVector,
    pub q_mean_se: DenseVector,
    /// `wᵀq`, target 1.
    pub q_along_w: MCEstimate,
    /// Largest per-coordinate `|q - w|` in standard errors.
    pub q_max_z: f64,
    pub n: usize,
}

/// Monte-Carlo statistics of the coupling `XᵀXw/n = w + g + e` with
/// `g ~ N(0, I/n)` exactly and `e` a small residual.
///
/// With `h = Xw`, `P = I - wwᵀ`, an independent `v ~ N(0, I_n)` and
/// `X'ᵀ = PXᵀ + wvᵀ`, the Gaussian part is `g = X'ᵀh / (√n‖h‖)`.
pub fn gaussian_residual_stats(
    rng: &mut RngState,
    n: usize,
    d: usize,
    w_unit: &DenseVector,
    samples: usize,
) -> Result<ResidualStats, Error> {
    if w_unit.dim() != d {
        return Err(Error::Shape(format!("direction has dim {}, expected {d}", w_unit.dim())));
    }
    if (w_unit.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(format!("direction must have unit norm, got {}", w_unit.norm())));
    }
    if n == 0 || d == 0 || samples < 2 {
        return Err(Error::Domain("need n, d >= 1 and at least two samples".into()));
    }
    let nf = n as f64;
    let w = w_unit.as_slice();
    let mut e_sq = Vec::with_capacity(samples);
    let mut diag = Vec::with_capacity(samples);
    let mut offdiag = Vec::with_capacity(samples);
    let mut along = Vec::with_capacity(samples);
    let mut q_along = Vec::with_capacity(samples);
    let mut gg = EntryStats::new(d * d);
    let mut qs = EntryStats::new(d);
    let mut outer = vec![0.0; d * d];
    let ident = crate::linalg::CovarianceFactor::identity(d);
    for _ in 0..samples {
        let x = gaussian_rows(rng, n, &ident);
        let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        let h: Vec<f64> = (0..n).map(|i| crate::linalg::dot(x.row(i), w)).collect();
        let h2: f64 = h.iter().map(|t| t * t).sum();
        let hn = libm::sqrt(h2);
        let xth = x.tmatvec(&vector(h.clone()))?;
        // PXᵀh = Xᵀh - w‖h‖² since wᵀXᵀh = ‖h‖².
        let pxth: Vec<f64> = xth.as_slice().iter().zip(w).map(|(a, wi)| a - wi * h2).collect();
        let vh: f64 = v.iter().zip(&h).map(|(a, b)| a * b).sum();
        let g_raw: Vec<f64> = pxth.iter().zip(w).map(|(p, wi)| libm::sqrt(nf) * (p + wi * vh) / hn).collect();
        let g: Vec<f64> = g_raw.iter().map(|x| x / nf).collect();
        let e: Vec<f64> = (0..d).map(|i| (pxth[i] - g_raw[i] + (h2 - nf) * w[i]) / nf).collect();
        e_sq.push(e.iter().map(|x| x * x).sum());
        let g2: f64 = g.iter().map(|x| x * x).sum();
        let gs: f64 = g.iter().sum();
        diag.push(g2 / d as f64);
        if d > 1 {
            offdiag.push((gs * gs - g2) / (d * (d - 1)) as f64);
        }
        let gw: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
        along.push(gw * gw);
        for i in 0..d {
            for j in 0..d {
                outer[i * d + j] = g[i] * g[j];
            }
        }
        gg.push(&outer);
        let q: Vec<f64> = xth.as_slice().iter().map(|t| t / nf).collect();
        q_along.push(h2 / nf);
        qs.push(&q);
    }
    let (gm, gse) = gg.mean_and_se();
    let (qm, qse) = qs.mean_and_se();
    let q_max_z = (0..d).map(|i| (qm[i] - w[i]).abs() / qse[i]).fold(0.0, f64::max);
    Ok(ResidualStats {
        e_norm_sq: summarize(&e_sq),
        bound: 9.0 * (nf + d as f64) / (nf * nf),
        g_cov: DenseMatrix::new(d, d, gm)?,
        g_cov_se: DenseMatrix::new(d, d, gse)?,
        g_diag_mean: summarize(&diag),
        g_offdiag_mean: if d > 1 { summarize(&offdiag) } else { MCEstimate { mean: 0.0, std_error: 0.0, trials: samples } },
        g_along_w: summarize(&along),
        q_mean: vector(qm),
        q_mean_se: vector(qse),
        q_along_w: summarize(&q_along),
        q_max_z,
        n,
    })
}
