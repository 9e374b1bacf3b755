//! Randomised checks of the closed forms against independent oracles.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use tttlab_core::closed_form::{covariance_shift, population_loss, pretrained_weights_general};
use tttlab_core::linalg::{random_orthonormal, seeded_rng, trial_rng};
use tttlab_core::model::{sample_test_time_set, train_loss_gradient, ttt_step};
use tttlab_core::montecarlo::{finite_diff_gradient, gaussian_residual_stats, verify_moment_identity, MCEstimate};
use tttlab_core::{AttentionWeights, CovarianceModel, DenseMatrix, DenseVector, RngState, TaskInstance};

use crate::parallel::Runner;
use crate::AppError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Moments,
    Gradients,
    Shift,
    Eigs,
    GaussianApprox,
}

impl Suite {
    pub const EACH: [Suite; 5] = [Suite::Moments, Suite::Gradients, Suite::Shift, Suite::Eigs, Suite::GaussianApprox];

    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Moments => "moments",
            Suite::Gradients => "gradients",
            Suite::Shift => "shift",
            Suite::Eigs => "eigs",
            Suite::GaussianApprox => "gaussian_approx",
        }
    }
}

impl FromStr for Suite {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(Suite::All)
            .chain(Suite::EACH)
            .find(|x| x.name() == s)
            .ok_or_else(|| AppError::Usage(format!("unknown suite `{s}`")))
    }
}

/// One named comparison: passes when `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite: suite.name().into(), name: name.into(), value, threshold, passed: value <= threshold }
    }

    /// `|estimate - target| / (k·stderr)` against 1.
    fn within(suite: Suite, name: impl Into<String>, est: &MCEstimate, target: f64, k: f64) -> Self {
        let dev = (est.mean - target).abs();
        let z = if est.std_error > 0.0 { dev / (k * est.std_error) } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
        Self::new(suite, name, z, 1.0)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}: {:.3e} (limit {:.3e})", self.suite, self.name, self.value, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed (seed {})", self.checks.len(), failed, self.seed)
    }
}

pub fn verify(suite: Suite, seed: u64, runner: &Runner) -> Result<VerifyReport, AppError> {
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(match s {
            Suite::Moments => moments(seed, runner)?,
            Suite::Gradients => gradients(seed)?,
            Suite::Shift => shift(seed)?,
            Suite::Eigs => eigs(seed)?,
            Suite::GaussianApprox => gaussian_approx(seed, runner)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(VerifyReport { seed, passed: checks.iter().all(|c| c.passed), checks })
}

fn uniform(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn normal_vec(rng: &mut RngState, d: usize, scale: f64) -> DenseVector {
    let v: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    DenseVector::new(v).expect("d >= 1")
}

fn random_cov(rng: &mut RngState, d: usize, lx: (f64, f64), lb: (f64, f64)) -> Result<CovarianceModel, AppError> {
    let q = random_orthonormal(rng, d)?;
    let fe: Vec<f64> = (0..d).map(|_| uniform(rng, lx.0, lx.1)).collect();
    let te: Vec<f64> = (0..d).map(|_| uniform(rng, lb.0, lb.1)).collect();
    Ok(CovarianceModel::new(q, DenseVector::new(fe)?, DenseVector::new(te)?)?)
}

fn random_symmetric(rng: &mut RngState, d: usize) -> DenseMatrix {
    let a = DenseMatrix::from_fn(d, d, |_, _| uniform(rng, -1.0, 1.0));
    DenseMatrix::from_fn(d, d, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Moment identity at `d <= 4`, `n <= 6`, 10⁶ samples each: max z <= 5.
pub fn moments(seed: u64, runner: &Runner) -> Result<Vec<Check>, AppError> {
    moments_with(seed, 1_000_000, runner)
}

pub fn moments_with(seed: u64, samples: usize, runner: &Runner) -> Result<Vec<Check>, AppError> {
    // (d, n, kind): 0 = Σ = M = I, 1 = M = e₁e₁ᵀ, 2 = random Σ and M.
    let cases: [(usize, usize, u8); 5] = [(2, 3, 0), (2, 4, 1), (3, 1, 2), (4, 6, 2), (4, 2, 2)];
    let results = runner.map(&cases, |&(d, n, kind)| -> Result<Check, AppError> {
        let mut rng = trial_rng(seed, (d * 100 + n * 10 + kind as usize) as u64);
        let (cov, m, label) = match kind {
            0 => (CovarianceModel::isotropic(d), DenseMatrix::identity(d), "Sigma=I M=I"),
            1 => {
                let cov = random_cov(&mut rng, d, (0.5, 2.0), (1.0, 1.0001))?;
                let e1 = DenseVector::basis(d, 0);
                (cov, DenseMatrix::outer(&e1, &e1), "M=e1e1^T")
            }
            _ => (random_cov(&mut rng, d, (0.2, 2.0), (1.0, 1.0001))?, random_symmetric(&mut rng, d), "random Sigma, M"),
        };
        let res = verify_moment_identity(&mut rng, &cov, &m, n, samples)?;
        Ok(Check::new(Suite::Moments, format!("d={d} n={n} {label} max z"), res.max_z, 5.0))
    });
    results.into_iter().collect()
}

/// Finite differences against the analytic gradient, and rank of the step.
pub fn gradients(seed: u64) -> Result<Vec<Check>, AppError> {
    let mut rng = trial_rng(seed, 1);
    let mut checks = Vec::new();
    for i in 0..20 {
        let d = 1 + i % 5;
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=6);
        checks.extend(gradcheck(d, n, k, seed.wrapping_add(1000 + i as u64), 1e-5)?);
    }
    Ok(checks)
}

/// One random instance with `W` entries in `[-1, 1]`.
pub fn gradcheck(d: usize, n: usize, k: usize, seed: u64, epsilon: f64) -> Result<Vec<Check>, AppError> {
    if d == 0 || n == 0 {
        return Err(AppError::Usage("gradcheck needs d, n >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let cov = CovarianceModel::isotropic(d);
    let task = TaskInstance::new(normal_vec(&mut rng, d, 1.0), uniform(&mut rng, 0.0, 0.5))?;
    let set = sample_test_time_set(&mut rng, &cov, &task, n, k)?;
    let w = AttentionWeights::new(DenseMatrix::from_fn(d, d, |_, _| uniform(&mut rng, -1.0, 1.0)))?;
    let fd = finite_diff_gradient(&w, &set, epsilon)?;
    let an = train_loss_gradient(&w, &set)?;
    let err = fd.max_abs_diff(&an)?;
    let mut checks = vec![Check::new(Suite::Gradients, format!("d={d} n={n} k={k} |fd - analytic|"), err, 1e-6)];
    if d >= 2 && k >= 1 {
        let step = ttt_step(&w, &set, 0.01)?;
        let delta = step.matrix().sub(w.matrix())?;
        let mut sv: Vec<f64> = to_nalgebra(&delta).svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let ratio = if sv[0] > 0.0 { sv[1] / sv[0] } else { 0.0 };
        checks.push(Check::new(Suite::Gradients, format!("d={d} n={n} k={k} sigma2/sigma1 of step"), ratio, 1e-10));
    }
    Ok(checks)
}

/// Population loss is unchanged by absorbing `Σx` into weights and task.
pub fn shift(seed: u64) -> Result<Vec<Check>, AppError> {
    let mut rng = trial_rng(seed, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=20);
        let cov = random_cov(&mut rng, d, (0.2, 3.0), (0.0, 2.0))?;
        let w = AttentionWeights::new(DenseMatrix::from_fn(d, d, |_, _| uniform(&mut rng, -0.2, 0.2)))?;
        let task = TaskInstance::new(normal_vec(&mut rng, d, 1.0), uniform(&mut rng, 0.0, 1.0))?;
        let (wb, tb) = covariance_shift(&w, &cov, &task)?;
        let a = population_loss(&w, &cov, &task, n)?.total;
        let b = population_loss(&wb, &CovarianceModel::isotropic(d), &tb, n)?.total;
        worst = worst.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
    }
    Ok(vec![Check::new(Suite::Shift, "100 instances, max relative loss gap", worst, 1e-10)])
}

/// Eigenvalues of `Σx^{1/2} W* Σx^{1/2}` lie in `[0, 1/(n+1)]`.
pub fn eigs(seed: u64) -> Result<Vec<Check>, AppError> {
    let mut rng = trial_rng(seed, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        let sigma = uniform(&mut rng, 0.0, 1.0);
        let cov = random_cov(&mut rng, d, (0.1, 4.0), (0.0, 2.0))?;
        let w = pretrained_weights_general(&cov, n, sigma)?;
        let s = cov.feature_sqrt();
        let a = tttlab_core::linalg::matmul(&tttlab_core::linalg::matmul(&s, w.matrix())?, &s)?;
        let a = to_nalgebra(&a);
        let sym = (&a + a.transpose()) * 0.5;
        let upper = 1.0 / (n as f64 + 1.0);
        for ev in sym.symmetric_eigenvalues().iter() {
            // Distance outside the interval, relative to its width.
            let out = if *ev < 0.0 { -ev } else { (ev - upper).max(0.0) };
            worst = worst.max(out / upper);
        }
    }
    Ok(vec![Check::new(Suite::Eigs, "50 covariances, eigenvalue excursion beyond [0, 1/(n+1)]", worst, 1e-9)])
}

/// Coupling bound on `E‖e‖²` and the law of the Gaussian part.
pub fn gaussian_approx(seed: u64, runner: &Runner) -> Result<Vec<Check>, AppError> {
    gaussian_approx_with(seed, 10_000, &[(100, 50), (400, 200)], runner)
}

pub fn gaussian_approx_with(seed: u64, samples: usize, sizes: &[(usize, usize)], runner: &Runner) -> Result<Vec<Check>, AppError> {
    let results = runner.map(sizes, |&(n, d)| -> Result<Vec<Check>, AppError> {
        let mut rng = trial_rng(seed, (n * 1000 + d) as u64);
        let w = normal_vec(&mut rng, d, 1.0);
        let w = w.scaled(1.0 / w.norm());
        let st = gaussian_residual_stats(&mut rng, n, d, &w, samples)?;
        let s = Suite::GaussianApprox;
        let tag = format!("n={n} d={d}");
        let inv_n = 1.0 / n as f64;
        Ok(vec![
            Check::new(
                s,
                format!("{tag} E|e|^2 - 3 se vs 9(n+d)/n^2"),
                st.e_norm_sq.mean - 3.0 * st.e_norm_sq.std_error,
                st.bound,
            ),
            Check::within(s, format!("{tag} g: mean diagonal of ggT vs 1/n, deviation / 3 se"), &st.g_diag_mean, inv_n, 3.0),
            Check::within(s, format!("{tag} g: mean off-diagonal of ggT vs 0, deviation / 3 se"), &st.g_offdiag_mean, 0.0, 3.0),
            Check::within(s, format!("{tag} g: variance along w vs 1/n, deviation / 3 se"), &st.g_along_w, inv_n, 3.0),
            Check::within(s, format!("{tag} q: mean of wTq vs 1, deviation / 3 se"), &st.q_along_w, 1.0, 3.0),
        ])
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in std::iter::once(Suite::All).chain(Suite::EACH) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
    }

    #[test]
    fn cheap_suites_pass() {
        for checks in [gradients(3).unwrap(), shift(3).unwrap(), eigs(3).unwrap()] {
            for c in checks {
                assert!(c.passed, "{c}");
            }
        }
    }

    #[test]
    fn small_moment_run_passes() {
        let runner = Runner::new(2).unwrap();
        for c in moments_with(4, 50_000, &runner).unwrap() {
            assert!(c.passed, "{c}");
        }
    }
}
