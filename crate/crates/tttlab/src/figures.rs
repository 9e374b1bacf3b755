//! Figure sweeps. Losses in every row are divided by `‖β‖²`.
//!
//! | id    | sweep   | curves (`init` column)                                  |
//! |-------|---------|---------------------------------------------------------|
//! | fig1a | `alpha` | `pretrained_gamma_{1,2,100}`                            |
//! | fig1b | `gamma` | `pretrained`, `zero`                                    |
//! | fig2a | `gamma` | `pretrained_cov1`, `pretrained_cov2`, `zero`            |
//! | fig2b | `gamma` | `pretrained_best`, `pretrained_worst`, `zero`           |
//! | fig2c | `step`  | `pretrained_decay_{1,0.75,0.5,0.25}`, steps 0..=10      |

use std::fmt;
use std::str::FromStr;

use tttlab_core::{
    CovarianceModel, DenseVector, EtaPolicy, InitPolicy, MCEstimate, Sampler, Schedule, TaskInstance, TrialConfig,
};

use crate::parallel::Runner;
use crate::records::SweepRecord;
use crate::AppError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureId {
    Fig1a,
    Fig1b,
    Fig2a,
    Fig2b,
    Fig2c,
}

impl FigureId {
    pub const ALL: [FigureId; 5] = [FigureId::Fig1a, FigureId::Fig1b, FigureId::Fig2a, FigureId::Fig2b, FigureId::Fig2c];

    pub fn name(self) -> &'static str {
        match self {
            FigureId::Fig1a => "fig1a",
            FigureId::Fig1b => "fig1b",
            FigureId::Fig2a => "fig2a",
            FigureId::Fig2b => "fig2b",
            FigureId::Fig2c => "fig2c",
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FigureId {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| AppError::Usage(format!("unknown figure `{s}` (fig1a, fig1b, fig2a, fig2b, fig2c)")))
    }
}

pub const FIG1A_GAMMAS: [f64; 3] = [1.0, 2.0, 100.0];
pub const FIG2C_DECAYS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];
pub const FIG2C_STEPS: usize = 10;

/// Shrinks a full-scale dimension, never below 8.
pub fn scaled(x: usize, scale: f64) -> usize {
    ((x as f64 * scale).round() as usize).max(8)
}

/// Context size and the `k` grid `round(4n·j/20)`, `j = 0..=20`.
fn k_grid(n: usize) -> Vec<usize> {
    (0..=20).map(|j| (4.0 * n as f64 * j as f64 / 20.0).round() as usize).collect()
}

struct Sweep<'a> {
    runner: &'a Runner,
    trials: usize,
    seed: u64,
}

impl Sweep<'_> {
    fn config(&self, cov: &CovarianceModel, task: &TaskInstance, n: usize, k: usize) -> TrialConfig {
        let mut cfg = TrialConfig::new(cov.clone(), task.clone(), n, k);
        cfg.trials = self.trials;
        cfg.base_seed = self.seed;
        cfg.sampler = Sampler::Sufficient;
        cfg
    }

    fn record(&self, cfg: &TrialConfig, sweep_var: &str, value: f64, label: String, est: MCEstimate, theory: Option<f64>) -> SweepRecord {
        let b2 = cfg.task.beta().norm_sq();
        let norm = if b2 > 0.0 { b2 } else { 1.0 };
        SweepRecord {
            sweep_var: sweep_var.into(),
            value,
            loss_theory: theory.map(|t| t / norm),
            loss_mc_mean: est.mean / norm,
            loss_mc_stderr: est.std_error / norm,
            init: label,
            n: cfg.n,
            d: cfg.d(),
            k: cfg.k,
            sigma: cfg.task.sigma(),
            seed: cfg.base_seed,
        }
    }

    fn point(&self, cfg: &TrialConfig, sweep_var: &str, value: f64, label: String) -> Result<SweepRecord, AppError> {
        let est = self.runner.estimate(cfg)?;
        Ok(self.record(cfg, sweep_var, value, label, est, cfg.theory_loss()))
    }
}

pub fn run_figure(id: FigureId, scale: f64, trials: usize, seed: u64, runner: &Runner) -> Result<Vec<SweepRecord>, AppError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(AppError::Usage(format!("scale {scale} must lie in (0, 1]")));
    }
    if trials == 0 {
        return Err(AppError::Usage("trials must be at least 1".into()));
    }
    let sweep = Sweep { runner, trials, seed };
    match id {
        FigureId::Fig1a => fig1a(&sweep, scale),
        FigureId::Fig1b => fig1b(&sweep, scale),
        FigureId::Fig2a => fig2a(&sweep, scale),
        FigureId::Fig2b => fig2b(&sweep, scale),
        FigureId::Fig2c => fig2c(&sweep, scale),
    }
}

fn ones_task(d: usize) -> TaskInstance {
    TaskInstance::noiseless(DenseVector::filled(d, 1.0)).expect("finite")
}

fn gamma_label(g: f64) -> String {
    format!("pretrained_gamma_{g}")
}

fn fig1a(s: &Sweep, scale: f64) -> Result<Vec<SweepRecord>, AppError> {
    let n = scaled(300, scale);
    let mut out = Vec::new();
    for gamma in FIG1A_GAMMAS {
        for j in 1..=40 {
            let alpha = j as f64 / 10.0;
            let d = ((n as f64 / alpha).round() as usize).max(8);
            let k = (gamma * d as f64).round() as usize;
            let cfg = s.config(&CovarianceModel::isotropic(d), &ones_task(d), n, k);
            out.push(s.point(&cfg, "alpha", alpha, gamma_label(gamma))?);
        }
    }
    Ok(out)
}

fn fig1b(s: &Sweep, scale: f64) -> Result<Vec<SweepRecord>, AppError> {
    let (n, d) = (scaled(200, scale), scaled(400, scale));
    let cov = CovarianceModel::isotropic(d);
    let task = ones_task(d);
    let mut out = Vec::new();
    for (label, init, policy) in
        [("pretrained", InitPolicy::Pretrained, EtaPolicy::TheoryIso), ("zero", InitPolicy::Zero, EtaPolicy::TheoryZero)]
    {
        for k in k_grid(n) {
            let mut cfg = s.config(&cov, &task, n, k);
            cfg.init = init.clone();
            cfg.eta_policy = policy;
            out.push(s.point(&cfg, "gamma", k as f64 / d as f64, label.into())?);
        }
    }
    Ok(out)
}

/// Curves that share `Σx = I`, the task, and the general step-size rule.
fn general_curves(
    s: &Sweep,
    n: usize,
    task: &TaskInstance,
    curves: &[(&str, InitPolicy, CovarianceModel)],
) -> Result<Vec<SweepRecord>, AppError> {
    let d = task.dim();
    let mut out = Vec::new();
    for (label, init, cov) in curves {
        for k in k_grid(n) {
            let mut cfg = s.config(cov, task, n, k);
            cfg.init = init.clone();
            cfg.eta_policy = EtaPolicy::TheoryGeneral;
            out.push(s.point(&cfg, "gamma", k as f64 / d as f64, (*label).into())?);
        }
    }
    Ok(out)
}

fn task_cov(task_eigs: Vec<f64>) -> CovarianceModel {
    let d = task_eigs.len();
    CovarianceModel::diagonal(DenseVector::filled(d, 1.0), DenseVector::new(task_eigs).expect("d >= 1")).expect("valid")
}

fn fig2a(s: &Sweep, scale: f64) -> Result<Vec<SweepRecord>, AppError> {
    let (n, d) = (scaled(300, scale), scaled(600, scale));
    let h = d / 2;
    let split = |a: f64, b: f64| (0..d).map(|i| if i < h { a } else { b }).collect::<Vec<f64>>();
    let task = TaskInstance::noiseless(DenseVector::new(split(1.0, 0.5)).expect("d >= 1")).expect("finite");
    general_curves(
        s,
        n,
        &task,
        &[
            ("pretrained_cov1", InitPolicy::Pretrained, task_cov(split(1.0, 0.5))),
            ("pretrained_cov2", InitPolicy::Pretrained, task_cov(split(0.5, 1.0))),
            ("zero", InitPolicy::Zero, CovarianceModel::isotropic(d)),
        ],
    )
}

fn fig2b(s: &Sweep, scale: f64) -> Result<Vec<SweepRecord>, AppError> {
    let (n, d) = (scaled(250, scale), scaled(500, scale));
    let first = |a: f64, b: f64| (0..d).map(|i| if i == 0 { a } else { b }).collect::<Vec<f64>>();
    let task = TaskInstance::noiseless(DenseVector::basis(d, 0)).expect("finite");
    general_curves(
        s,
        n,
        &task,
        &[
            ("pretrained_best", InitPolicy::Pretrained, task_cov(first(1.0, 0.0))),
            ("pretrained_worst", InitPolicy::Pretrained, task_cov(first(0.0, 1.0))),
            ("zero", InitPolicy::Zero, CovarianceModel::isotropic(d)),
        ],
    )
}

fn fig2c(s: &Sweep, scale: f64) -> Result<Vec<SweepRecord>, AppError> {
    let (n, d) = (scaled(50, scale), scaled(100, scale));
    let k = 50 * d;
    let cov = CovarianceModel::isotropic(d);
    let task = ones_task(d);
    let mut out = Vec::new();
    for decay in FIG2C_DECAYS {
        let label = format!("pretrained_decay_{decay}");
        let mut cfg = s.config(&cov, &task, n, k);
        let single = cfg.theory_loss();
        let w0 = cfg.initial_weights()?;
        let initial = tttlab_core::closed_form::population_loss(&w0, &cov, &task, n)?.total;
        let zero_step = MCEstimate { mean: initial, std_error: 0.0, trials: s.trials };
        out.push(s.record(&cfg, "step", 0.0, label.clone(), zero_step, Some(initial)));
        cfg.schedule = Schedule::Geometric { decay, steps: FIG2C_STEPS };
        for (t, est) in s.runner.estimate_path(&cfg)?.into_iter().enumerate() {
            let theory = if t == 0 { single } else { None };
            out.push(s.record(&cfg, "step", (t + 1) as f64, label.clone(), est, theory));
        }
    }
    Ok(out)
}

/// First sweep value where curve `first` rises above curve `second`, by
/// linear interpolation of the gap between grid points.
pub fn crossing(records: &[SweepRecord], first: &str, second: &str, use_theory: bool) -> Option<f64> {
    let pick = |label: &str| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter(|r| r.init == label)
            .map(|r| (r.value, if use_theory { r.loss_theory.unwrap_or(f64::NAN) } else { r.loss_mc_mean }))
            .collect()
    };
    let (a, b) = (pick(first), pick(second));
    let gaps: Vec<(f64, f64)> = a.iter().zip(&b).map(|((x, la), (_, lb))| (*x, la - lb)).collect();
    gaps.windows(2).find_map(|w| {
        let ((x0, g0), (x1, g1)) = (w[0], w[1]);
        (g0 <= 0.0 && g1 > 0.0).then(|| x0 + (x1 - x0) * (-g0) / (g1 - g0))
    })
}
