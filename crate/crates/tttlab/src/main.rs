use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use tttlab::config::ExperimentConfig;
use tttlab::figures::{run_figure, FigureId};
use tttlab::parallel::Runner;
use tttlab::records::{emit, Format, SweepRecord};
use tttlab::verify::{gradcheck, verify, Suite, VerifyReport};
use tttlab::AppError;

/// Closed-form and Monte-Carlo test-time training for linear attention.
#[derive(Parser)]
#[command(name = "tttlab", version)]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "csv", value_parser = parse_format)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the single-step prediction for each `k` of a config.
    Theory { config: PathBuf },
    /// Monte-Carlo estimate for each `k` of a config.
    Simulate {
        config: PathBuf,
        /// Overrides `trials` in the config.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides `base_seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate a figure sweep.
    Figure {
        #[arg(value_parser = parse_figure)]
        id: FigureId,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run verification suites; exit code 2 on any failure.
    Verify {
        #[arg(default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the TTT gradient on one random set.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: AppError| e.to_string())
}

fn parse_figure(s: &str) -> Result<FigureId, String> {
    s.parse().map_err(|e: AppError| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: AppError| e.to_string())
}

fn load(path: &Path) -> Result<ExperimentConfig, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::Usage(format!("cannot read {}: {e}", path.display())))?;
    text.parse().map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TheoryRow {
    k: usize,
    regime: &'static str,
    eta_star: f64,
    initial_loss: f64,
    predicted_improvement: f64,
    predicted_final_loss: f64,
}

fn write_text(out: Option<&Path>, text: &str) -> Result<(), AppError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| AppError::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn theory(cfg: &ExperimentConfig, out: Option<&Path>, format: Format) -> Result<(), AppError> {
    let mut rows = Vec::new();
    for tc in cfg.trial_configs()? {
        let r = tc.theory_report()?;
        rows.push(TheoryRow {
            k: tc.k,
            regime: r.regime.name(),
            eta_star: r.eta_star,
            initial_loss: r.initial_loss,
            predicted_improvement: r.predicted_improvement,
            predicted_final_loss: r.predicted_final_loss,
        });
    }
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&rows).map_err(|e| AppError::Usage(e.to_string()))? + "\n",
        Format::Csv => {
            let mut s = String::from("k,regime,eta_star,initial_loss,predicted_improvement,predicted_final_loss\n");
            for r in &rows {
                s += &format!(
                    "{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                    r.k, r.regime, r.eta_star, r.initial_loss, r.predicted_improvement, r.predicted_final_loss
                );
            }
            s
        }
    };
    write_text(out, &text)
}

fn simulate(cfg: &ExperimentConfig, runner: &Runner) -> Result<Vec<SweepRecord>, AppError> {
    let mut records = Vec::new();
    for tc in cfg.trial_configs()? {
        let est = runner.estimate(&tc)?;
        records.push(SweepRecord {
            sweep_var: "k".into(),
            value: tc.k as f64,
            loss_theory: tc.theory_loss(),
            loss_mc_mean: est.mean,
            loss_mc_stderr: est.std_error,
            init: tc.init.name().into(),
            n: tc.n,
            d: tc.d(),
            k: tc.k,
            sigma: tc.task.sigma(),
            seed: tc.base_seed,
        });
    }
    Ok(records)
}

fn report(r: &VerifyReport, out: Option<&Path>, format: Format) -> Result<(), AppError> {
    let json = serde_json::to_string_pretty(r).map_err(|e| AppError::Usage(e.to_string()))? + "\n";
    match (format, out) {
        (Format::Json, _) => write_text(out, &json)?,
        (Format::Csv, Some(p)) => {
            println!("{r}");
            write_text(Some(p), &json)?;
        }
        (Format::Csv, None) => println!("{r}"),
    }
    if r.passed {
        Ok(())
    } else {
        Err(AppError::Verification(format!("{} check(s) failed", r.failures().count())))
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let out = cli.out.as_deref();
    let runner = Runner::new(cli.threads)?;
    match cli.command {
        Command::Theory { config } => theory(&load(&config)?, out, cli.format),
        Command::Simulate { config, trials, seed } => {
            let mut cfg = load(&config)?;
            if let Some(t) = trials {
                if t == 0 {
                    return Err(AppError::Usage("--trials must be at least 1".into()));
                }
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            emit(out, &simulate(&cfg, &runner)?, cli.format)
        }
        Command::Figure { id, scale, trials, seed } => emit(out, &run_figure(id, scale, trials, seed, &runner)?, cli.format),
        Command::Verify { suite, seed } => report(&verify(suite, seed, &runner)?, out, cli.format),
        Command::Gradcheck { d, n, k, seed, epsilon } => {
            let checks = gradcheck(d, n, k, seed, epsilon)?;
            report(&VerifyReport { seed, passed: checks.iter().all(|c| c.passed), checks }, out, cli.format)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
