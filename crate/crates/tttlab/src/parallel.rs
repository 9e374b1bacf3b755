//! Runs independent trials on a rayon pool.
//!
//! Per-trial losses come back in index order and are reduced serially, so
//! the pool size never changes a result.

use rayon::prelude::*;
use rayon::ThreadPool;
use tttlab_core::montecarlo::{summarize, summarize_paths};
use tttlab_core::{MCEstimate, TrialConfig};

use crate::AppError;

pub struct Runner {
    pool: ThreadPool,
}

impl Runner {
    /// `threads = 0` lets rayon pick.
    pub fn new(threads: usize) -> Result<Self, AppError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| AppError::Usage(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn estimate(&self, cfg: &TrialConfig) -> Result<MCEstimate, AppError> {
        let prepared = cfg.prepare()?;
        let losses: Vec<f64> = self.pool.install(|| {
            (0..cfg.trials).into_par_iter().map(|t| prepared.trial_loss(t)).collect::<Result<_, _>>()
        })?;
        Ok(summarize(&losses))
    }

    /// One estimate per step of the configured schedule.
    pub fn estimate_path(&self, cfg: &TrialConfig) -> Result<Vec<MCEstimate>, AppError> {
        let prepared = cfg.prepare()?;
        let paths: Vec<Vec<f64>> = self.pool.install(|| {
            (0..cfg.trials).into_par_iter().map(|t| prepared.trial_path(t)).collect::<Result<_, _>>()
        })?;
        Ok(summarize_paths(&paths))
    }

    /// Runs `f` over `items` in parallel, keeping input order.
    pub fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}
