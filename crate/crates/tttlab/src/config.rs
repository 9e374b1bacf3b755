//! Flat `key = value` experiment files.
//!
//! ```text
//! # isotropic smoke run
//! n = 64
//! d = 64
//! k = 16, 32, 64      # one record per k
//! trials = 100
//! eta_policy = theory_iso
//! ```
//!
//! Vector keys (`beta`, `feature_eigs`, `task_eigs`) take either `d` values
//! or a single value broadcast to all coordinates.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use tttlab_core::linalg::{random_orthonormal, seeded_rng};
use tttlab_core::{
    CovarianceModel, DenseMatrix, DenseVector, EtaPolicy, InitPolicy, Sampler, Schedule, TaskInstance, TrialConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}, key `{}`: {}", self.key, self.message),
            None => write!(f, "key `{}`: {}", self.key, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

const KEYS: &[&str] = &[
    "n",
    "d",
    "k",
    "trials",
    "base_seed",
    "sigma",
    "beta",
    "feature_eigs",
    "task_eigs",
    "basis_seed",
    "init",
    "eta_policy",
    "eta",
    "decay",
    "steps",
    "sampler",
];

/// A parsed experiment; expands into one [`TrialConfig`] per value of `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub feature_eigs: Vec<f64>,
    pub task_eigs: Vec<f64>,
    /// Random shared eigenbasis; `None` keeps the standard basis.
    pub basis_seed: Option<u64>,
    pub init: InitPolicy,
    pub eta_policy: EtaPolicy,
    pub schedule: Schedule,
    pub sampler: Sampler,
}

struct Entry {
    line: usize,
    value: String,
}

struct Entries(HashMap<String, Entry>);

impl Entries {
    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError { line: self.0.get(key).map(|e| e.line), key: key.into(), message: message.into() }
    }

    fn scalar<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| self.err(key, format!("expected {what}, got `{}`", e.value))),
        }
    }

    fn required<T: FromStr>(&self, key: &str, what: &str) -> Result<T, ConfigError> {
        self.scalar(key, what)?.ok_or_else(|| self.err(key, "missing required key"))
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(e) = self.0.get(key) else { return Ok(None) };
        let mut out = Vec::new();
        for item in e.value.split(',') {
            let item = item.trim();
            out.push(item.parse().map_err(|_| self.err(key, format!("expected {what}, got `{item}`")))?);
        }
        Ok(Some(out))
    }

    fn vector(&self, key: &str, d: usize, default: f64) -> Result<Vec<f64>, ConfigError> {
        match self.list::<f64>(key, "a number")? {
            None => Ok(vec![default; d]),
            Some(v) if v.len() == 1 => Ok(vec![v[0]; d]),
            Some(v) if v.len() == d => Ok(v),
            Some(v) => Err(self.err(key, format!("expected 1 or d = {d} values, got {}", v.len()))),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError { line: Some(line), key: content.into(), message: "expected `key = value`".into() });
            };
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError { line: Some(line), key: key.into(), message: "unknown key".into() });
            }
            if value.is_empty() {
                return Err(ConfigError { line: Some(line), key: key.into(), message: "empty value".into() });
            }
            if let Some(prev) = map.insert(key.to_string(), Entry { line, value: value.into() }) {
                return Err(ConfigError {
                    line: Some(line),
                    key: key.into(),
                    message: format!("duplicate key (first set on line {})", prev.line),
                });
            }
        }
        let e = Entries(map);
        let count = "a nonnegative integer";
        let n: usize = e.required("n", count)?;
        let d: usize = e.required("d", count)?;
        let ks: Vec<usize> = e.list("k", count)?.ok_or_else(|| e.err("k", "missing required key"))?;
        if n == 0 {
            return Err(e.err("n", "must be at least 1"));
        }
        if d == 0 {
            return Err(e.err("d", "must be at least 1"));
        }
        let trials = e.scalar("trials", count)?.unwrap_or(2000);
        if trials == 0 {
            return Err(e.err("trials", "must be at least 1"));
        }
        let sigma = e.scalar("sigma", "a number")?.unwrap_or(0.0);
        if !(sigma >= 0.0) || !f64::is_finite(sigma) {
            return Err(e.err("sigma", "must be finite and nonnegative"));
        }
        let init = match e.scalar::<String>("init", "a name")?.as_deref() {
            None | Some("pretrained") => InitPolicy::Pretrained,
            Some("zero") => InitPolicy::Zero,
            Some(other) => return Err(e.err("init", format!("expected pretrained or zero, got `{other}`"))),
        };
        let eta: Option<f64> = e.scalar("eta", "a number")?;
        let eta_policy = match e.scalar::<String>("eta_policy", "a name")?.as_deref() {
            None | Some("theory_iso") => EtaPolicy::TheoryIso,
            Some("theory_zero") => EtaPolicy::TheoryZero,
            Some("theory_general") => EtaPolicy::TheoryGeneral,
            Some("manual") => EtaPolicy::Manual(eta.ok_or_else(|| e.err("eta_policy", "manual needs an `eta` key"))?),
            Some(other) => {
                return Err(e.err(
                    "eta_policy",
                    format!("expected theory_iso, theory_zero, theory_general or manual, got `{other}`"),
                ))
            }
        };
        if eta.is_some() && !matches!(eta_policy, EtaPolicy::Manual(_)) {
            return Err(e.err("eta", "only used with eta_policy = manual"));
        }
        let decay = e.scalar("decay", "a number")?.unwrap_or(1.0);
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(e.err("decay", "must lie in (0, 1]"));
        }
        let steps: usize = e.scalar("steps", count)?.unwrap_or(1);
        let schedule = match steps {
            0 => return Err(e.err("steps", "must be at least 1")),
            1 => Schedule::Single,
            _ => Schedule::Geometric { decay, steps },
        };
        let sampler = match e.scalar::<String>("sampler", "a name")?.as_deref() {
            None | Some("sufficient") => Sampler::Sufficient,
            Some("explicit") => Sampler::Explicit,
            Some(other) => return Err(e.err("sampler", format!("expected sufficient or explicit, got `{other}`"))),
        };
        let feature_eigs = e.vector("feature_eigs", d, 1.0)?;
        if feature_eigs.iter().any(|v| !(*v >= 0.0)) {
            return Err(e.err("feature_eigs", "eigenvalues must be nonnegative"));
        }
        let task_eigs = e.vector("task_eigs", d, 1.0)?;
        if task_eigs.iter().any(|v| !(*v >= 0.0)) {
            return Err(e.err("task_eigs", "eigenvalues must be nonnegative"));
        }
        Ok(Self {
            n,
            d,
            ks,
            trials,
            base_seed: e.scalar("base_seed", count)?.unwrap_or(0),
            sigma,
            beta: e.vector("beta", d, 1.0)?,
            feature_eigs,
            task_eigs,
            basis_seed: e.scalar("basis_seed", count)?,
            init,
            eta_policy,
            schedule,
            sampler,
        })
    }
}

impl ExperimentConfig {
    pub fn covariance(&self) -> Result<CovarianceModel, tttlab_core::Error> {
        let fe = DenseVector::new(self.feature_eigs.clone())?;
        let te = DenseVector::new(self.task_eigs.clone())?;
        match self.basis_seed {
            None => CovarianceModel::diagonal(fe, te),
            Some(s) => {
                let q: DenseMatrix = random_orthonormal(&mut seeded_rng(s), self.d)?;
                CovarianceModel::new(q, fe, te)
            }
        }
    }

    pub fn trial_configs(&self) -> Result<Vec<TrialConfig>, tttlab_core::Error> {
        let cov = self.covariance()?;
        let task = TaskInstance::new(DenseVector::new(self.beta.clone())?, self.sigma)?;
        Ok(self
            .ks
            .iter()
            .map(|&k| TrialConfig {
                cov: cov.clone(),
                task: task.clone(),
                n: self.n,
                k,
                init: self.init.clone(),
                eta_policy: self.eta_policy,
                schedule: self.schedule,
                sampler: self.sampler,
                trials: self.trials,
                base_seed: self.base_seed,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal() {
        let c: ExperimentConfig = "n = 4\nd = 3\nk = 2, 5 # two points\n".parse().unwrap();
        assert_eq!(c.ks, vec![2, 5]);
        assert_eq!(c.trials, 2000);
        assert_eq!(c.beta, vec![1.0; 3]);
        assert_eq!(c.eta_policy, EtaPolicy::TheoryIso);
        assert_eq!(c.trial_configs().unwrap().len(), 2);
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let err = "n = 4\nd = x\nk = 1".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!((err.line, err.key.as_str()), (Some(2), "d"));
        let err = "n = 4\nd = 2\nk = 1\nbeta = 1, 2, 3".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!((err.line, err.key.as_str()), (Some(4), "beta"));
        let err = "n = 4\nd = 2\nk = 1\nfoo = 3".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(err.key, "foo");
        let err = "n = 4\nd = 2\nk = 1\neta_policy = manual".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!((err.line, err.key.as_str()), (Some(4), "eta_policy"));
        let err = "n = 4\nn = 5\nd = 2\nk = 1".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = "d = 2\nk = 1".parse::<ExperimentConfig>().unwrap_err();
        assert_eq!((err.line, err.key.as_str()), (None, "n"));
    }

    #[test]
    fn schedule_and_basis() {
        let c: ExperimentConfig =
            "n = 4\nd = 2\nk = 1\nsteps = 3\ndecay = 0.5\nbasis_seed = 9\ninit = zero\neta_policy = manual\neta = 0.1"
                .parse()
                .unwrap();
        assert_eq!(c.schedule, Schedule::Geometric { decay: 0.5, steps: 3 });
        assert_eq!(c.eta_policy, EtaPolicy::Manual(0.1));
        assert!(!c.covariance().unwrap().has_identity_basis());
    }
}
