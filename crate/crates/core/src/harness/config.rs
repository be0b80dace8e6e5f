use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::agent::{AgentConfig, StrategyConfig};
use crate::envs::EnvId;
use crate::heads::HeadConfig;
use crate::metrics::EvalConfig;

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// One experiment: an environment, a head, training and evaluation settings
/// and the seeds to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvId,
    pub head: HeadConfig,
    /// Training hyperparameters; `agent.strategy` is the training strategy.
    #[serde(default)]
    pub agent: AgentConfig,
    /// Evaluation settings; `eval.strategy` is the testing strategy.
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run the perturbation grid on every checkpoint instead of the last only.
    #[serde(default)]
    pub perturb_every_checkpoint: bool,
    /// Keep all checkpoint files; otherwise only the final one stays on disk.
    #[serde(default = "yes")]
    pub keep_checkpoints: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Overrides `<output root>/<name>-<hash>`; not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(name: &str, env: EnvId, head: HeadConfig) -> Self {
        Self {
            name: name.into(),
            env,
            head,
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            perturb_every_checkpoint: false,
            keep_checkpoints: true,
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HarnessError::Config(format!("invalid experiment name `{}`", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        self.agent.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Hex SHA-256 over the key-sorted JSON form, without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let digest = Sha256::digest(canonical_json(&value).as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn run_dir(&self, output_root: &Path) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root.join(format!("{}-{}", self.name, self.hash())))
    }

    pub fn train_strategy(&self) -> &StrategyConfig {
        &self.agent.strategy
    }
}

/// Key-sorted, whitespace-free JSON.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).expect("string"), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Learning-rate sweep: one single-seed experiment per (lr, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    pub lrs: Vec<f64>,
    /// Defaults to the base config's seeds.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn expand(&self) -> Result<Vec<ExperimentConfig>, HarnessError> {
        if self.lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        let seeds = self.seeds.clone().unwrap_or_else(|| self.base.seeds.clone());
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &seed in &seeds {
                let mut c = self.base.clone();
                c.head.set_lr(lr);
                c.seeds = vec![seed];
                c.name = format!("{}-lr{lr:e}-s{seed}", self.base.name);
                c.output_dir = None;
                c.validate()?;
                out.push(c);
            }
        }
        Ok(out)
    }
}
