//! Experiment front end: TOML configs, seed and learning-rate sweeps, run
//! orchestration with on-disk artifacts, and plot-data emission.
//!
//! Layout of one experiment directory:
//!
//! ```text
//! <run dir>/config.toml
//! <run dir>/manifest.json            written last, atomically
//! <run dir>/seed-<s>/IN_PROGRESS     present only while the seed runs
//! <run dir>/seed-<s>/runlog.csv, episodes.csv
//! <run dir>/seed-<s>/checkpoints/ckpt-XX.bin
//! <run dir>/seed-<s>/eval/ckpt-XX.json, ckpt-XX_episodes.csv
//! ```

mod config;
mod plot;

pub use config::{canonical_json, ExperimentConfig, GridSpec};
pub use plot::{
    emit_plot_data, plot_panels, training_reward_curve, uncertainty_curve, FigureKind, PlotPanel, PlotSeries,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{derive_seed, run_training, write_atomic, AgentError, Checkpoint, RunLog, StrategyKind};
use crate::envs::EnvId;
use crate::heads::HeadKind;
use crate::metrics::{evaluate_checkpoint, EvalOutput, EvalReport, MetricsError};

pub const OUTPUT_ROOT_VAR: &str = "UQDQN_OUTPUT_ROOT";
pub const WORKERS_VAR: &str = "UQDQN_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IN_PROGRESS_FILE: &str = "IN_PROGRESS";

// evaluation seed stream under the run seed
const EVAL_STREAM: u64 = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// `$UQDQN_OUTPUT_ROOT`, defaulting to `runs`.
pub fn output_root_from_env() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `$UQDQN_WORKERS`, defaulting to the available parallelism.
pub fn workers_from_env() -> Result<usize, HarnessError> {
    match std::env::var(WORKERS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(HarnessError::Config(format!("{WORKERS_VAR} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum SeedStatus {
    Completed,
    Failed { error: String },
}

/// Artifacts of one seed; paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub status: SeedStatus,
    pub runlog: Option<String>,
    pub episodes: Option<String>,
    pub checkpoint_steps: Vec<usize>,
    pub checkpoints: Vec<String>,
    pub evals: Vec<String>,
}

impl SeedRecord {
    pub fn completed(&self) -> bool {
        self.status == SeedStatus::Completed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    pub env: EnvId,
    pub head: HeadKind,
    pub train_strategy: StrategyKind,
    pub test_strategy: StrategyKind,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    /// Directory the relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let mut m: Self = serde_json::from_slice(&bytes).map_err(|e| io_err(&path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn completed(&self) -> impl Iterator<Item = &SeedRecord> {
        self.seeds.iter().filter(|s| s.completed())
    }

    pub fn run_log(&self, rec: &SeedRecord) -> Result<RunLog, HarnessError> {
        let dir = self.path(rec.runlog.as_deref().ok_or_else(|| missing(rec))?);
        let dir = dir.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(RunLog::read_csv(&dir)?)
    }

    pub fn eval_reports(&self, rec: &SeedRecord) -> Result<Vec<EvalReport>, HarnessError> {
        rec.evals.iter().map(|p| Ok(EvalOutput::read_report(&self.path(p))?)).collect()
    }

    pub fn final_report(&self, rec: &SeedRecord) -> Result<EvalReport, HarnessError> {
        let p = rec.evals.last().ok_or_else(|| missing(rec))?;
        Ok(EvalOutput::read_report(&self.path(p))?)
    }

    pub fn final_checkpoint(&self, rec: &SeedRecord) -> Result<Checkpoint, HarnessError> {
        let p = rec.checkpoints.last().ok_or_else(|| missing(rec))?;
        Ok(Checkpoint::load(&self.path(p))?.0)
    }
}

fn missing(rec: &SeedRecord) -> HarnessError {
    HarnessError::Config(format!("seed {} has no artifacts ({:?})", rec.seed, rec.status))
}

fn ckpt_name(index: usize) -> String {
    format!("ckpt-{index:02}")
}

fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> SeedRecord {
    let rel = format!("seed-{seed}");
    let seed_dir = dir.join(&rel);
    let mut rec = SeedRecord {
        seed,
        status: SeedStatus::Completed,
        runlog: None,
        episodes: None,
        checkpoint_steps: Vec::new(),
        checkpoints: Vec::new(),
        evals: Vec::new(),
    };
    let result = (|| -> Result<(), HarnessError> {
        if seed_dir.exists() {
            std::fs::remove_dir_all(&seed_dir).map_err(|e| io_err(&seed_dir, e))?;
        }
        std::fs::create_dir_all(&seed_dir).map_err(|e| io_err(&seed_dir, e))?;
        let marker = seed_dir.join(IN_PROGRESS_FILE);
        std::fs::write(&marker, b"").map_err(|e| io_err(&marker, e))?;

        let hash = config.hash();
        let eval_seed = derive_seed(seed, EVAL_STREAM);
        let count = config.agent.checkpoint_count;
        let mut saved: Vec<String> = Vec::new();
        let mut on_ckpt = |ck: &Checkpoint| -> Result<(), AgentError> {
            let name = ckpt_name(ck.index);
            let ck_rel = format!("{rel}/checkpoints/{name}.bin");
            ck.save(&dir.join(&ck_rel), &hash)?;
            if !config.keep_checkpoints {
                if let Some(prev) = saved.pop() {
                    std::fs::remove_file(dir.join(&prev)).map_err(|e| AgentError::Io(e.to_string()))?;
                }
            }
            saved.push(ck_rel);
            let perturb = config.perturb_every_checkpoint || ck.index == count;
            let out = evaluate_checkpoint(ck, config.env, &config.eval, eval_seed, perturb)
                .map_err(|e| AgentError::Config(format!("evaluating checkpoint {}: {e}", ck.index)))?;
            out.write(&seed_dir.join("eval"), &name)
                .map_err(|e| AgentError::Io(format!("writing evaluation {}: {e}", ck.index)))?;
            rec.evals.push(format!("{rel}/eval/{name}.json"));
            Ok(())
        };
        let outcome = run_training(config.env, &config.head, &config.agent, seed, &mut on_ckpt);
        rec.checkpoints = saved;
        let out = match outcome {
            Ok(out) => out,
            Err(AgentError::Diverged { step, reason, partial }) => {
                partial.write_csv(&seed_dir)?;
                rec.runlog = Some(format!("{rel}/runlog.csv"));
                rec.episodes = Some(format!("{rel}/episodes.csv"));
                return Err(HarnessError::Config(format!("diverged at step {step}: {reason}")));
            }
            Err(e) => return Err(e.into()),
        };
        out.log.write_csv(&seed_dir)?;
        rec.runlog = Some(format!("{rel}/runlog.csv"));
        rec.episodes = Some(format!("{rel}/episodes.csv"));
        rec.checkpoint_steps = out.checkpoint_steps;
        std::fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("{} seed {seed} failed: {e}", config.name);
        rec.status = SeedStatus::Failed { error: e.to_string() };
    }
    rec
}

/// Trains, checkpoints and evaluates every seed, then writes the manifest.
///
/// A failing seed is recorded in the manifest without stopping the others.
/// Seeds run on a pool of `workers` threads; artifacts do not depend on it.
pub fn run_experiment(
    config: &ExperimentConfig,
    output_root: &Path,
    workers: usize,
) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let dir = config.run_dir(output_root);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    }
    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let seeds: Vec<SeedRecord> = pool.install(|| {
        use rayon::prelude::*;
        config.seeds.par_iter().map(|&s| run_seed(config, s, &dir)).collect()
    });

    let manifest = RunManifest {
        name: config.name.clone(),
        config_hash: config.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        env: config.env,
        head: config.head.kind(),
        train_strategy: config.agent.strategy.kind,
        test_strategy: config.eval.strategy.kind,
        config: config.clone(),
        seeds,
        root: dir.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    write_atomic(&manifest_path, &json)?;
    Ok(manifest)
}

/// Runs every configuration of a learning-rate grid.
pub fn run_grid(spec: &GridSpec, output_root: &Path, workers: usize) -> Result<Vec<RunManifest>, HarnessError> {
    spec.expand()?.iter().map(|c| run_experiment(c, output_root, workers)).collect()
}

/// Re-evaluates every stored checkpoint of a manifest in place.
pub fn reevaluate(manifest: &RunManifest, perturb_all: bool) -> Result<Vec<EvalReport>, HarnessError> {
    let mut reports = Vec::new();
    for rec in manifest.completed() {
        let eval_seed = derive_seed(rec.seed, EVAL_STREAM);
        let n = rec.checkpoints.len();
        for (i, p) in rec.checkpoints.iter().enumerate() {
            let (ck, _) = Checkpoint::load(&manifest.path(p))?;
            let perturb = perturb_all || i + 1 == n;
            let out = evaluate_checkpoint(&ck, manifest.env, &manifest.config.eval, eval_seed, perturb)?;
            let dir = manifest.path(&format!("seed-{}/eval", rec.seed));
            out.write(&dir, &ckpt_name(ck.index))?;
            reports.push(out.report);
        }
    }
    Ok(reports)
}
