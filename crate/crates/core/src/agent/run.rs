use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Agent, AgentConfig, AgentError, Checkpoint, TrainOutcome, Transition};
use crate::envs::{Env, EnvId, Environment};
use crate::heads::{AnyHead, Head, HeadConfig};

/// Per-step record; `reward` is the episode return so far and the
/// uncertainties belong to the selected action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub episode_idx: usize,
    pub reward: f64,
    pub alea_raw: f64,
    pub epist_raw: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_idx: usize,
    pub start_step: usize,
    pub length: usize,
    pub total_reward: f64,
    /// False when the episode hit the step cap (or training ended mid-episode).
    pub terminal: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Finished episodes only.
    pub episodes: Vec<EpisodeRecord>,
}

impl RunLog {
    pub fn finished_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn write_csv(&self, dir: &Path) -> Result<(), AgentError> {
        write_records(&dir.join("runlog.csv"), &self.steps)?;
        write_records(&dir.join("episodes.csv"), &self.episodes)
    }

    pub fn read_csv(dir: &Path) -> Result<Self, AgentError> {
        Ok(Self {
            steps: read_records(&dir.join("runlog.csv"))?,
            episodes: read_records(&dir.join("episodes.csv"))?,
        })
    }
}

fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AgentError> {
    let io = |e: String| AgentError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(e.to_string()))?;
    }
    w.flush().map_err(|e| io(e.to_string()))
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AgentError> {
    let io = |e: String| AgentError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| io(e.to_string()))).collect()
}

/// `count` evenly spaced step indices ending at `max_steps`.
pub fn checkpoint_steps(max_steps: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|k| k * max_steps / count).collect()
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: RunLog,
    pub final_checkpoint: Checkpoint,
    pub checkpoint_steps: Vec<usize>,
}

/// Trains one agent. Every checkpoint is handed to `on_checkpoint`; only the
/// last is kept in memory. A non-finite loss aborts with the partial log.
pub fn run_training(
    env_id: EnvId,
    head_config: &HeadConfig,
    config: &AgentConfig,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<(), AgentError>,
) -> Result<RunOutput, AgentError> {
    config.validate()?;
    let mut env = Env::new(env_id, derive_seed(seed, 0));
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut act_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let head = AnyHead::new(
        head_config,
        env_id.obs_dim(),
        env_id.num_actions(),
        config.replay_capacity,
        &mut init_rng,
    )?;
    let mut agent = Agent::new(config.clone(), head)?;
    let ckpt_steps = checkpoint_steps(config.max_train_steps, config.checkpoint_count);
    let mut next_ckpt = 0;
    let mut last_ckpt = None;
    let mut log = RunLog::default();

    let mut state = env.reset();
    let mut episode = 0;
    let mut ep_start = 0;
    let mut ep_return = 0.0;
    for step in 0..config.max_train_steps {
        let (action, pred) = agent.act(&state, step, &mut act_rng)?;
        let out = env.step(action)?;
        ep_return += out.reward;
        agent.buffer.push(Transition {
            state: std::mem::take(&mut state),
            action,
            reward: out.reward,
            next_state: out.observation.clone(),
            terminal: out.terminal && !out.truncated,
        });
        let loss = match agent.train_step(&mut sample_rng, &mut train_rng) {
            Ok(TrainOutcome::Trained { loss, .. }) => Some(loss),
            Ok(TrainOutcome::Skipped) => None,
            Err(e) => {
                return Err(AgentError::Diverged {
                    step,
                    reason: e.to_string(),
                    partial: Box::new(log),
                })
            }
        };
        log.steps.push(StepRecord {
            step,
            episode_idx: episode,
            reward: ep_return,
            alea_raw: pred.aleatoric.get(0, action),
            epist_raw: pred.epistemic.get(0, action),
            loss,
            epsilon: config.strategy.logged_epsilon(step),
        });
        if out.terminal {
            log.episodes.push(EpisodeRecord {
                episode_idx: episode,
                start_step: ep_start,
                length: step + 1 - ep_start,
                total_reward: ep_return,
                terminal: !out.truncated,
            });
            episode += 1;
            ep_start = step + 1;
            ep_return = 0.0;
            state = env.reset();
        } else {
            state = out.observation;
        }
        if next_ckpt < ckpt_steps.len() && step + 1 == ckpt_steps[next_ckpt] {
            let ck = Checkpoint {
                index: next_ckpt + 1,
                step: step + 1,
                snapshot: agent.online.snapshot(),
            };
            on_checkpoint(&ck)?;
            last_ckpt = Some(ck);
            next_ckpt += 1;
        }
    }
    Ok(RunOutput {
        log,
        final_checkpoint: last_ckpt.expect("checkpoint_count >= 1"),
        checkpoint_steps: ckpt_steps,
    })
}
