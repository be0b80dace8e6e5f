//! DQN training loop generic over any uncertainty head: replay, TD targets,
//! target-network synchronization, action-selection strategies, checkpoints.

mod checkpoint;
mod replay;
mod run;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION, MAGIC};
pub use replay::{batch_of, ReplayBuffer, Transition};
pub use run::{checkpoint_steps, run_training, EpisodeRecord, RunLog, RunOutput, StepRecord};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvError;
use crate::heads::{argmax, Batch, Head, HeadError, Prediction};
use crate::ndcore::Tensor;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        partial: Box<RunLog>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Argmax of the predictive mean; meant for evaluation.
    Greedy,
    EpsilonGreedy,
    SamplingAleatoric,
    SamplingEpistemic,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Greedy => "greedy",
            StrategyKind::EpsilonGreedy => "epsilon_greedy",
            StrategyKind::SamplingAleatoric => "sampling_aleatoric",
            StrategyKind::SamplingEpistemic => "sampling_epistemic",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "greedy" => Ok(Self::Greedy),
            "epsilon_greedy" => Ok(Self::EpsilonGreedy),
            "sampling_aleatoric" => Ok(Self::SamplingAleatoric),
            "sampling_epistemic" => Ok(Self::SamplingEpistemic),
            other => Err(AgentError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::EpsilonGreedy,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_steps: 1000,
        }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let ok = (0.0..=1.0).contains(&self.eps_start)
            && (0.0..=1.0).contains(&self.eps_end)
            && self.eps_end <= self.eps_start;
        if !ok {
            return Err(AgentError::Config(format!(
                "epsilon schedule {} -> {} is invalid",
                self.eps_start, self.eps_end
            )));
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`, then flat.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    /// ε reported for logging; the sampling strategies use no ε.
    pub fn logged_epsilon(&self, step: usize) -> f64 {
        match self.kind {
            StrategyKind::EpsilonGreedy => self.epsilon(step),
            _ => 0.0,
        }
    }
}

/// Picks an action for state `row` of `pred`.
pub fn select_action(
    pred: &Prediction,
    row: usize,
    strategy: &StrategyConfig,
    step: usize,
    rng: &mut dyn RngCore,
) -> usize {
    match strategy.kind {
        StrategyKind::Greedy => pred.greedy(row),
        StrategyKind::EpsilonGreedy => {
            if rng.random::<f64>() < strategy.epsilon(step) {
                rng.random_range(0..pred.num_actions())
            } else {
                pred.greedy(row)
            }
        }
        StrategyKind::SamplingAleatoric => argmax(&pred.sample_aleatoric(row, rng)),
        StrategyKind::SamplingEpistemic => argmax(&pred.sample_epistemic(row, rng)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub target_sync_every: usize,
    /// Environment steps; each is followed by one gradient step once learning starts.
    pub max_train_steps: usize,
    pub checkpoint_count: usize,
    /// Buffer size at which the head is initialized from data and learning begins
    /// (0 means `batch_size`).
    pub learning_starts: usize,
    pub strategy: StrategyConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 16,
            replay_capacity: 1000,
            target_sync_every: 10,
            max_train_steps: 13_000,
            checkpoint_count: 20,
            learning_starts: 0,
            strategy: StrategyConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let err = |m: String| Err(AgentError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_every == 0 {
            return err("batch_size, replay_capacity and target_sync_every must be positive".into());
        }
        if self.checkpoint_count == 0 || self.checkpoint_count > self.max_train_steps {
            return err(format!(
                "checkpoint_count {} must be in 1..={}",
                self.checkpoint_count, self.max_train_steps
            ));
        }
        if self.learning_start() > self.replay_capacity {
            return err("learning_starts exceeds replay capacity".into());
        }
        self.strategy.validate()
    }

    pub fn learning_start(&self) -> usize {
        if self.learning_starts == 0 {
            self.batch_size
        } else {
            self.learning_starts
        }
    }
}

/// `y_i = r_i` on terminal transitions, else `r_i + γ·max_a next_means[i, a]`.
pub fn td_targets(next_means: &Tensor, rewards: &[f64], terminals: &[bool], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(terminals)
        .enumerate()
        .map(|(i, (&r, &done))| {
            if done {
                r
            } else {
                let row = next_means.row_slice(i);
                r + gamma * row[argmax(row)]
            }
        })
        .collect()
}

/// Online head, its target copy and the replay buffer.
#[derive(Clone, Debug)]
pub struct Agent<H: Head> {
    pub config: AgentConfig,
    pub online: H,
    pub target: H,
    pub buffer: ReplayBuffer,
    train_steps: usize,
    initialized: bool,
}

/// Result of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainOutcome {
    /// Buffer below the learning threshold; nothing happened.
    Skipped,
    Trained { loss: f64, synced: bool },
}

impl<H: Head> Agent<H> {
    pub fn new(config: AgentConfig, head: H) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.replay_capacity),
            target: head.clone(),
            online: head,
            config,
            train_steps: 0,
            initialized: false,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn act(
        &self,
        state: &[f64],
        step: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(usize, Prediction), AgentError> {
        let s = Tensor::from_rows(&[state.to_vec()]).map_err(HeadError::from)?;
        let pred = self.online.predict(&s, rng)?;
        let a = select_action(&pred, 0, &self.config.strategy, step, rng);
        Ok((a, pred))
    }

    /// TD targets for training unit `unit` from the target head.
    pub fn targets(&self, unit: usize, batch: &Batch, rng: &mut dyn RngCore) -> Result<Vec<f64>, AgentError> {
        let next = self.target.target_means(unit, &batch.next_states, rng)?;
        Ok(td_targets(&next, &batch.rewards, &batch.terminals, self.config.gamma))
    }

    /// One gradient step per training unit (fresh batch each), then a full
    /// target copy every `target_sync_every` steps.
    pub fn train_step(&mut self, sample_rng: &mut dyn RngCore, rng: &mut dyn RngCore) -> Result<TrainOutcome, AgentError> {
        if self.buffer.len() < self.config.learning_start() {
            return Ok(TrainOutcome::Skipped);
        }
        if !self.initialized {
            let states = self.buffer.states();
            self.online.initialize_from_data(&states, rng)?;
            self.target = self.online.clone();
            self.initialized = true;
        }
        let units = self.online.training_units();
        let mut total = 0.0;
        for unit in 0..units {
            let batch = self.buffer.sample(self.config.batch_size, sample_rng);
            let y = self.targets(unit, &batch, rng)?;
            total += self.online.train_unit(unit, &batch, &y, rng)?;
        }
        self.train_steps += 1;
        let synced = self.train_steps % self.config.target_sync_every == 0;
        if synced {
            self.target = self.online.clone();
        }
        Ok(TrainOutcome::Trained {
            loss: total / units as f64,
            synced,
        })
    }
}

/// SplitMix64 finalizer applied to `base ^ stream`-mixed input; gives
/// independent per-purpose seeds from one run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
