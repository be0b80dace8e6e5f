//! CartPole, Acrobot, the Gaussian OOD environment and perturbation wrappers.

mod acrobot;
mod cartpole;
mod ood;
mod perturb;

pub use acrobot::{Acrobot, AcrobotParams, ACROBOT_MAX_STEPS};
pub use cartpole::{CartPole, CartPoleParams, CARTPOLE_MAX_STEPS};
pub use ood::OodEnv;
pub use perturb::{PerturbationSpec, PerturbationTarget, PerturbedEnv};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a terminal state")]
    StepAfterTerminal,
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("config error: {0}")]
    Config(String),
}

/// Which training environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    CartPole,
    Acrobot,
}

impl EnvId {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::CartPole => 4,
            EnvId::Acrobot => 6,
        }
    }

    pub fn num_actions(self) -> usize {
        match self {
            EnvId::CartPole => 2,
            EnvId::Acrobot => 3,
        }
    }

    pub fn max_steps(self) -> usize {
        match self {
            EnvId::CartPole => CARTPOLE_MAX_STEPS,
            EnvId::Acrobot => ACROBOT_MAX_STEPS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::Acrobot => "acrobot",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" => Ok(EnvId::CartPole),
            "acrobot" => Ok(EnvId::Acrobot),
            other => Err(EnvError::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Observable part of an episode in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub terminal: bool,
}

/// Result of one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode is over (failure, goal, or step cap).
    pub terminal: bool,
    /// Episode ended only because the step cap was hit.
    pub truncated: bool,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Starts a new episode and returns the first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    fn state(&self) -> EnvState;
}

/// Concrete environment; perturbation wrappers need to reach into the physics.
#[derive(Clone, Debug)]
pub enum Env {
    CartPole(CartPole),
    Acrobot(Acrobot),
    Ood(OodEnv),
}

impl Env {
    pub fn new(id: EnvId, seed: u64) -> Self {
        match id {
            EnvId::CartPole => Env::CartPole(CartPole::new(CartPoleParams::default(), seed)),
            EnvId::Acrobot => Env::Acrobot(Acrobot::new(AcrobotParams::default(), seed)),
        }
    }

    /// Gaussian-noise environment shaped like `id`.
    pub fn ood(id: EnvId, seed: u64) -> Self {
        Env::Ood(OodEnv::new(id.obs_dim(), id.num_actions(), id.max_steps(), seed))
    }

    fn inner(&self) -> &dyn Environment {
        match self {
            Env::CartPole(e) => e,
            Env::Acrobot(e) => e,
            Env::Ood(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            Env::CartPole(e) => e,
            Env::Acrobot(e) => e,
            Env::Ood(e) => e,
        }
    }
}

impl Environment for Env {
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn num_actions(&self) -> usize {
        self.inner().num_actions()
    }
    fn max_steps(&self) -> usize {
        self.inner().max_steps()
    }
    fn reset(&mut self) -> Vec<f64> {
        self.inner_mut().reset()
    }
    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        self.inner_mut().step(action)
    }
    fn state(&self) -> EnvState {
        self.inner().state()
    }
}

pub(crate) fn check_action(action: usize, num_actions: usize) -> Result<(), EnvError> {
    if action < num_actions {
        Ok(())
    } else {
        Err(EnvError::InvalidAction { action, num_actions })
    }
}
