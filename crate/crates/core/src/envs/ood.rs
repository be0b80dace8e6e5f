use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_action, EnvError, EnvState, Environment, Step};

/// Observations are i.i.d. standard normal; actions have no effect.
#[derive(Clone, Debug)]
pub struct OodEnv {
    obs_dim: usize,
    num_actions: usize,
    max_steps: usize,
    observation: Vec<f64>,
    step_index: usize,
    terminal: bool,
    rng: ChaCha8Rng,
}

impl OodEnv {
    pub fn new(obs_dim: usize, num_actions: usize, max_steps: usize, seed: u64) -> Self {
        let mut env = Self {
            obs_dim,
            num_actions,
            max_steps,
            observation: vec![0.0; obs_dim],
            step_index: 0,
            terminal: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        env
    }

    fn draw(&mut self) -> Vec<f64> {
        (0..self.obs_dim).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }
}

impl Environment for OodEnv {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        self.observation = self.draw();
        self.step_index = 0;
        self.terminal = false;
        self.observation.clone()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        check_action(action, self.num_actions)?;
        if self.terminal {
            return Err(EnvError::StepAfterTerminal);
        }
        self.observation = self.draw();
        self.step_index += 1;
        self.terminal = self.step_index >= self.max_steps;
        Ok(Step {
            observation: self.observation.clone(),
            reward: 0.0,
            terminal: self.terminal,
            truncated: self.terminal,
        })
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation.clone(),
            step_index: self.step_index,
            terminal: self.terminal,
        }
    }
}
