use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, EnvState, Environment, Step};

pub const CARTPOLE_MAX_STEPS: usize = 200;
const THETA_LIMIT: f64 = 15.0 * std::f64::consts::PI / 180.0;
const X_LIMIT: f64 = 2.4;

/// Physical parameters; these form the vector perturbed by transition noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub masscart: f64,
    pub masspole: f64,
    /// Half the pole length.
    pub length: f64,
    pub force_mag: f64,
    pub tau: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            masscart: 1.0,
            masspole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
        }
    }
}

impl CartPoleParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.gravity, self.masscart, self.masspole, self.length, self.force_mag, self.tau]
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self {
            gravity: v[0],
            masscart: v[1],
            masspole: v[2],
            length: v[3],
            force_mag: v[4],
            tau: v[5],
        }
    }
}

/// Cart-pole with explicit Euler integration, as in the classic control suite.
#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: CartPoleParams,
    /// `(x, x_dot, theta, theta_dot)`.
    state: [f64; 4],
    step_index: usize,
    terminal: bool,
    max_steps: usize,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(params: CartPoleParams, seed: u64) -> Self {
        let mut env = Self {
            params,
            state: [0.0; 4],
            step_index: 0,
            terminal: false,
            max_steps: CARTPOLE_MAX_STEPS,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        env
    }

    pub fn physical_state(&self) -> [f64; 4] {
        self.state
    }

    /// Overwrites the physical state without touching the step counter.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.terminal = false;
    }

    /// Steps with the signed force of `action` multiplied by `force_scale`.
    pub fn step_scaled(&mut self, action: usize, force_scale: f64) -> Result<Step, EnvError> {
        check_action(action, 2)?;
        if self.terminal {
            return Err(EnvError::StepAfterTerminal);
        }
        let p = &self.params;
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { p.force_mag } else { -p.force_mag } * force_scale;
        let total_mass = p.masspole + p.masscart;
        let polemass_length = p.masspole * p.length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + polemass_length * theta_dot * theta_dot * sin) / total_mass;
        let thetaacc =
            (p.gravity * sin - cos * temp) / (p.length * (4.0 / 3.0 - p.masspole * cos * cos / total_mass));
        let xacc = temp - polemass_length * thetaacc * cos / total_mass;
        self.state = [
            x + p.tau * x_dot,
            x_dot + p.tau * xacc,
            theta + p.tau * theta_dot,
            theta_dot + p.tau * thetaacc,
        ];
        self.step_index += 1;
        let failed = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        let capped = self.step_index >= self.max_steps;
        self.terminal = failed || capped;
        Ok(Step {
            observation: self.state.to_vec(),
            reward: 1.0,
            terminal: self.terminal,
            truncated: capped && !failed,
        })
    }
}

impl Environment for CartPole {
    fn obs_dim(&self) -> usize {
        4
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        for s in &mut self.state {
            *s = self.rng.random_range(-0.05..0.05);
        }
        self.step_index = 0;
        self.terminal = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        self.step_scaled(action, 1.0)
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.state.to_vec(),
            step_index: self.step_index,
            terminal: self.terminal,
        }
    }
}
