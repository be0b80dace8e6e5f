use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, EnvError, EnvState, Environment, Step};

pub const ACROBOT_MAX_STEPS: usize = 500;
const DT: f64 = 0.2;
const GRAVITY: f64 = 9.8;
const MAX_VEL_1: f64 = 4.0 * PI;
const MAX_VEL_2: f64 = 9.0 * PI;
const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

/// Link geometry and inertia; the transition-perturbation vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcrobotParams {
    pub link_length_1: f64,
    pub link_length_2: f64,
    pub link_mass_1: f64,
    pub link_mass_2: f64,
    pub link_com_1: f64,
    pub link_com_2: f64,
    pub link_moi: f64,
}

impl Default for AcrobotParams {
    fn default() -> Self {
        Self {
            link_length_1: 1.0,
            link_length_2: 1.0,
            link_mass_1: 1.0,
            link_mass_2: 1.0,
            link_com_1: 0.5,
            link_com_2: 0.5,
            link_moi: 1.0,
        }
    }
}

impl AcrobotParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.link_length_1,
            self.link_length_2,
            self.link_mass_1,
            self.link_mass_2,
            self.link_com_1,
            self.link_com_2,
            self.link_moi,
        ]
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self {
            link_length_1: v[0],
            link_length_2: v[1],
            link_mass_1: v[2],
            link_mass_2: v[3],
            link_com_1: v[4],
            link_com_2: v[5],
            link_moi: v[6],
        }
    }
}

/// Two-link underactuated pendulum with RK4 integration ("book" dynamics).
#[derive(Clone, Debug)]
pub struct Acrobot {
    pub params: AcrobotParams,
    /// `(θ1, θ2, θ̇1, θ̇2)`.
    state: [f64; 4],
    step_index: usize,
    terminal: bool,
    max_steps: usize,
    rng: ChaCha8Rng,
}

fn wrap(x: f64) -> f64 {
    let span = 2.0 * PI;
    let mut x = x;
    while x > PI {
        x -= span;
    }
    while x < -PI {
        x += span;
    }
    x
}

impl Acrobot {
    pub fn new(params: AcrobotParams, seed: u64) -> Self {
        let mut env = Self {
            params,
            state: [0.0; 4],
            step_index: 0,
            terminal: false,
            max_steps: ACROBOT_MAX_STEPS,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset();
        env
    }

    pub fn physical_state(&self) -> [f64; 4] {
        self.state
    }

    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.terminal = false;
    }

    pub fn observation(&self) -> Vec<f64> {
        let [t1, t2, d1, d2] = self.state;
        vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2]
    }

    fn derivs(&self, s: [f64; 4], torque: f64) -> [f64; 4] {
        let p = &self.params;
        let (m1, m2, l1) = (p.link_mass_1, p.link_mass_2, p.link_length_1);
        let (lc1, lc2) = (p.link_com_1, p.link_com_2);
        let (i1, i2) = (p.link_moi, p.link_moi);
        let [theta1, theta2, dtheta1, dtheta2] = s;
        let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
        let phi2 = m2 * lc2 * GRAVITY * (theta1 + theta2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
            - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
            + (m1 * lc1 + m2 * l1) * GRAVITY * (theta1 - PI / 2.0).cos()
            + phi2;
        let ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin() - phi2)
            / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
        let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
        [dtheta1, dtheta2, ddtheta1, ddtheta2]
    }

    fn rk4(&self, s: [f64; 4], torque: f64) -> [f64; 4] {
        let add = |a: [f64; 4], b: [f64; 4], h: f64| std::array::from_fn(|i| a[i] + h * b[i]);
        let k1 = self.derivs(s, torque);
        let k2 = self.derivs(add(s, k1, DT / 2.0), torque);
        let k3 = self.derivs(add(s, k2, DT / 2.0), torque);
        let k4 = self.derivs(add(s, k3, DT), torque);
        std::array::from_fn(|i| s[i] + DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    fn goal_reached(&self) -> bool {
        let [t1, t2, _, _] = self.state;
        -t1.cos() - (t2 + t1).cos() > 1.0
    }
}

impl Environment for Acrobot {
    fn obs_dim(&self) -> usize {
        6
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        for s in &mut self.state {
            *s = self.rng.random_range(-0.1..0.1);
        }
        self.step_index = 0;
        self.terminal = false;
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        check_action(action, 3)?;
        if self.terminal {
            return Err(EnvError::StepAfterTerminal);
        }
        let ns = self.rk4(self.state, TORQUES[action]);
        self.state = [
            wrap(ns[0]),
            wrap(ns[1]),
            ns[2].clamp(-MAX_VEL_1, MAX_VEL_1),
            ns[3].clamp(-MAX_VEL_2, MAX_VEL_2),
        ];
        self.step_index += 1;
        let goal = self.goal_reached();
        let capped = self.step_index >= self.max_steps;
        self.terminal = goal || capped;
        Ok(Step {
            observation: self.observation(),
            reward: if goal { 0.0 } else { -1.0 },
            terminal: self.terminal,
            truncated: capped && !goal,
        })
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
            terminal: self.terminal,
        }
    }
}
