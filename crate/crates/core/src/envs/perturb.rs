use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    AcrobotParams, CartPoleParams, Env, EnvError, EnvState, Environment, Step,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationTarget {
    State,
    Action,
    Transition,
}

impl std::str::FromStr for PerturbationTarget {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "state" => Ok(Self::State),
            "action" => Ok(Self::Action),
            "transition" => Ok(Self::Transition),
            other => Err(EnvError::Config(format!("unknown perturbation target `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub target: PerturbationTarget,
    /// ε; the standard deviation for Gaussian noise, the half-width for uniform.
    pub strength: f64,
    pub draw_seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.strength.is_finite() && self.strength >= 0.0 {
            Ok(())
        } else {
            Err(EnvError::Config(format!("perturbation strength must be >= 0, got {}", self.strength)))
        }
    }
}

/// Environment with exactly one MDP element perturbed.
///
/// The wrapper owns its own generator, so the wrapped dynamics and reset draws
/// are untouched by the noise.
#[derive(Clone, Debug)]
pub struct PerturbedEnv {
    inner: Env,
    spec: PerturbationSpec,
    rng: ChaCha8Rng,
    random_actions: u64,
    actions_taken: u64,
}

impl PerturbedEnv {
    pub fn new(mut inner: Env, spec: PerturbationSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        if spec.target == PerturbationTarget::Transition && spec.strength > 0.0 {
            // ν drawn once per spec from a stream separate from the per-step noise
            let mut draw = ChaCha8Rng::seed_from_u64(spec.draw_seed);
            draw.set_stream(1);
            let mut scale = |v: Vec<f64>| -> Vec<f64> {
                v.into_iter()
                    .map(|x| x * (1.0 + draw.random_range(-spec.strength..=spec.strength)))
                    .collect()
            };
            match &mut inner {
                Env::CartPole(e) => e.params = CartPoleParams::from_vec(&scale(e.params.to_vec())),
                Env::Acrobot(e) => e.params = AcrobotParams::from_vec(&scale(e.params.to_vec())),
                Env::Ood(_) => {}
            }
        }
        Ok(Self {
            inner,
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.draw_seed),
            random_actions: 0,
            actions_taken: 0,
        })
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn inner(&self) -> &Env {
        &self.inner
    }

    /// Fraction of steps whose action was replaced by a random one.
    pub fn random_action_rate(&self) -> f64 {
        if self.actions_taken == 0 {
            0.0
        } else {
            self.random_actions as f64 / self.actions_taken as f64
        }
    }

    fn active(&self, target: PerturbationTarget) -> bool {
        self.spec.target == target && self.spec.strength > 0.0
    }

    /// Applies the state perturbation (if any) to one observation.
    pub fn observe(&mut self, obs: Vec<f64>) -> Vec<f64> {
        if !self.active(PerturbationTarget::State) {
            return obs;
        }
        let noise = Normal::new(0.0, self.spec.strength).expect("validated strength");
        obs.into_iter().map(|s| (1.0 + noise.sample(&mut self.rng)) * s).collect()
    }
}

impl Environment for PerturbedEnv {
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }

    fn reset(&mut self) -> Vec<f64> {
        let obs = self.inner.reset();
        self.observe(obs)
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let mut step = if self.active(PerturbationTarget::Action) {
            self.actions_taken += 1;
            match &mut self.inner {
                Env::CartPole(e) => {
                    let x: f64 = Normal::new(0.0, self.spec.strength)
                        .expect("validated strength")
                        .sample(&mut self.rng);
                    e.step_scaled(action, 1.0 + x)?
                }
                other => {
                    let p = (self.spec.strength / 2.0).min(1.0);
                    let a = if self.rng.random::<f64>() < p {
                        self.random_actions += 1;
                        self.rng.random_range(0..other.num_actions())
                    } else {
                        action
                    };
                    other.step(a)?
                }
            }
        } else {
            self.inner.step(action)?
        };
        step.observation = self.observe(step.observation);
        Ok(step)
    }

    /// Physical (unperturbed) observation of the wrapped env.
    fn state(&self) -> EnvState {
        self.inner.state()
    }
}
