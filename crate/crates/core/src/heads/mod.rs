//! Uncertainty heads: Monte Carlo (dropout / ensemble), deep kernel learning, and
//! the evidential posterior network.
//!
//! Every head maps a batch of states to a [`Prediction`]: per-action predictive
//! means plus raw aleatoric and epistemic scores, with enough detail to draw
//! from the aleatoric and epistemic distributions.

pub mod dkl;
pub mod montecarlo;
pub mod postnet;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::{NdError, ParamStore, Tensor};

pub use dkl::{DklConfig, DklHead};
pub use montecarlo::{MonteCarloConfig, MonteCarloHead};
pub use postnet::{PostNetConfig, PostNetHead};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dropout,
    Ensemble,
    Dkl,
    PostNet,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Dropout => "dropout",
            HeadKind::Ensemble => "ensemble",
            HeadKind::Dkl => "dkl",
            HeadKind::PostNet => "postnet",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dropout" => Ok(Self::Dropout),
            "ensemble" => Ok(Self::Ensemble),
            "dkl" => Ok(Self::Dkl),
            "postnet" => Ok(Self::PostNet),
            other => Err(HeadError::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Head hyperparameters, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadConfig {
    Dropout(MonteCarloConfig),
    Ensemble(MonteCarloConfig),
    Dkl(DklConfig),
    PostNet(PostNetConfig),
}

impl HeadConfig {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadConfig::Dropout(_) => HeadKind::Dropout,
            HeadConfig::Ensemble(_) => HeadKind::Ensemble,
            HeadConfig::Dkl(_) => HeadKind::Dkl,
            HeadConfig::PostNet(_) => HeadKind::PostNet,
        }
    }

    pub fn default_for(kind: HeadKind) -> Self {
        match kind {
            HeadKind::Dropout => HeadConfig::Dropout(MonteCarloConfig::dropout()),
            HeadKind::Ensemble => HeadConfig::Ensemble(MonteCarloConfig::ensemble()),
            HeadKind::Dkl => HeadConfig::Dkl(DklConfig::default()),
            HeadKind::PostNet => HeadConfig::PostNet(PostNetConfig::default()),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            HeadConfig::Dropout(c) | HeadConfig::Ensemble(c) => c.lr,
            HeadConfig::Dkl(c) => c.lr,
            HeadConfig::PostNet(c) => c.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            HeadConfig::Dropout(c) | HeadConfig::Ensemble(c) => c.lr = lr,
            HeadConfig::Dkl(c) => c.lr = lr,
            HeadConfig::PostNet(c) => c.lr = lr,
        }
    }
}

/// Canonical Normal-Inverse-Gamma parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigCanonical {
    pub mu0: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Head-specific information needed to sample from a prediction.
#[derive(Clone, Debug)]
pub enum PredictionDetail {
    /// One `[n, A]` mean matrix per pass or member, plus the aggregated
    /// aleatoric variance.
    MonteCarlo { member_means: Vec<Tensor>, alea_var: Tensor, epist_var: Tensor },
    /// Single Gaussian predictive per action (aleatoric and epistemic entangled).
    Gaussian { var: Tensor },
    /// Posterior NIG per state and action, row-major `[n][A]`.
    Nig { params: Vec<Vec<NigCanonical>> },
}

/// Per-state, per-action predictive summary for `n` states.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[n, A]` predictive means.
    pub mean: Tensor,
    /// `[n, A]` raw aleatoric uncertainty (variance or entropy depending on head).
    pub aleatoric: Tensor,
    /// `[n, A]` raw epistemic uncertainty.
    pub epistemic: Tensor,
    pub detail: PredictionDetail,
}

fn normal(rng: &mut dyn RngCore, mean: f64, var: f64) -> f64 {
    let xi: f64 = StandardNormal.sample(rng);
    mean + var.max(0.0).sqrt() * xi
}

/// `σ² ~ InvGamma(α, β)` then `μ ~ N(μ₀, σ²/λ)`.
pub fn nig_thompson(p: &NigCanonical, rng: &mut dyn RngCore) -> f64 {
    let g: f64 = Gamma::new(p.alpha, 1.0).expect("alpha > 0").sample(rng);
    let var = p.beta / g;
    normal(rng, p.mu0, var / p.lambda)
}

impl Prediction {
    pub fn num_states(&self) -> usize {
        self.mean.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.mean.cols()
    }

    /// Greedy action on the predictive mean of state `row` (first index on ties).
    pub fn greedy(&self, row: usize) -> usize {
        argmax(self.mean.row_slice(row))
    }

    /// One outcome per action from the aleatoric distribution.
    pub fn sample_aleatoric(&self, row: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let a = self.num_actions();
        match &self.detail {
            PredictionDetail::MonteCarlo { alea_var, .. } => (0..a)
                .map(|j| normal(rng, self.mean.get(row, j), alea_var.get(row, j)))
                .collect(),
            PredictionDetail::Gaussian { var } => {
                (0..a).map(|j| normal(rng, self.mean.get(row, j), var.get(row, j))).collect()
            }
            PredictionDetail::Nig { params } => params[row]
                .iter()
                .map(|p| normal(rng, p.mu0, p.beta / (p.alpha - 1.0)))
                .collect(),
        }
    }

    /// One mean-parameter per action from the epistemic distribution.
    pub fn sample_epistemic(&self, row: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let a = self.num_actions();
        match &self.detail {
            PredictionDetail::MonteCarlo { member_means, .. } => {
                let k = rng.random_range(0..member_means.len());
                member_means[k].row_slice(row).to_vec()
            }
            PredictionDetail::Gaussian { var } => {
                (0..a).map(|j| normal(rng, self.mean.get(row, j), var.get(row, j))).collect()
            }
            PredictionDetail::Nig { params } => params[row].iter().map(|p| nig_thompson(p, rng)).collect(),
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A minibatch of transitions in matrix form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub terminals: Vec<bool>,
}

/// Named tensors plus the config needed to rebuild a head.
#[derive(Clone, Debug)]
pub struct HeadSnapshot {
    pub config: HeadConfig,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub tensors: Vec<(String, Tensor)>,
}

pub trait Head: Clone + Send + Sync {
    fn kind(&self) -> HeadKind;
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;

    /// Predictive summary for each row of `states` (`[n, obs_dim]`).
    fn predict(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<Prediction, HeadError>;

    /// Number of independently trained parts (ensemble members); 1 otherwise.
    fn training_units(&self) -> usize {
        1
    }

    /// `[n, A]` means used for TD targets when this head acts as the target
    /// copy of training unit `unit`.
    fn target_means(&self, unit: usize, next_states: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HeadError> {
        let _ = unit;
        Ok(self.predict(next_states, rng)?.mean)
    }

    /// Loss on the taken actions followed by one optimizer step; returns the loss.
    fn train_unit(&mut self, unit: usize, batch: &Batch, targets: &[f64], rng: &mut dyn RngCore)
        -> Result<f64, HeadError>;

    /// Called once with the replay contents before the first gradient step.
    fn initialize_from_data(&mut self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(), HeadError> {
        let _ = (states, rng);
        Ok(())
    }

    fn param_stores(&self) -> Vec<&ParamStore>;

    fn snapshot(&self) -> HeadSnapshot;
}

/// Any of the four heads behind one type.
#[derive(Clone, Debug)]
pub enum AnyHead {
    MonteCarlo(MonteCarloHead),
    Dkl(DklHead),
    PostNet(PostNetHead),
}

impl AnyHead {
    pub fn new(
        config: &HeadConfig,
        obs_dim: usize,
        num_actions: usize,
        replay_capacity: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, HeadError> {
        Ok(match config {
            HeadConfig::Dropout(c) => {
                AnyHead::MonteCarlo(MonteCarloHead::new(HeadKind::Dropout, c.clone(), obs_dim, num_actions, rng)?)
            }
            HeadConfig::Ensemble(c) => {
                AnyHead::MonteCarlo(MonteCarloHead::new(HeadKind::Ensemble, c.clone(), obs_dim, num_actions, rng)?)
            }
            HeadConfig::Dkl(c) => AnyHead::Dkl(DklHead::new(c.clone(), obs_dim, num_actions, replay_capacity, rng)?),
            HeadConfig::PostNet(c) => AnyHead::PostNet(PostNetHead::new(c.clone(), obs_dim, num_actions, rng)?),
        })
    }

    /// Rebuilds a head from a snapshot; the tensors overwrite a fresh init.
    pub fn restore(snapshot: &HeadSnapshot, replay_capacity: usize) -> Result<Self, HeadError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut head = AnyHead::new(
            &snapshot.config,
            snapshot.obs_dim,
            snapshot.num_actions,
            replay_capacity,
            &mut rng,
        )?;
        match &mut head {
            AnyHead::MonteCarlo(h) => h.load_tensors(&snapshot.tensors)?,
            AnyHead::Dkl(h) => h.load_tensors(&snapshot.tensors)?,
            AnyHead::PostNet(h) => h.load_tensors(&snapshot.tensors)?,
        }
        Ok(head)
    }

    fn inner(&self) -> &dyn DynHead {
        match self {
            AnyHead::MonteCarlo(h) => h,
            AnyHead::Dkl(h) => h,
            AnyHead::PostNet(h) => h,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn DynHead {
        match self {
            AnyHead::MonteCarlo(h) => h,
            AnyHead::Dkl(h) => h,
            AnyHead::PostNet(h) => h,
        }
    }
}


/// Object-safe mirror of [`Head`] used for enum dispatch.
trait DynHead {
    fn kind(&self) -> HeadKind;
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn predict(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<Prediction, HeadError>;
    fn training_units(&self) -> usize;
    fn target_means(&self, unit: usize, next_states: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HeadError>;
    fn train_unit(&mut self, unit: usize, batch: &Batch, targets: &[f64], rng: &mut dyn RngCore)
        -> Result<f64, HeadError>;
    fn initialize_from_data(&mut self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(), HeadError>;
    fn param_stores(&self) -> Vec<&ParamStore>;
    fn snapshot(&self) -> HeadSnapshot;
}

impl<H: Head> DynHead for H {
    fn kind(&self) -> HeadKind {
        Head::kind(self)
    }
    fn obs_dim(&self) -> usize {
        Head::obs_dim(self)
    }
    fn num_actions(&self) -> usize {
        Head::num_actions(self)
    }
    fn predict(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<Prediction, HeadError> {
        Head::predict(self, states, rng)
    }
    fn training_units(&self) -> usize {
        Head::training_units(self)
    }
    fn target_means(&self, unit: usize, next_states: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HeadError> {
        Head::target_means(self, unit, next_states, rng)
    }
    fn train_unit(
        &mut self,
        unit: usize,
        batch: &Batch,
        targets: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<f64, HeadError> {
        Head::train_unit(self, unit, batch, targets, rng)
    }
    fn initialize_from_data(&mut self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(), HeadError> {
        Head::initialize_from_data(self, states, rng)
    }
    fn param_stores(&self) -> Vec<&ParamStore> {
        Head::param_stores(self)
    }
    fn snapshot(&self) -> HeadSnapshot {
        Head::snapshot(self)
    }
}

impl Head for AnyHead {
    fn kind(&self) -> HeadKind {
        self.inner().kind()
    }
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn num_actions(&self) -> usize {
        self.inner().num_actions()
    }
    fn predict(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<Prediction, HeadError> {
        self.inner().predict(states, rng)
    }
    fn training_units(&self) -> usize {
        self.inner().training_units()
    }
    fn target_means(&self, unit: usize, next_states: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HeadError> {
        self.inner().target_means(unit, next_states, rng)
    }
    fn train_unit(
        &mut self,
        unit: usize,
        batch: &Batch,
        targets: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<f64, HeadError> {
        self.inner_mut().train_unit(unit, batch, targets, rng)
    }
    fn initialize_from_data(&mut self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(), HeadError> {
        self.inner_mut().initialize_from_data(states, rng)
    }
    fn param_stores(&self) -> Vec<&ParamStore> {
        self.inner().param_stores()
    }
    fn snapshot(&self) -> HeadSnapshot {
        self.inner().snapshot()
    }
}

/// Writes named tensors into `store` (and nothing else); errors on shape mismatch.
pub(crate) fn load_into_store(
    store: &mut ParamStore,
    prefix: &str,
    tensors: &[(String, Tensor)],
) -> Result<usize, HeadError> {
    let mut loaded = 0;
    for (name, t) in tensors {
        let Some(local) = name.strip_prefix(prefix) else { continue };
        if let Some(id) = store.find(local) {
            if store.get(id).shape() != t.shape() {
                return Err(HeadError::Config(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
            loaded += 1;
        }
    }
    Ok(loaded)
}

pub(crate) fn find_tensor<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor, HeadError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| HeadError::Config(format!("snapshot is missing tensor `{name}`")))
}
