//! MC Dropout and deep-ensemble heads.
//!
//! Each network emits `2·|A|` values: predicted means followed by predicted
//! log-variances. `K` stochastic passes (dropout) or `K` members (ensemble)
//! are reduced to mean of means, mean of variances (aleatoric), and the
//! population variance of means (epistemic).

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{load_into_store, Batch, Head, HeadError, HeadKind, HeadSnapshot, Prediction, PredictionDetail};
use crate::ndcore::{
    beta_gaussian_nll, gaussian_nll, Activation, AdamConfig, AdamState, Graph, Mlp, MlpConfig, Mode, NodeId, ParamStore, Tensor,
};

/// Smooth bounds on the predicted log-variance. Unbounded, the NLL lets the
/// variance run off to overflow under bootstrapped targets.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn softplus_value(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `hi − softplus(hi − raw)`, then `lo + softplus(· − lo)`: identity well
/// inside the range, saturating smoothly at either end.
pub fn bound_log_var(raw: f64) -> f64 {
    let upper = LOG_VAR_MAX - softplus_value(LOG_VAR_MAX - raw);
    LOG_VAR_MIN + softplus_value(upper - LOG_VAR_MIN)
}

fn bound_log_var_node(g: &mut Graph, raw: NodeId) -> NodeId {
    let d = g.neg(raw);
    let d = g.add_scalar(d, LOG_VAR_MAX);
    let sp = g.softplus(d);
    let upper = g.neg(sp);
    let upper = g.add_scalar(upper, LOG_VAR_MAX - LOG_VAR_MIN);
    let sp = g.softplus(upper);
    g.add_scalar(sp, LOG_VAR_MIN)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Passes (dropout) or members (ensemble).
    pub k: usize,
    #[serde(default)]
    pub dropout_p: f64,
    pub lr: f64,
    /// Global gradient-norm clip applied by the optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Exponent of the detached variance weight on each sample's NLL
    /// (0 = plain Gaussian NLL).
    #[serde(default = "default_nll_beta")]
    pub nll_beta: f64,
}

fn default_nll_beta() -> f64 {
    1.0
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

impl MonteCarloConfig {
    pub fn dropout() -> Self {
        Self {
            hidden: default_hidden(),
            k: 20,
            dropout_p: 0.2,
            lr: 1e-3,
            grad_clip: None,
            nll_beta: default_nll_beta(),
        }
    }

    pub fn ensemble() -> Self {
        Self {
            hidden: default_hidden(),
            k: 10,
            dropout_p: 0.0,
            lr: 1e-3,
            grad_clip: None,
            nll_beta: default_nll_beta(),
        }
    }
}

/// Aggregated Monte Carlo prediction; all matrices are `[n, A]`.
#[derive(Clone, Debug, PartialEq)]
pub struct McAggregate {
    pub mean: Tensor,
    pub alea_var: Tensor,
    pub epist_var: Tensor,
    pub k: usize,
}

/// Reduces per-pass means and variances:
/// `μ = (1/K)Σμ_k`, `alea = (1/K)Σσ²_k`, `epist = (1/K)Σ(μ_k − μ)²`.
pub fn aggregate(means: &[Tensor], vars: &[Tensor]) -> McAggregate {
    let k = means.len();
    assert!(k > 0 && vars.len() == k);
    let (n, a) = (means[0].rows(), means[0].cols());
    let inv = 1.0 / k as f64;
    let mut mean = Tensor::zeros(n, a);
    let mut alea = Tensor::zeros(n, a);
    for (m, v) in means.iter().zip(vars) {
        for (acc, x) in mean.data_mut().iter_mut().zip(m.data()) {
            *acc += x * inv;
        }
        for (acc, x) in alea.data_mut().iter_mut().zip(v.data()) {
            *acc += x * inv;
        }
    }
    let mut epist = Tensor::zeros(n, a);
    for m in means {
        for ((acc, x), mu) in epist.data_mut().iter_mut().zip(m.data()).zip(mean.data()) {
            *acc += (x - mu) * (x - mu) * inv;
        }
    }
    // all passes identical: report exactly zero despite rounding in the mean
    for (i, e) in epist.data_mut().iter_mut().enumerate() {
        if means.iter().all(|m| m.data()[i] == means[0].data()[i]) {
            *e = 0.0;
        }
    }
    McAggregate {
        mean,
        alea_var: alea,
        epist_var: epist,
        k,
    }
}

#[derive(Clone, Debug)]
struct Member {
    store: ParamStore,
    net: Mlp,
    adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct MonteCarloHead {
    pub config: MonteCarloConfig,
    kind: HeadKind,
    obs_dim: usize,
    num_actions: usize,
    members: Vec<Member>,
}

impl MonteCarloHead {
    pub fn new(
        kind: HeadKind,
        config: MonteCarloConfig,
        obs_dim: usize,
        num_actions: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, HeadError> {
        if config.k == 0 {
            return Err(HeadError::Config("k must be at least 1".into()));
        }
        let n_members = match kind {
            HeadKind::Dropout => 1,
            HeadKind::Ensemble => config.k,
            other => return Err(HeadError::Config(format!("{other:?} is not a Monte Carlo head"))),
        };
        let mut widths = vec![obs_dim];
        widths.extend(&config.hidden);
        widths.push(2 * num_actions);
        let mlp_config = MlpConfig {
            layer_widths: widths,
            activation: Activation::Relu,
            dropout_p: if kind == HeadKind::Dropout { config.dropout_p } else { 0.0 },
            batch_norm_after_encoder: false,
        };
        let members = (0..n_members)
            .map(|i| {
                let mut store = ParamStore::new();
                let net = Mlp::new(&mut store, &format!("m{i}"), mlp_config.clone(), &mut *rng)?;
                let adam = AdamState::new(AdamConfig::with_lr(config.lr).clipped(config.grad_clip), &store);
                Ok(Member { store, net, adam })
            })
            .collect::<Result<Vec<_>, HeadError>>()?;
        Ok(Self {
            config,
            kind,
            obs_dim,
            num_actions,
            members,
        })
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    /// Per-pass (dropout) or per-member (ensemble) means and variances.
    pub fn passes(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(Vec<Tensor>, Vec<Tensor>), HeadError> {
        let a = self.num_actions;
        let split = |out: &Tensor, rows: std::ops::Range<usize>| -> (Tensor, Tensor) {
            let n = rows.len();
            let mut mu = Vec::with_capacity(n * a);
            let mut var = Vec::with_capacity(n * a);
            for r in rows {
                let row = out.row_slice(r);
                mu.extend_from_slice(&row[..a]);
                var.extend(row[a..].iter().map(|&lv| bound_log_var(lv).exp()));
            }
            (Tensor::mat(n, a, mu), Tensor::mat(n, a, var))
        };
        let n = states.rows();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        match self.kind {
            HeadKind::Dropout => {
                // stack K copies so one forward pass draws K independent masks
                let k = self.config.k;
                let mut data = Vec::with_capacity(k * states.len());
                for _ in 0..k {
                    data.extend_from_slice(states.data());
                }
                let tiled = Tensor::mat(k * n, states.cols(), data);
                let m = &self.members[0];
                let mut g = Graph::inference();
                let x = g.constant(tiled);
                let out = m.net.forward(&mut g, &m.store, x, Mode::McDropout, Some(&mut *rng))?;
                let out = g.value(out.output);
                for i in 0..k {
                    let (mu, var) = split(out, i * n..(i + 1) * n);
                    means.push(mu);
                    vars.push(var);
                }
            }
            _ => {
                for m in &self.members {
                    let mut g = Graph::inference();
                    let x = g.constant(states.clone());
                    let out = m.net.forward(&mut g, &m.store, x, Mode::Eval, None)?;
                    let (mu, var) = split(g.value(out.output), 0..n);
                    means.push(mu);
                    vars.push(var);
                }
            }
        }
        Ok((means, vars))
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), HeadError> {
        for m in &mut self.members {
            load_into_store(&mut m.store, "", tensors)?;
        }
        Ok(())
    }
}

impl Head for MonteCarloHead {
    fn kind(&self) -> HeadKind {
        self.kind
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn predict(&self, states: &Tensor, rng: &mut dyn RngCore) -> Result<Prediction, HeadError> {
        let (means, vars) = self.passes(states, rng)?;
        let agg = aggregate(&means, &vars);
        Ok(Prediction {
            mean: agg.mean,
            aleatoric: agg.alea_var.clone(),
            epistemic: agg.epist_var.clone(),
            detail: PredictionDetail::MonteCarlo {
                member_means: means,
                alea_var: agg.alea_var,
                epist_var: agg.epist_var,
            },
        })
    }

    fn training_units(&self) -> usize {
        self.members.len()
    }

    fn target_means(&self, unit: usize, next_states: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HeadError> {
        match self.kind {
            HeadKind::Ensemble => {
                let m = &self.members[unit];
                let mut g = Graph::inference();
                let x = g.constant(next_states.clone());
                let out = m.net.forward(&mut g, &m.store, x, Mode::Eval, None)?;
                let mu = g.slice_cols(out.output, 0, self.num_actions);
                Ok(g.value(mu).clone())
            }
            _ => Ok(self.predict(next_states, rng)?.mean),
        }
    }

    fn train_unit(
        &mut self,
        unit: usize,
        batch: &Batch,
        targets: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<f64, HeadError> {
        let a = self.num_actions;
        let m = &mut self.members[unit];
        let mut g = Graph::new();
        let x = g.constant(batch.states.clone());
        let out = m.net.forward(&mut g, &m.store, x, Mode::Train, Some(&mut *rng))?;
        let mu = g.gather_cols(out.output, &batch.actions);
        let lv_idx: Vec<usize> = batch.actions.iter().map(|&x| a + x).collect();
        let lv = g.gather_cols(out.output, &lv_idx);
        let lv = bound_log_var_node(&mut g, lv);
        let y = g.constant(Tensor::column(targets));
        let nll = gaussian_nll(&mut g, mu, lv, y);
        let value = g.value(nll).item();
        let loss = beta_gaussian_nll(&mut g, mu, lv, y, self.config.nll_beta);
        if !value.is_finite() {
            return Err(HeadError::Numerical(format!("non-finite loss {value}")));
        }
        let grads = g.backward(loss)?;
        m.adam.step(&mut m.store, &grads)?;
        Ok(value)
    }

    fn param_stores(&self) -> Vec<&ParamStore> {
        self.members.iter().map(|m| &m.store).collect()
    }

    fn snapshot(&self) -> HeadSnapshot {
        let config = match self.kind {
            HeadKind::Dropout => super::HeadConfig::Dropout(self.config.clone()),
            _ => super::HeadConfig::Ensemble(self.config.clone()),
        };
        HeadSnapshot {
            config,
            obs_dim: self.obs_dim,
            num_actions: self.num_actions,
            tensors: self
                .members
                .iter()
                .flat_map(|m| m.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())))
                .collect(),
        }
    }
}
