//! Deep kernel learning head: ReLU encoder (+ batch norm) feeding one sparse
//! variational GP per action, trained on the ELBO.

pub mod kernel;
pub mod svgp;

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use kernel::{KernelKind, KernelSpec};
pub use svgp::{Svgp, SvgpOutput};

use super::{find_tensor, load_into_store, Batch, Head, HeadConfig, HeadError, HeadKind, HeadSnapshot};
use super::{Prediction, PredictionDetail};
use crate::ndcore::{
    Activation, AdamConfig, AdamState, Graph, Mlp, MlpConfig, Mode, NodeId, ParamStore, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DklConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub inducing: usize,
    pub kernel: KernelKind,
    /// Weight of the KL term.
    pub lambda: f64,
    pub lr: f64,
    /// Global gradient-norm clip applied by the optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub batch_norm: bool,
    pub jitter_start: f64,
    pub jitter_max: f64,
    /// Std of the noise added to inducing points drawn from replay latents.
    pub inducing_init_noise: f64,
}

impl Default for DklConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            latent_dim: 64,
            inducing: 80,
            kernel: KernelKind::Rq,
            lambda: 0.1,
            lr: 1e-2,
            grad_clip: None,
            batch_norm: true,
            jitter_start: 1e-8,
            jitter_max: 1e-4,
            inducing_init_noise: 0.1,
        }
    }
}

/// `0.5·ln(2πe·σ²)`.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * var).ln()
}

// keeps entropies finite when round-off drives the variance to zero
const VAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DklHead {
    pub config: DklConfig,
    obs_dim: usize,
    num_actions: usize,
    replay_capacity: usize,
    store: ParamStore,
    encoder: Mlp,
    gps: Vec<Svgp>,
    adam: AdamState,
}

/// ELBO pieces for one batch: mean expected log-likelihood at the taken
/// actions and the KL summed over actions.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub ell: NodeId,
    pub kl: NodeId,
}

/// Builds both ELBO terms on `g` for latents `z` (`[n, latent]`).
pub fn elbo_terms(
    g: &mut Graph,
    store: &ParamStore,
    gps: &[Svgp],
    z: NodeId,
    actions: &[usize],
    targets: &[f64],
    jitter: (f64, f64),
) -> Result<ElboTerms, HeadError> {
    let outs = gps
        .iter()
        .map(|gp| gp.forward(g, store, z, jitter.0, jitter.1))
        .collect::<Result<Vec<_>, _>>()?;
    let means: Vec<NodeId> = outs.iter().map(|o| o.mean).collect();
    let vars: Vec<NodeId> = outs.iter().map(|o| o.var).collect();
    let mean = g.concat_cols(&means);
    let var = g.concat_cols(&vars);
    let taken = SvgpOutput {
        mean: g.gather_cols(mean, actions),
        var: g.gather_cols(var, actions),
        jitter: 0.0,
    };
    let y = g.constant(Tensor::column(targets));
    // each row uses the noise of its own action's GP
    let mut ell_parts = Vec::with_capacity(gps.len());
    for (a, gp) in gps.iter().enumerate() {
        let mask: Vec<f64> = actions.iter().map(|&x| if x == a { 1.0 } else { 0.0 }).collect();
        let ell = gp.expected_log_lik(g, store, &taken, y);
        let m = g.constant(Tensor::column(&mask));
        ell_parts.push(g.mul(ell, m));
    }
    let mut ell = ell_parts[0];
    for &p in &ell_parts[1..] {
        ell = g.add(ell, p);
    }
    let ell = g.mean(ell);
    let mut kl = gps[0].kl(g, store);
    for gp in &gps[1..] {
        let k = gp.kl(g, store);
        kl = g.add(kl, k);
    }
    Ok(ElboTerms { ell, kl })
}

impl DklHead {
    pub fn new(
        config: DklConfig,
        obs_dim: usize,
        num_actions: usize,
        replay_capacity: usize,
        mut rng: &mut dyn RngCore,
    ) -> Result<Self, HeadError> {
        if config.inducing == 0 || config.latent_dim == 0 {
            return Err(HeadError::Config("inducing and latent_dim must be positive".into()));
        }
        if replay_capacity == 0 {
            return Err(HeadError::Config("replay capacity must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut widths = vec![obs_dim];
        widths.extend(&config.hidden);
        widths.push(config.latent_dim);
        let encoder = Mlp::new(
            &mut store,
            "enc",
            MlpConfig {
                layer_widths: widths,
                activation: Activation::Relu,
                dropout_p: 0.0,
                batch_norm_after_encoder: config.batch_norm,
            },
            &mut rng,
        )?;
        let gps = (0..num_actions)
            .map(|a| Svgp::new(&mut store, &format!("gp{a}"), config.inducing, config.latent_dim, config.kernel, rng))
            .collect();
        let adam = AdamState::new(AdamConfig::with_lr(config.lr).clipped(config.grad_clip), &store);
        Ok(Self {
            config,
            obs_dim,
            num_actions,
            replay_capacity,
            store,
            encoder,
            gps,
            adam,
        })
    }

    pub fn gps(&self) -> &[Svgp] {
        &self.gps
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn kernel_spec(&self, action: usize) -> KernelSpec {
        self.gps[action].kernel_spec(&self.store)
    }

    /// Encoder output in eval mode; `pre_norm` bypasses the final batch norm.
    pub fn latent(&self, states: &Tensor, pre_norm: bool) -> Result<Tensor, HeadError> {
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let out = self.encoder.forward(&mut g, &self.store, x, Mode::Eval, None)?;
        Ok(g.value(if pre_norm { out.pre_norm } else { out.output }).clone())
    }

    /// `[n, A]` predictive means and variances of f at the given latents.
    pub fn predict_latent(&self, z: &Tensor) -> Result<(Tensor, Tensor), HeadError> {
        let mut g = Graph::inference();
        let zn = g.constant(z.clone());
        let n = z.rows();
        let mut mean = Tensor::zeros(n, self.num_actions);
        let mut var = Tensor::zeros(n, self.num_actions);
        for (a, gp) in self.gps.iter().enumerate() {
            let out = gp.forward(&mut g, &self.store, zn, self.config.jitter_start, self.config.jitter_max)?;
            for i in 0..n {
                mean.set(i, a, g.value(out.mean).get(i, 0));
                var.set(i, a, g.value(out.var).get(i, 0));
            }
        }
        Ok((mean, var))
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), HeadError> {
        load_into_store(&mut self.store, "", tensors)?;
        if let Some(bn) = self.encoder.norm.as_mut() {
            bn.running_mean = find_tensor(tensors, "enc.bn.running_mean")?.data().to_vec();
            bn.running_var = find_tensor(tensors, "enc.bn.running_var")?.data().to_vec();
        }
        Ok(())
    }
}

impl Head for DklHead {
    fn kind(&self) -> HeadKind {
        HeadKind::Dkl
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn predict(&self, states: &Tensor, _rng: &mut dyn RngCore) -> Result<Prediction, HeadError> {
        let z = self.latent(states, false)?;
        let (mean, var) = self.predict_latent(&z)?;
        let var = var.map(|v| v.max(VAR_FLOOR));
        let entropy = var.map(gaussian_entropy);
        Ok(Prediction {
            mean,
            aleatoric: entropy.clone(),
            epistemic: entropy,
            detail: PredictionDetail::Gaussian { var },
        })
    }

    fn train_unit(
        &mut self,
        _unit: usize,
        batch: &Batch,
        targets: &[f64],
        _rng: &mut dyn RngCore,
    ) -> Result<f64, HeadError> {
        let mut g = Graph::new();
        let x = g.constant(batch.states.clone());
        let enc = self.encoder.forward(&mut g, &self.store, x, Mode::Train, None)?;
        let terms = elbo_terms(
            &mut g,
            &self.store,
            &self.gps,
            enc.output,
            &batch.actions,
            targets,
            (self.config.jitter_start, self.config.jitter_max),
        )?;
        let kl = g.value(terms.kl).item();
        if !kl.is_finite() {
            return Err(HeadError::Numerical(format!("non-finite KL {kl}")));
        }
        let kl_term = g.scale(terms.kl, self.config.lambda / self.replay_capacity as f64);
        let neg_ell = g.neg(terms.ell);
        let loss = g.add(neg_ell, kl_term);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(HeadError::Numerical(format!("non-finite ELBO loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.adam.step(&mut self.store, &grads)?;
        self.encoder.update_running(&enc.batch_stats);
        Ok(value)
    }

    /// Inducing points from the replay latents (plus small noise), batch-norm
    /// running statistics from the same states, lengthscale from the median
    /// pairwise latent distance.
    fn initialize_from_data(&mut self, states: &Tensor, rng: &mut dyn RngCore) -> Result<(), HeadError> {
        if states.rows() == 0 {
            return Err(HeadError::Config("no states to initialize from".into()));
        }
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let use_batch = self.encoder.norm.is_some() && states.rows() > 1;
        let mode = if use_batch { Mode::Train } else { Mode::Eval };
        let enc = self.encoder.forward(&mut g, &self.store, x, mode, None)?;
        if let (Some(bn), Some(stats)) = (self.encoder.norm.as_mut(), &enc.batch_stats) {
            bn.running_mean = stats.mean.clone();
            bn.running_var = stats.var_unbiased.clone();
        }
        let latents = g.value(enc.output).clone();
        let noise = Normal::new(0.0, self.config.inducing_init_noise)
            .map_err(|e| HeadError::Config(e.to_string()))?;
        let (k, d) = (self.config.inducing, self.config.latent_dim);
        for gp in &self.gps {
            let mut z = Tensor::zeros(k, d);
            for i in 0..k {
                let src = rng.random_range(0..latents.rows());
                for j in 0..d {
                    z.set(i, j, latents.get(src, j) + noise.sample(&mut *rng));
                }
            }
            let ell = median_pairwise_distance(&z).max(1e-3);
            self.store.set(gp.z, z);
            self.store.set(gp.log_lengthscale, Tensor::scalar(ell.ln()));
        }
        Ok(())
    }

    fn param_stores(&self) -> Vec<&ParamStore> {
        vec![&self.store]
    }

    fn snapshot(&self) -> HeadSnapshot {
        let mut tensors: Vec<(String, Tensor)> =
            self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        if let Some(bn) = &self.encoder.norm {
            tensors.push(("enc.bn.running_mean".into(), Tensor::row(&bn.running_mean)));
            tensors.push(("enc.bn.running_var".into(), Tensor::row(&bn.running_var)));
        }
        HeadSnapshot {
            config: HeadConfig::Dkl(self.config.clone()),
            obs_dim: self.obs_dim,
            num_actions: self.num_actions,
            tensors,
        }
    }
}

fn median_pairwise_distance(z: &Tensor) -> f64 {
    let mut d = Vec::new();
    for i in 0..z.rows() {
        for j in 0..i {
            let r2: f64 = z.row_slice(i).iter().zip(z.row_slice(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(r2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d[d.len() / 2]
}
