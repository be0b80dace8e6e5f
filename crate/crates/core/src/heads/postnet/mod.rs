//! Evidential head: encoder (+ batch norm) → per-action radial flow density
//! (evidence) and a linear decoder (sufficient statistics) → Bayesian NIG
//! update against a fixed prior. Trained with MSE on the posterior mean.

pub mod flow;
pub mod nig;

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use flow::{RadialFlow, RadialLayerValues};
pub use nig::{aleatoric_entropy, nig_entropy, posterior_update, NigLog, NigParams, VAR_EPS};

use super::{find_tensor, load_into_store, Batch, Head, HeadConfig, HeadError, HeadKind, HeadSnapshot};
use super::{Prediction, PredictionDetail};
use crate::ndcore::{
    Activation, AdamConfig, AdamState, BatchStats, Dense, Graph, Mlp, MlpConfig, Mode, NodeId, ParamStore,
    Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostNetConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub flow_depth: usize,
    pub lr: f64,
    /// Global gradient-norm clip applied by the optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub batch_norm: bool,
    pub prior: NigParams,
    /// Log certainty budget; `None` means `(H/2)·ln(4π)`.
    pub log_budget: Option<f64>,
    /// Upper clamp on log evidence for the plain-number path.
    pub max_log_evidence: f64,
}

impl Default for PostNetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            latent_dim: 16,
            flow_depth: 8,
            lr: 1e-3,
            grad_clip: None,
            batch_norm: true,
            prior: NigParams::default_prior(),
            log_budget: None,
            max_log_evidence: 600.0,
        }
    }
}

impl PostNetConfig {
    pub fn log_budget(&self) -> f64 {
        self.log_budget
            .unwrap_or(0.5 * self.latent_dim as f64 * (4.0 * PI).ln())
    }
}

/// Counts variance clamps; cloning copies the current count.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl ClampCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add(&self, k: u64) {
        self.0.fetch_add(k, Ordering::Relaxed);
    }
}

impl Clone for ClampCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Raw network outputs for one state and action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostNetOutputs {
    pub log_evidence: f64,
    pub chi1: f64,
    pub log_var: f64,
}

/// Posterior NIG from raw outputs: `χ₂ = χ₁² + exp(log_var)`, evidence
/// `n = exp(log_evidence)` (clamped above), then the convex update.
pub fn posterior_from_outputs(o: PostNetOutputs, prior: &NigParams, max_log_evidence: f64) -> NigLog {
    let log_n = o.log_evidence.min(max_log_evidence);
    let chi2 = o.chi1 * o.chi1 + o.log_var.exp();
    let ln_prior = prior.n.ln();
    // w = n / (n_prior + n), ln n_post = logaddexp(ln n_prior, ln n)
    let w = 1.0 / (1.0 + (ln_prior - log_n).exp());
    let (hi, lo) = if log_n > ln_prior { (log_n, ln_prior) } else { (ln_prior, log_n) };
    let ln_post = hi + (lo - hi).exp().ln_1p();
    NigLog::from_posterior(
        prior.chi1 + w * (o.chi1 - prior.chi1),
        prior.chi2 + w * (chi2 - prior.chi2),
        ln_post,
    )
}

#[derive(Clone, Debug)]
pub struct PostNetHead {
    pub config: PostNetConfig,
    obs_dim: usize,
    num_actions: usize,
    store: ParamStore,
    encoder: Mlp,
    flows: Vec<RadialFlow>,
    decoder: Dense,
    adam: AdamState,
    clamps: ClampCounter,
}

impl PostNetHead {
    pub fn new(
        config: PostNetConfig,
        obs_dim: usize,
        num_actions: usize,
        mut rng: &mut dyn RngCore,
    ) -> Result<Self, HeadError> {
        if config.latent_dim == 0 {
            return Err(HeadError::Config("latent_dim must be positive".into()));
        }
        if !(config.prior.n > 0.0 && config.prior.chi2 > config.prior.chi1 * config.prior.chi1) {
            return Err(HeadError::Config(format!("invalid prior {:?}", config.prior)));
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
        let flows = (0..num_actions)
            .map(|a| RadialFlow::new(&mut store, &format!("flow{a}"), config.latent_dim, config.flow_depth, rng))
            .collect();
        let decoder = Dense::new(&mut store, "dec", config.latent_dim, 2 * num_actions, &mut rng);
        let adam = AdamState::new(AdamConfig::with_lr(config.lr).clipped(config.grad_clip), &store);
        Ok(Self {
            config,
            obs_dim,
            num_actions,
            store,
            encoder,
            flows,
            decoder,
            adam,
            clamps: ClampCounter::default(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn flows(&self) -> &[RadialFlow] {
        &self.flows
    }

    /// Number of variance clamps seen by `predict` so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamps.get()
    }

    /// Encoder output in eval mode; `pre_norm` bypasses the final batch norm.
    pub fn latent(&self, states: &Tensor, pre_norm: bool) -> Result<Tensor, HeadError> {
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let out = self.encoder.forward(&mut g, &self.store, x, Mode::Eval, None)?;
        Ok(g.value(if pre_norm { out.pre_norm } else { out.output }).clone())
    }

    /// `([n, A] log evidence, [n, 2A] decoder output)` on the tape.
    fn heads_on(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> (NodeId, NodeId) {
        let parts: Vec<NodeId> = self.flows.iter().map(|f| f.log_density(g, store, z)).collect();
        let logp = g.concat_cols(&parts);
        let log_n = g.add_scalar(logp, self.config.log_budget());
        let dec = self.decoder.forward(g, store, z);
        (log_n, dec)
    }

    /// Raw outputs for each latent row, `[n][A]`.
    pub fn outputs_latent(&self, z: &Tensor) -> Vec<Vec<PostNetOutputs>> {
        let mut g = Graph::inference();
        let zn = g.constant(z.clone());
        let (log_n, dec) = self.heads_on(&mut g, &self.store, zn);
        let (log_n, dec) = (g.value(log_n), g.value(dec));
        let a = self.num_actions;
        (0..z.rows())
            .map(|i| {
                (0..a)
                    .map(|j| PostNetOutputs {
                        log_evidence: log_n.get(i, j),
                        chi1: dec.get(i, j),
                        log_var: dec.get(i, a + j),
                    })
                    .collect()
            })
            .collect()
    }

    /// `[n, A]` log evidence at the given latents.
    pub fn log_evidence_latent(&self, z: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .outputs_latent(z)
            .iter()
            .map(|r| r.iter().map(|o| o.log_evidence).collect())
            .collect();
        Tensor::from_rows(&rows).expect("rectangular")
    }

    /// Posterior-mean MSE at the taken actions.
    pub fn loss_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: &Tensor,
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(NodeId, Option<BatchStats>), HeadError> {
        let x = g.constant(states.clone());
        let enc = self.encoder.forward(g, store, x, Mode::Train, None)?;
        let (log_n, dec) = self.heads_on(g, store, enc.output);
        let log_n = g.gather_cols(log_n, actions);
        let chi1 = g.gather_cols(dec, actions);
        let prior = self.config.prior;
        let logit = g.add_scalar(log_n, -prior.n.ln());
        let w = g.sigmoid(logit);
        let delta = g.add_scalar(chi1, -prior.chi1);
        let mu0 = g.mul(w, delta);
        let mu0 = g.add_scalar(mu0, prior.chi1);
        let y = g.constant(Tensor::column(targets));
        let err = g.sub(mu0, y);
        let sq = g.square(err);
        Ok((g.mean(sq), enc.batch_stats))
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

impl Head for PostNetHead {
    fn kind(&self) -> HeadKind {
        HeadKind::PostNet
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn predict(&self, states: &Tensor, _rng: &mut dyn RngCore) -> Result<Prediction, HeadError> {
        let z = self.latent(states, false)?;
        let outs = self.outputs_latent(&z);
        let (n, a) = (states.rows(), self.num_actions);
        let mut mean = Tensor::zeros(n, a);
        let mut alea = Tensor::zeros(n, a);
        let mut epist = Tensor::zeros(n, a);
        let mut params = Vec::with_capacity(n);
        let mut clamped = 0;
        for (i, row) in outs.iter().enumerate() {
            let mut prow = Vec::with_capacity(a);
            for (j, o) in row.iter().enumerate() {
                let post = posterior_from_outputs(*o, &self.config.prior, self.config.max_log_evidence);
                clamped += post.clamped as u64;
                mean.set(i, j, post.mu0);
                alea.set(i, j, post.aleatoric_entropy());
                epist.set(i, j, post.epistemic_entropy());
                prow.push(post.canonical());
            }
            params.push(prow);
        }
        self.clamps.add(clamped);
        if !(mean.is_finite() && epist.is_finite()) {
            return Err(HeadError::Numerical("non-finite PostNet prediction".into()));
        }
        Ok(Prediction {
            mean,
            aleatoric: alea,
            epistemic: epist,
            detail: PredictionDetail::Nig { params },
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
        let (loss, stats) = self.loss_on(&mut g, &self.store, &batch.states, &batch.actions, targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(HeadError::Numerical(format!("non-finite loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.adam.step(&mut self.store, &grads)?;
        self.encoder.update_running(&stats);
        Ok(value)
    }

    /// Seeds the batch-norm running statistics from the replay states.
    fn initialize_from_data(&mut self, states: &Tensor, _rng: &mut dyn RngCore) -> Result<(), HeadError> {
        if self.encoder.norm.is_none() || states.rows() < 2 {
            return Ok(());
        }
        let mut g = Graph::inference();
        let x = g.constant(states.clone());
        let enc = self.encoder.forward(&mut g, &self.store, x, Mode::Train, None)?;
        if let (Some(bn), Some(stats)) = (self.encoder.norm.as_mut(), &enc.batch_stats) {
            bn.running_mean = stats.mean.clone();
            bn.running_var = stats.var_unbiased.clone();
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
            config: HeadConfig::PostNet(self.config.clone()),
            obs_dim: self.obs_dim,
            num_actions: self.num_actions,
            tensors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64, lr: f64) -> PostNetHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = PostNetConfig {
            hidden: vec![16],
            latent_dim: 3,
            flow_depth: 3,
            lr,
            ..PostNetConfig::default()
        };
        PostNetHead::new(config, 4, 2, &mut rng).unwrap()
    }

    fn states(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::mat(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn stubbed_pipeline_matches_hand_arithmetic() {
        // log n = ln 3, χ₁ = 2, exp(log_var) = 1 → χ₂ = 5
        let o = PostNetOutputs {
            log_evidence: 3f64.ln(),
            chi1: 2.0,
            log_var: 0.0,
        };
        let post = posterior_from_outputs(o, &NigParams::default_prior(), 600.0);
        let c = post.canonical();
        assert!((c.mu0 - 1.5).abs() < 1e-14);
        assert!((c.lambda - 4.0).abs() < 1e-12);
        assert!((c.alpha - 3.0).abs() < 1e-12);
        assert!((c.beta - 53.0).abs() < 1e-11);
        assert!((post.var - 26.5).abs() < 1e-12);
    }

    #[test]
    fn vanishing_evidence_reverts_to_prior() {
        let prior = NigParams::default_prior();
        let prior_h = NigLog::from_posterior(prior.chi1, prior.chi2, prior.n.ln()).epistemic_entropy();
        let mut prev_gap = f64::INFINITY;
        for log_n in [-2.0, -5.0, -10.0, -20.0, -40.0] {
            let post = posterior_from_outputs(
                PostNetOutputs {
                    log_evidence: log_n,
                    chi1: 7.0,
                    log_var: -1.0,
                },
                &prior,
                600.0,
            );
            let gap = (post.epistemic_entropy() - prior_h).abs();
            assert!(gap <= prev_gap);
            prev_gap = gap;
            if log_n <= -10.0 {
                assert!(post.mu0.abs() < 0.1);
                assert!(gap < 1e-2);
            }
        }
    }

    #[test]
    fn constant_decoder_mean_is_strictly_between_prior_and_decoder() {
        let mut h = small(0, 1e-3);
        let c = 3.0;
        let dec_w = h.store.find("dec.weight").unwrap();
        let dec_b = h.store.find("dec.bias").unwrap();
        h.store.set(dec_w, Tensor::zeros(3, 4));
        h.store.set(dec_b, Tensor::row(&[c, c, 0.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = states(&mut rng, 20).map(|v| v * 5.0);
        let p = h.predict(&s, &mut rng).unwrap();
        assert!(p.mean.data().iter().all(|&m| m > 0.0 && m < c));
        for log_n in [-20.0, -1.0, 0.0, 5.0, 20.0] {
            let post = posterior_from_outputs(
                PostNetOutputs {
                    log_evidence: log_n,
                    chi1: c,
                    log_var: 0.0,
                },
                &NigParams::default_prior(),
                600.0,
            );
            assert!(post.mu0 > 0.0 && post.mu0 < c);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = small(3, 1e-3);
        let mut store = h.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // scale the decoder up so the targets are reachable but not trivially matched
        let s = states(&mut rng, 6);
        let actions = [0, 1, 1, 0, 1, 0];
        let y = [0.5, -1.0, 2.0, 0.0, 1.5, -0.3];
        let dec_b = store.find("dec.bias").unwrap();
        store.set(dec_b, Tensor::row(&[1.0, -0.5, 0.0, 0.0]));
        let loss_of = |st: &ParamStore| {
            let mut g = Graph::new();
            let (l, _) = h.loss_on(&mut g, st, &s, &actions, &y).unwrap();
            (g.value(l).item(), g.backward(l).unwrap().dense(st))
        };
        let (_, grads) = loss_of(&store);
        let eps = 1e-6;
        let mut checked_flow = false;
        for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            // log-variance outputs receive no gradient from the MSE; everything else does
            for e in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[e] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[e] -= eps;
                let num = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * eps);
                let ana = grads[pi].data()[e];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-2);
                assert!(rel < 1e-4, "{} [{e}]: {ana} vs {num}", store.name(id));
                if store.name(id).starts_with("flow") && ana.abs() > 1e-6 {
                    checked_flow = true;
                }
            }
        }
        assert!(checked_flow);
    }

    #[test]
    fn mse_drops_tenfold_in_200_steps() {
        let mut h = small(5, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = states(&mut rng, 64);
        h.initialize_from_data(&s, &mut rng).unwrap();
        let batch = Batch {
            states: s.clone(),
            actions: (0..64).map(|i| i % 2).collect(),
            rewards: vec![0.0; 64],
            next_states: s.clone(),
            terminals: vec![false; 64],
        };
        let targets: Vec<f64> = (0..64).map(|i| 1.0 + s.get(i, 0) + 0.5 * s.get(i, 1)).collect();
        let first = h.train_unit(0, &batch, &targets, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = h.train_unit(0, &batch, &targets, &mut rng).unwrap();
        }
        assert!(last * 10.0 <= first, "{first} -> {last}");
    }

    #[test]
    fn zero_error_gives_zero_loss() {
        let h = small(7, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = states(&mut rng, 5);
        let actions = [0, 1, 0, 1, 1];
        let mut g = Graph::new();
        let (_, _) = h.loss_on(&mut g, &h.store, &s, &actions, &[0.0; 5]).unwrap();
        // recompute μ₀ with train-mode batch norm and feed it back as the target
        let x = g.constant(s.clone());
        let enc = h.encoder.forward(&mut g, &h.store, x, Mode::Train, None).unwrap();
        let z = g.value(enc.output).clone();
        let outs = h.outputs_latent(&z);
        let mu: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| posterior_from_outputs(outs[i][a], &h.config.prior, 600.0).mu0)
            .collect();
        let mut g2 = Graph::new();
        let (l, _) = h.loss_on(&mut g2, &h.store, &s, &actions, &mu).unwrap();
        assert!(g2.value(l).item() < 1e-24);
    }

    #[test]
    fn snapshot_round_trip_and_evidence_decay() {
        let mut h = small(9, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = states(&mut rng, 32);
        h.initialize_from_data(&s, &mut rng).unwrap();
        let batch = Batch {
            states: s.clone(),
            actions: vec![0; 32],
            rewards: vec![0.0; 32],
            next_states: s.clone(),
            terminals: vec![false; 32],
        };
        for _ in 0..20 {
            h.train_unit(0, &batch, &[1.0; 32], &mut rng).unwrap();
        }
        let restored = match super::super::AnyHead::restore(&h.snapshot(), 100).unwrap() {
            super::super::AnyHead::PostNet(p) => p,
            _ => panic!(),
        };
        let q = states(&mut rng, 4);
        let a = h.predict(&q, &mut rng).unwrap();
        let b = restored.predict(&q, &mut rng).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.epistemic, b.epistemic);

        let near = h.log_evidence_latent(&h.latent(&q, true).unwrap());
        let far = h.log_evidence_latent(&h.latent(&q.map(|v| v * 1e3), true).unwrap());
        for (f, n) in far.data().iter().zip(near.data()) {
            assert!(f - n < 1e-3f64.ln());
        }
    }
}
