//! Sparse variational GP in the whitened parametrization.
//!
//! With `L_uu = chol(K_uu)`, `u = L_uu v` and `q(v) = N(m, L_S L_Sᵀ)`:
//! `A = L_uu⁻¹ K_uz`, `μ = c + Aᵀ m`,
//! `σ² = κ(x,x) − colsum(A∘A) + colsum((L_Sᵀ A)∘(L_Sᵀ A))`,
//! `KL(q‖p) = ½(tr S + mᵀm − K − 2 Σ log diag L_S)`.

use std::f64::consts::PI;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::kernel::{kernel_matrix, KernelKind, KernelNodes, KernelSpec};
use crate::ndcore::{Graph, NdError, NodeId, ParamId, ParamStore, Tensor};

/// `softplus⁻¹(1)`, so a fresh scale factor is the identity.
pub(crate) const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug)]
pub struct Svgp {
    pub kind: KernelKind,
    pub num_inducing: usize,
    pub z: ParamId,
    pub m: ParamId,
    /// Unconstrained scale factor: softplus on the diagonal, identity below.
    pub l_raw: ParamId,
    pub log_lengthscale: ParamId,
    pub log_outputscale: ParamId,
    pub log_rq_alpha: ParamId,
    pub log_noise: ParamId,
    pub mean_const: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SvgpOutput {
    /// `[n, 1]` predictive mean of f.
    pub mean: NodeId,
    /// `[n, 1]` predictive variance of f.
    pub var: NodeId,
    pub jitter: f64,
}

impl Svgp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_inducing: usize,
        latent_dim: usize,
        kind: KernelKind,
        rng: &mut dyn RngCore,
    ) -> Self {
        let z = Tensor::mat(
            num_inducing,
            latent_dim,
            (0..num_inducing * latent_dim).map(|_| StandardNormal.sample(&mut *rng)).collect(),
        );
        let mut l = Tensor::zeros(num_inducing, num_inducing);
        for i in 0..num_inducing {
            l.set(i, i, SOFTPLUS_INV_ONE);
        }
        Self {
            kind,
            num_inducing,
            z: store.add(format!("{name}.z"), z),
            m: store.add(format!("{name}.m"), Tensor::zeros(num_inducing, 1)),
            l_raw: store.add(format!("{name}.l_raw"), l),
            log_lengthscale: store.add(format!("{name}.log_lengthscale"), Tensor::scalar(0.0)),
            log_outputscale: store.add(format!("{name}.log_outputscale"), Tensor::scalar(0.0)),
            log_rq_alpha: store.add(format!("{name}.log_rq_alpha"), Tensor::scalar(0.0)),
            log_noise: store.add(format!("{name}.log_noise"), Tensor::scalar(0.0)),
            mean_const: store.add(format!("{name}.mean_const"), Tensor::scalar(0.0)),
        }
    }

    pub fn kernel_spec(&self, store: &ParamStore) -> KernelSpec {
        KernelSpec {
            kind: self.kind,
            lengthscale: store.get(self.log_lengthscale).item().exp(),
            outputscale: store.get(self.log_outputscale).item().exp(),
            rq_alpha: store.get(self.log_rq_alpha).item().exp(),
        }
    }

    pub fn noise_var(&self, store: &ParamStore) -> f64 {
        store.get(self.log_noise).item().exp()
    }

    /// Scale factor `L_S` as a plain matrix.
    pub fn scale_tril_value(&self, store: &ParamStore) -> Tensor {
        let raw = store.get(self.l_raw);
        let k = self.num_inducing;
        let mut l = Tensor::zeros(k, k);
        for i in 0..k {
            for j in 0..i {
                l.set(i, j, raw.get(i, j));
            }
            l.set(i, i, softplus(raw.get(i, i)));
        }
        l
    }

    fn kernel_nodes(&self, g: &mut Graph, store: &ParamStore) -> KernelNodes {
        let mut pos = |id| {
            let p = g.param(store, id);
            g.exp(p)
        };
        KernelNodes {
            lengthscale: pos(self.log_lengthscale),
            outputscale: pos(self.log_outputscale),
            rq_alpha: pos(self.log_rq_alpha),
        }
    }

    fn scale_tril(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let k = self.num_inducing;
        let mut mask = Tensor::zeros(k, k);
        for i in 0..k {
            for j in 0..i {
                mask.set(i, j, 1.0);
            }
        }
        let raw = g.param(store, self.l_raw);
        let mask = g.constant(mask);
        let lower = g.mul(raw, mask);
        let d = g.diag(raw);
        let d = g.softplus(d);
        let d = g.diag_embed(d);
        g.add(lower, d)
    }

    /// Predictive moments of f at the rows of `x` (`[n, latent]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        jitter_start: f64,
        jitter_max: f64,
    ) -> Result<SvgpOutput, NdError> {
        let kn = self.kernel_nodes(g, store);
        let z = g.param(store, self.z);
        let r_uu = g.sq_dist(z, z);
        let kuu = kernel_matrix(g, self.kind, r_uu, kn);
        let (luu, jitter) = cholesky_jittered(g, kuu, jitter_start, jitter_max)?;
        let r_uz = g.sq_dist(z, x);
        let kuz = kernel_matrix(g, self.kind, r_uz, kn);
        let a = g.solve_lower(luu, kuz);
        let m = g.param(store, self.m);
        let at = g.transpose(a);
        let mean = g.matmul(at, m);
        let c = g.param(store, self.mean_const);
        let mean = g.add(mean, c);
        let a2 = g.square(a);
        let explained = g.sum_rows(a2);
        let ls = self.scale_tril(g, store);
        let lst = g.transpose(ls);
        let b = g.matmul(lst, a);
        let b2 = g.square(b);
        let retained = g.sum_rows(b2);
        let zero = g.constant(Tensor::scalar(0.0));
        let kdiag = kernel_matrix(g, self.kind, zero, kn);
        let var = g.sub(kdiag, explained);
        let var = g.add(var, retained);
        let var = g.transpose(var);
        Ok(SvgpOutput { mean, var, jitter })
    }

    /// `KL(q(v) ‖ N(0, I))` as a `[1, 1]` node.
    pub fn kl(&self, g: &mut Graph, store: &ParamStore) -> NodeId {
        let k = self.num_inducing as f64;
        let ls = self.scale_tril(g, store);
        let ls2 = g.square(ls);
        let tr = g.sum(ls2);
        let m = g.param(store, self.m);
        let m2 = g.square(m);
        let mm = g.sum(m2);
        let d = g.diag(ls);
        let logd = g.log(d);
        let logdet = g.sum(logd);
        let logdet = g.scale(logdet, -2.0);
        let s = g.add(tr, mm);
        let s = g.add(s, logdet);
        let s = g.add_scalar(s, -k);
        g.scale(s, 0.5)
    }

    /// `E_q[log N(y; f, σ_n²)]` per row, `[n, 1]`.
    pub fn expected_log_lik(&self, g: &mut Graph, store: &ParamStore, out: &SvgpOutput, y: NodeId) -> NodeId {
        let log_noise = g.param(store, self.log_noise);
        let diff = g.sub(y, out.mean);
        let sq = g.square(diff);
        let num = g.add(sq, out.var);
        let neg = g.neg(log_noise);
        let prec = g.exp(neg);
        let quad = g.mul(num, prec);
        let t = g.add(quad, log_noise);
        let t = g.add_scalar(t, (2.0 * PI).ln());
        g.scale(t, -0.5)
    }
}

/// Cholesky of `a + jitter·I`, escalating the jitter ×10 up to `max`.
pub(crate) fn cholesky_jittered(g: &mut Graph, a: NodeId, start: f64, max: f64) -> Result<(NodeId, f64), NdError> {
    let n = g.shape(a).0;
    let mut jitter = start;
    loop {
        let eye = g.constant(Tensor::eye(n).map(|v| v * jitter));
        let aj = g.add(a, eye);
        match g.cholesky(aj) {
            Ok(l) => return Ok((l, jitter)),
            Err(NdError::NotPositiveDefinite { pivot, value }) => {
                if jitter * 10.0 > max * (1.0 + 1e-9) {
                    return Err(NdError::CholeskyFailed {
                        jitter,
                        reason: format!("pivot {pivot} = {value:e}"),
                    });
                }
                jitter *= 10.0;
            }
            Err(e) => return Err(e),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
