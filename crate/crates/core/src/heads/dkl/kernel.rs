use serde::{Deserialize, Serialize};

use crate::ndcore::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Rq,
    Matern32,
}

/// Plain-number kernel, used for initialization and as a test oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscale: f64,
    pub outputscale: f64,
    /// Rational-quadratic mixture parameter (ignored by other kinds).
    pub rq_alpha: f64,
}

// keeps the Matérn square root differentiable at r = 0
const MATERN_FLOOR: f64 = 1e-12;

impl KernelSpec {
    pub fn eval_sq(&self, r2: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        self.outputscale
            * match self.kind {
                KernelKind::Rbf => (-0.5 * r2 / l2).exp(),
                KernelKind::Rq => (1.0 + r2 / (2.0 * self.rq_alpha * l2)).powf(-self.rq_alpha),
                KernelKind::Matern32 => {
                    let u = 3f64.sqrt() * (r2 + MATERN_FLOOR).sqrt() / self.lengthscale;
                    (1.0 + u) * (-u).exp()
                }
            }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// `κ(x, x)`: the output scale for every stationary kind here.
    pub fn prior_variance(&self) -> f64 {
        self.eval_sq(0.0)
    }
}

/// Kernel hyperparameter nodes, each `[1, 1]` and already positive.
#[derive(Clone, Copy, Debug)]
pub struct KernelNodes {
    pub lengthscale: NodeId,
    pub outputscale: NodeId,
    pub rq_alpha: NodeId,
}

/// Kernel matrix from a squared-distance matrix node.
pub fn kernel_matrix(g: &mut Graph, kind: KernelKind, r2: NodeId, k: KernelNodes) -> NodeId {
    let l2 = g.square(k.lengthscale);
    let shape = match kind {
        KernelKind::Rbf => {
            let two_l2 = g.scale(l2, 2.0);
            let q = g.div(r2, two_l2);
            let q = g.neg(q);
            g.exp(q)
        }
        KernelKind::Rq => {
            let denom = g.mul(k.rq_alpha, l2);
            let denom = g.scale(denom, 2.0);
            let q = g.div(r2, denom);
            let q = g.add_scalar(q, 1.0);
            let lq = g.log(q);
            let e = g.mul(lq, k.rq_alpha);
            let e = g.neg(e);
            g.exp(e)
        }
        KernelKind::Matern32 => {
            let r = g.add_scalar(r2, MATERN_FLOOR);
            let r = g.sqrt(r);
            let u = g.div(r, k.lengthscale);
            let u = g.scale(u, 3f64.sqrt());
            let one_plus = g.add_scalar(u, 1.0);
            let nu = g.neg(u);
            let decay = g.exp(nu);
            g.mul(one_plus, decay)
        }
    };
    g.mul(shape, k.outputscale)
}
