use std::f64::consts::PI;

use super::{Graph, NodeId};

/// Mean Gaussian negative log-likelihood with a log-variance parametrization:
/// `mean(0.5 * (log_var + (target - mu)^2 / exp(log_var) + ln 2π))`.
pub fn gaussian_nll(g: &mut Graph, mu: NodeId, log_var: NodeId, target: NodeId) -> NodeId {
    assert_eq!(g.shape(mu), g.shape(log_var), "gaussian_nll shapes");
    assert_eq!(g.shape(mu), g.shape(target), "gaussian_nll shapes");
    let diff = g.sub(target, mu);
    let sq = g.square(diff);
    let neg_lv = g.neg(log_var);
    let prec = g.exp(neg_lv);
    let scaled = g.mul(sq, prec);
    let s = g.add(log_var, scaled);
    let s = g.add_scalar(s, (2.0 * PI).ln());
    let m = g.mean(s);
    g.scale(m, 0.5)
}

/// β-weighted Gaussian NLL: each sample's NLL is scaled by the detached
/// `exp(log_var)^β`. `β = 0` is the plain NLL; `β = 1` gives the mean the
/// same gradient as squared error.
pub fn beta_gaussian_nll(g: &mut Graph, mu: NodeId, log_var: NodeId, target: NodeId, beta: f64) -> NodeId {
    if beta == 0.0 {
        return gaussian_nll(g, mu, log_var, target);
    }
    let diff = g.sub(target, mu);
    let sq = g.square(diff);
    let neg_lv = g.neg(log_var);
    let prec = g.exp(neg_lv);
    let scaled = g.mul(sq, prec);
    let s = g.add(log_var, scaled);
    let s = g.add_scalar(s, (2.0 * PI).ln());
    let lv = g.detach(log_var);
    let w = g.scale(lv, beta);
    let w = g.exp(w);
    let s = g.mul(s, w);
    let m = g.mean(s);
    g.scale(m, 0.5)
}

/// Plain-number version of [`gaussian_nll`].
pub fn gaussian_nll_value(mu: &[f64], log_var: &[f64], target: &[f64]) -> f64 {
    let n = mu.len() as f64;
    mu.iter()
        .zip(log_var)
        .zip(target)
        .map(|((&m, &lv), &t)| 0.5 * (lv + (t - m).powi(2) * (-lv).exp() + (2.0 * PI).ln()))
        .sum::<f64>()
        / n
}
