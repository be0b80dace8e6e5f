//! Independent oracles for the property-based criteria (6, 7, 8, 10, 11).
//! Every check panics with a description on the first mismatch.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use uqdqn::envs::{
    Acrobot, AcrobotParams, CartPole, CartPoleParams, Env, EnvId, Environment, PerturbationSpec, PerturbationTarget,
    PerturbedEnv,
};
use uqdqn::heads::dkl::{elbo_terms, KernelKind, Svgp};
use uqdqn::heads::postnet::{nig_entropy, posterior_update, NigParams, RadialFlow};
use uqdqn::heads::{nig_thompson, NigCanonical, PostNetConfig, PostNetHead};
use uqdqn::metrics::{auc_pr, auc_roc, ScoredSample};
use uqdqn::ndcore::{
    beta_gaussian_nll, gaussian_nll, Activation, BatchNorm, Graph, Mlp, MlpConfig, Mode, NodeId, ParamId, ParamStore,
    Tensor,
};

// ---------------------------------------------------------------- autodiff

const GRAD_SEEDS: u64 = 100;
const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn mat(r: usize, c: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![r, c], data).expect("shape")
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    mat(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Magnitudes in [0.2, 2) keep kinks and poles outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.2..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    mat(r, c, data)
}

/// Central differences of `sum(f(store) * w)` for every entry of every
/// tensor in `store`, against the tape gradient. Returns the worst relative error.
fn check_store<F>(name: &str, store: ParamStore, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    check_pair(name, store, seed, &f, &f)
}

/// Tape gradient of `tape` against central differences of `numeric`; the two
/// differ only where `tape` detaches part of its graph.
fn check_pair<F, N>(name: &str, mut store: ParamStore, seed: u64, tape: &F, numeric: &N) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
    N: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut weights: Option<Tensor> = None;
    let mut eval = |store: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let out = if grad { tape(&mut g, store) } else { numeric(&mut g, store) };
        let (r, c) = g.shape(out);
        let w = weights.get_or_insert_with(|| random(&mut wrng, r, c, -1.0, 1.0)).clone();
        let w = g.constant(w);
        let p = g.mul(out, w);
        let loss = g.sum(p);
        let v = g.value(loss).item();
        (v, grad.then(|| g.backward(loss).expect("backward").dense(store)))
    };
    let grads = eval(&store, true).1.expect("gradients");
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&store, false).0;
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&store, false).0;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[k].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
            assert!(
                rel < GRAD_TOL,
                "{name} seed {seed}: {}[{j}] analytic {analytic} numeric {numeric} (rel {rel:e})",
                store.name(id)
            );
            worst = worst.max(rel);
        }
    }
    worst
}

fn check(name: &str, inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t)).collect();
    check_store(name, store, seed, |g, s| {
        let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
        f(g, &nodes)
    })
}

fn spd(g: &mut Graph, b: NodeId) -> NodeId {
    let n = g.shape(b).0;
    let bt = g.transpose(b);
    let a = g.matmul(b, bt);
    let eye = g.constant(Tensor::eye(n));
    g.add(a, eye)
}

/// Every tape op, layer and loss across `GRAD_SEEDS` seeds; returns the
/// worst relative error seen.
pub fn autodiff_all() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut w = |e: f64| worst = worst.max(e);

        for ((ar, ac), (br, bc)) in [((3, 4), (3, 4)), ((3, 4), (1, 4)), ((3, 4), (3, 1)), ((3, 4), (1, 1)), ((1, 4), (3, 4))] {
            let a = random(rng, ar, ac, -2.0, 2.0);
            let b = random(rng, br, bc, -2.0, 2.0);
            w(check("add", vec![a.clone(), b.clone()], seed, |g, x| g.add(x[0], x[1])));
            w(check("sub", vec![a.clone(), b.clone()], seed, |g, x| g.sub(x[0], x[1])));
            w(check("mul", vec![a.clone(), b.clone()], seed, |g, x| g.mul(x[0], x[1])));
            let bd = away_from_zero(rng, br, bc);
            w(check("div", vec![a, bd], seed, |g, x| g.div(x[0], x[1])));
        }

        let a = random(rng, 3, 5, -2.0, 2.0);
        let pos = random(rng, 3, 5, 0.3, 3.0);
        let nz = away_from_zero(rng, 3, 5);
        w(check("neg", vec![a.clone()], seed, |g, x| g.neg(x[0])));
        w(check("scale", vec![a.clone()], seed, |g, x| g.scale(x[0], -1.7)));
        w(check("add_scalar", vec![a.clone()], seed, |g, x| g.add_scalar(x[0], 0.4)));
        w(check("exp", vec![a.clone()], seed, |g, x| g.exp(x[0])));
        w(check("log", vec![pos.clone()], seed, |g, x| g.log(x[0])));
        w(check("relu", vec![nz], seed, |g, x| g.relu(x[0])));
        w(check("softplus", vec![a.clone()], seed, |g, x| g.softplus(x[0])));
        w(check("sigmoid", vec![a.clone()], seed, |g, x| g.sigmoid(x[0])));
        w(check("sqrt", vec![pos.clone()], seed, |g, x| g.sqrt(x[0])));
        w(check("square", vec![a], seed, |g, x| g.square(x[0])));
        w(check("powf", vec![pos], seed, |g, x| g.powf(x[0], -1.5)));

        let a = random(rng, 3, 4, -1.0, 1.0);
        let b = random(rng, 4, 2, -1.0, 1.0);
        w(check("matmul", vec![a.clone(), b], seed, |g, x| g.matmul(x[0], x[1])));
        w(check("transpose", vec![a.clone()], seed, |g, x| g.transpose(x[0])));
        w(check("sum", vec![a.clone()], seed, |g, x| g.sum(x[0])));
        w(check("mean", vec![a.clone()], seed, |g, x| g.mean(x[0])));
        w(check("sum_rows", vec![a.clone()], seed, |g, x| g.sum_rows(x[0])));
        w(check("sum_cols", vec![a.clone()], seed, |g, x| g.sum_cols(x[0])));
        w(check("gather_cols", vec![a.clone()], seed, |g, x| g.gather_cols(x[0], &[3, 0, 2])));
        w(check("slice_cols", vec![a.clone()], seed, |g, x| g.slice_cols(x[0], 1, 2)));
        let c = random(rng, 3, 2, -1.0, 1.0);
        w(check("concat_cols", vec![a.clone(), c], seed, |g, x| g.concat_cols(&[x[0], x[1], x[0]])));
        w(check("diag", vec![random(rng, 4, 4, -1.0, 1.0)], seed, |g, x| g.diag(x[0])));
        w(check("diag_embed", vec![random(rng, 4, 1, -1.0, 1.0)], seed, |g, x| g.diag_embed(x[0])));
        let z = random(rng, 5, 4, -1.0, 1.0);
        w(check("sq_dist", vec![a, z], seed, |g, x| g.sq_dist(x[0], x[1])));

        let b = random(rng, 4, 4, -1.0, 1.0);
        let rhs = random(rng, 4, 3, -1.0, 1.0);
        w(check("cholesky", vec![b.clone()], seed, |g, x| {
            let a = spd(g, x[0]);
            g.cholesky(a).expect("spd")
        }));
        w(check("solve_lower", vec![b.clone(), rhs], seed, |g, x| {
            let a = spd(g, x[0]);
            let l = g.cholesky(a).expect("spd");
            g.solve_lower(l, x[1])
        }));

        // batch norm, both paths
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, 6, 3, -2.0, 2.0));
        let mut bn = BatchNorm::new(&mut store, "bn", 3);
        store.set(bn.gamma, random(rng, 1, 3, 0.5, 1.5));
        store.set(bn.beta, random(rng, 1, 3, -0.5, 0.5));
        bn.running_mean = vec![0.1, -0.2, 0.3];
        bn.running_var = vec![0.5, 1.5, 2.0];
        for train in [true, false] {
            w(check_store("batch_norm", store.clone(), seed, |g, s| {
                let xn = g.param(s, x);
                bn.forward(g, s, xn, train).1
            }));
        }

        // dense layers with dropout and a final batch norm
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, 5, 3, -1.0, 1.0));
        let config = MlpConfig {
            layer_widths: vec![3, 5, 4],
            activation: Activation::Relu,
            dropout_p: 0.2,
            batch_norm_after_encoder: true,
        };
        let mlp = Mlp::new(&mut store, "m", config, rng).expect("mlp");
        for l in &mlp.layers {
            let b = store.get(l.bias).map(|_| rng.random_range(-0.3..0.3));
            store.set(l.bias, b);
        }
        w(check_store("mlp", store, seed, |g, s| {
            let xn = g.param(s, x);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            mlp.forward(g, s, xn, Mode::Train, Some(&mut mask_rng)).expect("forward").output
        }));

        // regression losses
        let mu = random(rng, 6, 1, -2.0, 2.0);
        let lv = random(rng, 6, 1, -1.5, 1.5);
        let t = random(rng, 6, 1, -2.0, 2.0);
        w(check("gaussian_nll", vec![mu.clone(), lv.clone(), t.clone()], seed, |g, x| {
            gaussian_nll(g, x[0], x[1], x[2])
        }));
        // the β weight is detached: differentiate with the weight frozen at its current value
        let beta = 0.5;
        let frozen = lv.map(|v| (beta * v).exp());
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = [mu, lv, t].into_iter().enumerate().map(|(i, x)| store.add(format!("in{i}"), x)).collect();
        let nodes = |g: &mut Graph, s: &ParamStore| -> Vec<NodeId> { ids.iter().map(|&id| g.param(s, id)).collect() };
        w(check_pair(
            "beta_gaussian_nll",
            store,
            seed,
            &|g: &mut Graph, s: &ParamStore| {
                let x = nodes(g, s);
                beta_gaussian_nll(g, x[0], x[1], x[2], beta)
            },
            &|g: &mut Graph, s: &ParamStore| {
                let x = nodes(g, s);
                let nll_rows = {
                    let d = g.sub(x[2], x[0]);
                    let sq = g.square(d);
                    let nl = g.neg(x[1]);
                    let p = g.exp(nl);
                    let sc = g.mul(sq, p);
                    let r = g.add(x[1], sc);
                    g.add_scalar(r, (2.0 * PI).ln())
                };
                let wt = g.constant(frozen.clone());
                let weighted = g.mul(nll_rows, wt);
                let m = g.mean(weighted);
                g.scale(m, 0.5)
            },
        ));

        // radial flow log density
        let mut store = ParamStore::new();
        let z = store.add("z", random(rng, 4, 3, -1.5, 1.5));
        let flow = RadialFlow::new(&mut store, "flow", 3, 3, rng);
        w(check_store("radial_flow", store, seed, |g, s| {
            let zn = g.param(s, z);
            flow.log_density(g, s, zn)
        }));

        // sparse GP ELBO
        let mut store = ParamStore::new();
        let gps: Vec<Svgp> = (0..2)
            .map(|a| Svgp::new(&mut store, &format!("gp{a}"), 3, 2, KernelKind::Rq, rng))
            .collect();
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).map(|v| v + 0.1 * rng.random_range(-1.0..1.0));
            store.set(id, t);
        }
        let zs = random(rng, 3, 2, -1.0, 1.0);
        let y = [0.3, -0.7, 1.2];
        w(check_store("svgp_elbo", store, seed, |g, s| {
            let zn = g.constant(zs.clone());
            let t = elbo_terms(g, s, &gps, zn, &[1, 0, 1], &y, (1e-8, 1e-4)).expect("elbo");
            let kl = g.scale(t.kl, 0.1 / 7.0);
            let neg = g.neg(t.ell);
            g.add(neg, kl)
        }));

        // PostNet training loss through encoder, flows and the NIG update
        if seed % 10 == 0 {
            let config = PostNetConfig {
                hidden: vec![6],
                latent_dim: 2,
                flow_depth: 2,
                ..PostNetConfig::default()
            };
            let head = PostNetHead::new(config, 3, 2, rng).expect("postnet");
            let states = random(rng, 4, 3, -1.0, 1.0);
            let targets = [0.5, -1.0, 2.0, 0.1];
            w(check_store("postnet_loss", head.store().clone(), seed, |g, s| {
                head.loss_on(g, s, &states, &[0, 1, 1, 0], &targets).expect("loss").0
            }));
        }
    }
    worst
}

// ---------------------------------------------------------------- AUC

fn brute_roc(s: &[ScoredSample]) -> f64 {
    let ood: Vec<f64> = s.iter().filter(|x| x.label == uqdqn::metrics::Label::Ood).map(|x| x.score).collect();
    let id: Vec<f64> = s.iter().filter(|x| x.label == uqdqn::metrics::Label::Id).map(|x| x.score).collect();
    let mut twice: u64 = 0;
    for &o in &ood {
        for &i in &id {
            twice += if o > i { 2 } else if o == i { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * ood.len() * id.len()) as f64
}

fn sweep_pr(s: &[ScoredSample]) -> f64 {
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = s.iter().filter(|x| x.label == uqdqn::metrics::Label::Ood).count() as u64;
    let mut prev_tp = 0u64;
    let mut area = 0.0;
    for t in thresholds {
        let tp = s.iter().filter(|x| x.score >= t && x.label == uqdqn::metrics::Label::Ood).count() as u64;
        let fp = s.iter().filter(|x| x.score >= t && x.label == uqdqn::metrics::Label::Id).count() as u64;
        if tp > prev_tp {
            area += ((tp - prev_tp) as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    area
}

/// 1000 random instances with heavy ties; returns the instance count.
pub fn auc_all() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..25);
        let levels = rng.random_range(1..8);
        let s: Vec<ScoredSample> = (0..n)
            .map(|_| {
                let score = rng.random_range(0..levels) as f64 * 0.5;
                if rng.random::<bool>() {
                    ScoredSample::ood(score)
                } else {
                    ScoredSample::id(score)
                }
            })
            .collect();
        let (roc, pr) = match (auc_roc(&s), auc_pr(&s)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        assert_eq!(roc, brute_roc(&s), "AUC-ROC instance {done}: {s:?}");
        assert_eq!(pr, sweep_pr(&s), "AUC-PR instance {done}: {s:?}");
        done += 1;
    }
    done
}

// ---------------------------------------------------------------- NIG

/// Returns (worst entropy gap in nats, worst Thompson variance ratio error).
pub fn nig_all() -> (f64, f64) {
    let prior = NigParams::default_prior();
    assert_eq!(posterior_update(2.0, 5.0, 0.0, &prior), prior, "zero evidence must return the prior");
    let p = posterior_update(2.0, 5.0, 1e12, &prior);
    assert!((p.chi1 - 2.0).abs() < 1e-9 && (p.chi2 - 5.0).abs() < 1e-9, "infinite evidence limit: {p:?}");
    // hand-worked: prior (χ1, χ2, n) = (0, 1, 1), observation (2, 5) with n = 3
    let p = posterior_update(2.0, 5.0, 3.0, &NigParams { chi1: 0.0, chi2: 1.0, n: 1.0 });
    assert!((p.chi1 - 1.5).abs() < 1e-15 && (p.chi2 - 4.0).abs() < 1e-15 && p.n == 4.0, "{p:?}");
    // same observation against the default prior (0, 100, 1): χ2 = (100 + 3·5) / 4
    let p = posterior_update(2.0, 5.0, 3.0, &prior);
    assert!((p.chi1 - 1.5).abs() < 1e-15 && (p.chi2 - 28.75).abs() < 1e-15 && p.n == 4.0, "{p:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst_h: f64 = 0.0;
    for p in [
        NigCanonical { mu0: 0.5, lambda: 2.0, alpha: 3.0, beta: 1.5 },
        NigCanonical { mu0: -1.0, lambda: 0.7, alpha: 1.5, beta: 50.0 },
        NigCanonical { mu0: 3.0, lambda: 20.0, alpha: 8.0, beta: 0.2 },
    ] {
        let gamma = Gamma::new(p.alpha, 1.0).expect("gamma");
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s2 = p.beta / gamma.sample(&mut rng);
            let xi: f64 = StandardNormal.sample(&mut rng);
            let mu = p.mu0 + (s2 / p.lambda).sqrt() * xi;
            let log_ig = p.alpha * p.beta.ln() - ln_gamma(p.alpha) - (p.alpha + 1.0) * s2.ln() - p.beta / s2;
            let log_n = -0.5 * (2.0 * PI * s2 / p.lambda).ln() - p.lambda * (mu - p.mu0).powi(2) / (2.0 * s2);
            acc -= log_ig + log_n;
        }
        let gap = (acc / n as f64 - nig_entropy(&p).expect("entropy")).abs();
        assert!(gap < 0.02, "NIG entropy off by {gap} nats for {p:?}");
        worst_h = worst_h.max(gap);
    }

    let mut worst_t: f64 = 0.0;
    for p in [
        NigCanonical { mu0: 0.5, lambda: 3.0, alpha: 4.0, beta: 2.0 },
        NigCanonical { mu0: -2.0, lambda: 0.5, alpha: 6.0, beta: 10.0 },
    ] {
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| nig_thompson(&p, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected_var = p.beta / ((p.alpha - 1.0) * p.lambda);
        let mean_err = (mean - p.mu0).abs() / expected_var.sqrt();
        let var_err = (var / expected_var - 1.0).abs();
        assert!(mean_err < 0.05 && var_err < 0.05, "Thompson moments {mean} / {var} for {p:?}");
        worst_t = worst_t.max(var_err).max(mean_err);
    }
    (worst_h, worst_t)
}

// ---------------------------------------------------------------- SVGP

fn toy_gp(k: usize, d: usize, kind: KernelKind, seed: u64) -> (ParamStore, Svgp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gp = Svgp::new(&mut store, "gp", k, d, kind, &mut rng);
    store.set(gp.log_lengthscale, Tensor::scalar(rng.random_range(-0.5..0.5)));
    store.set(gp.log_outputscale, Tensor::scalar(rng.random_range(-0.5..0.5)));
    store.set(gp.log_rq_alpha, Tensor::scalar(rng.random_range(-0.5..0.5)));
    store.set(gp.m, mat(k, 1, (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let mut raw = Tensor::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            raw.set(i, j, rng.random_range(-0.5..0.5));
        }
    }
    store.set(gp.l_raw, raw);
    store.set(gp.mean_const, Tensor::scalar(0.3));
    (store, gp)
}

/// Dense unwhitened predictive with an explicit inverse:
/// `μ = c + k*ᵀK⁻¹m_u`, `σ² = κ − k*ᵀK⁻¹k* + k*ᵀK⁻¹S_uK⁻¹k*`.
fn dense_predictive(store: &ParamStore, gp: &Svgp, x: &Tensor, jitter: f64) -> (Vec<f64>, Vec<f64>) {
    let spec = gp.kernel_spec(store);
    let z = store.get(gp.z);
    let k = z.rows();
    let kuu = DMatrix::from_fn(k, k, |i, j| spec.eval(z.row_slice(i), z.row_slice(j)) + if i == j { jitter } else { 0.0 });
    let luu = kuu.clone().cholesky().expect("spd").l();
    let ls_t = gp.scale_tril_value(store);
    let ls = DMatrix::from_fn(k, k, |i, j| ls_t.get(i, j));
    let m_u = &luu * DVector::from_column_slice(store.get(gp.m).data());
    let s_u = &luu * &ls * ls.transpose() * luu.transpose();
    let kinv = kuu.try_inverse().expect("invertible");
    let c = store.get(gp.mean_const).item();
    let mut mu = Vec::new();
    let mut var = Vec::new();
    for r in 0..x.rows() {
        let ks = DVector::from_fn(k, |i, _| spec.eval(z.row_slice(i), x.row_slice(r)));
        let w = &kinv * &ks;
        mu.push(c + w.dot(&m_u));
        var.push(spec.prior_variance() - ks.dot(&w) + w.dot(&(&s_u * &w)));
    }
    (mu, var)
}

/// K=2, batch 2, one action, 1-d latents, every quantity written out by hand.
fn hand_elbo_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let gp = Svgp::new(&mut store, "gp", 2, 1, KernelKind::Rq, &mut rng);
    let (ell_s, sf2, alpha, sn2, c) = (0.8f64, 1.5f64, 2.0f64, 0.3f64, 0.25f64);
    let (z1, z2) = (-0.5, 0.7);
    store.set(gp.z, Tensor::column(&[z1, z2]));
    store.set(gp.log_lengthscale, Tensor::scalar(ell_s.ln()));
    store.set(gp.log_outputscale, Tensor::scalar(sf2.ln()));
    store.set(gp.log_rq_alpha, Tensor::scalar(alpha.ln()));
    store.set(gp.log_noise, Tensor::scalar(sn2.ln()));
    store.set(gp.mean_const, Tensor::scalar(c));
    store.set(gp.m, Tensor::column(&[0.4, -1.1]));
    store.set(gp.l_raw, mat(2, 2, vec![0.3, 0.0, 0.2, 0.9]));
    let jitter = 1e-8;
    let kern = |a: f64, b: f64| sf2 * (1.0 + (a - b).powi(2) / (2.0 * alpha * ell_s * ell_s)).powf(-alpha);
    let (k11, k12, k22) = (kern(z1, z1) + jitter, kern(z1, z2), kern(z2, z2) + jitter);
    let l11 = k11.sqrt();
    let l21 = k12 / l11;
    let l22 = (k22 - l21 * l21).sqrt();
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let (s11, s21, s22) = (sp(0.3), 0.2, sp(0.9));
    let (m1, m2) = (0.4, -1.1);
    let (mu1, mu2) = (l11 * m1, l21 * m1 + l22 * m2);
    let (w11, w21, w22) = (s11 * s11, s21 * s11, s21 * s21 + s22 * s22);
    let su11 = l11 * l11 * w11;
    let su21 = l21 * l11 * w11 + l22 * l11 * w21;
    let su22 = l21 * l21 * w11 + 2.0 * l21 * l22 * w21 + l22 * l22 * w22;
    let det_k = k11 * k22 - k12 * k12;
    let (i11, i12, i22) = (k22 / det_k, -k12 / det_k, k11 / det_k);
    let xs = [0.1, -1.2];
    let ys = [0.9, -0.4];
    let mut ell = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        let (a1, a2) = (kern(z1, x), kern(z2, x));
        let (b1, b2) = (i11 * a1 + i12 * a2, i12 * a1 + i22 * a2);
        let mean = c + b1 * mu1 + b2 * mu2;
        let var = sf2 - (a1 * b1 + a2 * b2) + b1 * b1 * su11 + 2.0 * b1 * b2 * su21 + b2 * b2 * su22;
        ell += -0.5 * (2.0 * PI * sn2).ln() - ((y - mean).powi(2) + var) / (2.0 * sn2);
    }
    ell /= 2.0;
    let det_su = su11 * su22 - su21 * su21;
    let tr = i11 * su11 + 2.0 * i12 * su21 + i22 * su22;
    let quad = i11 * mu1 * mu1 + 2.0 * i12 * mu1 * mu2 + i22 * mu2 * mu2;
    let kl = 0.5 * (tr + quad - 2.0 + det_k.ln() - det_su.ln());
    let (lambda, n_data) = (0.1, 50.0);
    let expected = -(ell - lambda * kl / n_data);

    let mut g = Graph::new();
    let zn = g.constant(Tensor::column(&xs));
    let t = elbo_terms(&mut g, &store, std::slice::from_ref(&gp), zn, &[0, 0], &ys, (jitter, 1e-4)).expect("elbo");
    let got = -g.value(t.ell).item() + lambda * g.value(t.kl).item() / n_data;
    (got - expected).abs()
}

/// Returns (worst predictive gap, ELBO gap).
pub fn svgp_all() -> (f64, f64) {
    let mut worst: f64 = 0.0;
    for (seed, kind) in [(0, KernelKind::Rq), (1, KernelKind::Rbf), (2, KernelKind::Matern32)] {
        for (k, d) in [(3usize, 1usize), (5, 2), (8, 3)] {
            let (store, gp) = toy_gp(k, d, kind, seed + 10 * k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 7, d, -2.0, 2.0);
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let out = gp.forward(&mut g, &store, xn, 1e-10, 1e-4).expect("forward");
            let (mu_o, var_o) = dense_predictive(&store, &gp, &x, out.jitter);
            for i in 0..7 {
                let dm = (g.value(out.mean).data()[i] - mu_o[i]).abs();
                let dv = (g.value(out.var).data()[i] - var_o[i]).abs();
                assert!(dm < 1e-8 && dv < 1e-8, "{kind:?} K={k}: mean gap {dm:e}, var gap {dv:e}");
                worst = worst.max(dm).max(dv);
            }
        }
    }
    let elbo = hand_elbo_gap();
    assert!(elbo < 1e-8, "ELBO gap {elbo:e}");
    (worst, elbo)
}

// ---------------------------------------------------------------- environments

/// Cart-pole from the Lagrangian mass matrix, explicit Euler.
fn cartpole_ref(s: [f64; 4], force: f64, p: &CartPoleParams) -> [f64; 4] {
    let (m, mc, l, g) = (p.masspole, p.masscart, p.length, p.gravity);
    let (sn, cs) = (s[2].sin(), s[2].cos());
    let (a11, a12, a22) = (mc + m, m * l * cs, 4.0 / 3.0 * m * l * l);
    let b1 = force + m * l * s[3] * s[3] * sn;
    let b2 = m * g * l * sn;
    let det = a11 * a22 - a12 * a12;
    let xacc = (a22 * b1 - a12 * b2) / det;
    let thacc = (a11 * b2 - a12 * b1) / det;
    [s[0] + p.tau * s[1], s[1] + p.tau * xacc, s[2] + p.tau * s[3], s[3] + p.tau * thacc]
}

/// Acrobot in Lagrangian form `M q̈ + C + G = (0, τ)`, classic RK4 with dt 0.2.
fn acrobot_ref(s: [f64; 4], tau: f64) -> [f64; 4] {
    let accel = |x: &[f64; 4]| {
        let (m1, m2, l1, g, lc1, lc2, i1, i2) = (1.0, 1.0, 1.0, 9.8, 0.5f64, 0.5f64, 1.0, 1.0);
        let (q1, q2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let h = m2 * l1 * lc2;
        let m11 = m1 * lc1.powi(2) + m2 * (l1 * l1 + lc2.powi(2) + 2.0 * l1 * lc2 * q2.cos()) + i1 + i2;
        let m12 = m2 * (lc2.powi(2) + l1 * lc2 * q2.cos()) + i2;
        let m22 = m2 * lc2.powi(2) + i2;
        let c1 = -h * q2.sin() * (w2 * w2 + 2.0 * w1 * w2);
        let c2 = h * q2.sin() * w1 * w1;
        let g1 = (m1 * lc1 + m2 * l1) * g * q1.sin() + m2 * lc2 * g * (q1 + q2).sin();
        let g2 = m2 * lc2 * g * (q1 + q2).sin();
        let (r1, r2) = (-(c1 + g1), tau - (c2 + g2));
        let det = m11 * m22 - m12 * m12;
        [w1, w2, (r1 * m22 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det]
    };
    let h = 0.2;
    let k1 = accel(&s);
    let k2 = accel(&std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]));
    let k3 = accel(&std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]));
    let k4 = accel(&std::array::from_fn(|i| s[i] + h * k3[i]));
    let mut out: [f64; 4] = std::array::from_fn(|i| s[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0);
    for a in &mut out[..2] {
        *a = (*a + PI).rem_euclid(2.0 * PI) - PI;
    }
    out[2] = out[2].clamp(-4.0 * PI, 4.0 * PI);
    out[3] = out[3].clamp(-9.0 * PI, 9.0 * PI);
    out
}

fn ang_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn rollout(env: &mut dyn Environment, steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = env.num_actions();
    let mut out = vec![env.reset()];
    for _ in 0..steps {
        let s = env.step(rng.random_range(0..n)).expect("step");
        out.push(s.observation.clone());
        if s.terminal {
            out.push(env.reset());
        }
    }
    out
}

/// Returns (worst CartPole gap, worst Acrobot gap).
pub fn envs_all() -> (f64, f64) {
    let mut actions = ChaCha8Rng::seed_from_u64(9);
    let p = CartPoleParams::default();
    let mut cp_gap: f64 = 0.0;
    for seed in 0..20 {
        let mut env = CartPole::new(p, seed);
        env.reset();
        let mut s = env.physical_state();
        for _ in 0..100 {
            let a = actions.random_range(0..2usize);
            let step = env.step(a).expect("step");
            s = cartpole_ref(s, if a == 1 { p.force_mag } else { -p.force_mag }, &p);
            for (x, y) in step.observation.iter().zip(&s) {
                cp_gap = cp_gap.max((x - y).abs());
            }
            if step.terminal {
                env.reset();
                s = env.physical_state();
            }
        }
    }
    assert!(cp_gap < 1e-10, "CartPole gap {cp_gap:e}");

    let torques = [-1.0, 0.0, 1.0];
    let mut ac_gap: f64 = 0.0;
    for seed in 0..20 {
        let mut env = Acrobot::new(AcrobotParams::default(), seed);
        env.reset();
        let mut s = env.physical_state();
        for _ in 0..100 {
            let a = actions.random_range(0..3usize);
            let step = env.step(a).expect("step");
            s = acrobot_ref(s, torques[a]);
            let e = env.physical_state();
            ac_gap = ac_gap
                .max(ang_diff(e[0], s[0]))
                .max(ang_diff(e[1], s[1]))
                .max((e[2] - s[2]).abs())
                .max((e[3] - s[3]).abs());
            if step.terminal {
                env.reset();
                s = env.physical_state();
            }
        }
    }
    assert!(ac_gap < 1e-8, "Acrobot gap {ac_gap:e}");

    // zero-strength wrappers are the identity
    for id in [EnvId::CartPole, EnvId::Acrobot] {
        for target in [PerturbationTarget::State, PerturbationTarget::Action, PerturbationTarget::Transition] {
            let spec = PerturbationSpec { target, strength: 0.0, draw_seed: 3 };
            let mut plain = Env::new(id, 5);
            let mut wrapped = PerturbedEnv::new(Env::new(id, 5), spec).expect("wrapper");
            assert_eq!(rollout(&mut plain, 700, 3), rollout(&mut wrapped, 700, 3), "{id:?} {target:?} at ε = 0");
        }
    }

    // multiplicative state noise: mean s, variance (εs)²
    let eps = 0.1;
    let spec = PerturbationSpec { target: PerturbationTarget::State, strength: eps, draw_seed: 0 };
    let mut env = PerturbedEnv::new(Env::new(EnvId::CartPole, 0), spec).expect("wrapper");
    let s = [0.5, -1.2, 0.03, 2.0];
    let n = 100_000;
    let (mut sum, mut sq) = ([0.0; 4], [0.0; 4]);
    for _ in 0..n {
        let o = env.observe(s.to_vec());
        for i in 0..4 {
            sum[i] += o[i];
            sq[i] += o[i] * o[i];
        }
    }
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let expect = (eps * s[i]).powi(2);
        assert!((mean - s[i]).abs() < 5.0 * (expect / n as f64).sqrt(), "state noise mean {mean} vs {}", s[i]);
        assert!((var / expect - 1.0).abs() < 0.02, "state noise variance {var} vs {expect}");
    }

    // Acrobot action noise replaces the action with probability ε/2
    let spec = PerturbationSpec { target: PerturbationTarget::Action, strength: 1.0, draw_seed: 0 };
    let mut env = PerturbedEnv::new(Env::new(EnvId::Acrobot, 0), spec).expect("wrapper");
    for _ in 0..100_000 {
        if env.step(1).expect("step").terminal {
            env.reset();
        }
    }
    assert!((env.random_action_rate() - 0.5).abs() < 0.01, "random action rate {}", env.random_action_rate());

    // transition draws stay within ±ε of the nominal parameters
    for seed in 0..50 {
        let spec = PerturbationSpec { target: PerturbationTarget::Transition, strength: 0.3, draw_seed: seed };
        let env = PerturbedEnv::new(Env::new(EnvId::CartPole, 0), spec).expect("wrapper");
        let Env::CartPole(inner) = env.inner() else { unreachable!() };
        for (q, base) in inner.params.to_vec().iter().zip(CartPoleParams::default().to_vec()) {
            assert!((q / base - 1.0).abs() <= 0.3 + 1e-12, "transition draw {q} vs {base}");
        }
    }
    (cp_gap, ac_gap)
}
