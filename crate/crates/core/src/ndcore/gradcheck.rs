//! Central-difference checks of every tape op against `Graph::backward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const SEEDS: u64 = 100;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::mat(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Builds `sum(f(inputs) * w)` for fixed random `w` and compares the tape
/// gradient with central differences for every input entry.
fn check<F>(name: &str, inputs: Vec<Tensor>, seed: u64, f: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t))
        .collect();
    check_store(name, store, seed, |g, s| {
        let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
        f(g, &nodes)
    });
}

/// Same as [`check`] but perturbs every tensor of `store`; `f` reads them itself.
fn check_store<F>(name: &str, mut store: ParamStore, seed: u64, f: F)
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut weights: Option<Tensor> = None;
    let mut eval = |store: &ParamStore, grad: bool| -> (f64, Option<Gradients>) {
        let mut g = Graph::new();
        let out = f(&mut g, store);
        let (r, c) = g.shape(out);
        let w = weights.get_or_insert_with(|| random(&mut wrng, r, c, -1.0, 1.0)).clone();
        let w = g.constant(w);
        let p = g.mul(out, w);
        let loss = g.sum(p);
        let v = g.value(loss).item();
        (v, grad.then(|| g.backward(loss).unwrap()))
    };
    let (_, grads) = eval(&store, true);
    let grads = grads.unwrap().dense(&store);
    let ids: Vec<ParamId> = store.ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + H;
            let (up, _) = eval(&store, false);
            store.get_mut(id).data_mut()[j] = orig - H;
            let (down, _) = eval(&store, false);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads[k].data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-2);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "{name} seed {seed}: {} entry {j}: analytic {analytic} numeric {numeric} (rel {rel:e})",
                store.name(id)
            );
        }
    }
}

fn for_seeds(mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(seed, &mut rng);
    }
}

/// Values with magnitude in [0.2, 2) so kinks and poles stay outside the stencil.
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
    Tensor::mat(r, c, data)
}

#[test]
fn elementwise_binary_with_broadcasting() {
    let shapes = [((3, 4), (3, 4)), ((3, 4), (1, 4)), ((3, 4), (3, 1)), ((3, 4), (1, 1)), ((1, 4), (3, 4))];
    for_seeds(|seed, rng| {
        for &((ar, ac), (br, bc)) in &shapes {
            let a = random(rng, ar, ac, -2.0, 2.0);
            let b = random(rng, br, bc, -2.0, 2.0);
            check("add", vec![a.clone(), b.clone()], seed, |g, x| g.add(x[0], x[1]));
            check("sub", vec![a.clone(), b.clone()], seed, |g, x| g.sub(x[0], x[1]));
            check("mul", vec![a.clone(), b.clone()], seed, |g, x| g.mul(x[0], x[1]));
            let bd = away_from_zero(rng, br, bc);
            check("div", vec![a, bd], seed, |g, x| g.div(x[0], x[1]));
        }
    });
}

#[test]
fn elementwise_unary() {
    for_seeds(|seed, rng| {
        let a = random(rng, 3, 5, -2.0, 2.0);
        let pos = random(rng, 3, 5, 0.3, 3.0);
        let nz = away_from_zero(rng, 3, 5);
        check("neg", vec![a.clone()], seed, |g, x| g.neg(x[0]));
        check("scale", vec![a.clone()], seed, |g, x| g.scale(x[0], -1.7));
        check("add_scalar", vec![a.clone()], seed, |g, x| g.add_scalar(x[0], 0.4));
        check("exp", vec![a.clone()], seed, |g, x| g.exp(x[0]));
        check("log", vec![pos.clone()], seed, |g, x| g.log(x[0]));
        check("relu", vec![nz], seed, |g, x| g.relu(x[0]));
        check("softplus", vec![a.clone()], seed, |g, x| g.softplus(x[0]));
        check("sigmoid", vec![a.clone()], seed, |g, x| g.sigmoid(x[0]));
        check("sqrt", vec![pos.clone()], seed, |g, x| g.sqrt(x[0]));
        check("square", vec![a], seed, |g, x| g.square(x[0]));
        check("powf", vec![pos], seed, |g, x| g.powf(x[0], -1.5));
    });
}

#[test]
fn matrix_and_reduction_ops() {
    for_seeds(|seed, rng| {
        let a = random(rng, 3, 4, -1.0, 1.0);
        let b = random(rng, 4, 2, -1.0, 1.0);
        check("matmul", vec![a.clone(), b], seed, |g, x| g.matmul(x[0], x[1]));
        check("transpose", vec![a.clone()], seed, |g, x| g.transpose(x[0]));
        check("sum", vec![a.clone()], seed, |g, x| g.sum(x[0]));
        check("mean", vec![a.clone()], seed, |g, x| g.mean(x[0]));
        check("sum_rows", vec![a.clone()], seed, |g, x| g.sum_rows(x[0]));
        check("sum_cols", vec![a.clone()], seed, |g, x| g.sum_cols(x[0]));
        check("gather_cols", vec![a.clone()], seed, |g, x| g.gather_cols(x[0], &[3, 0, 2]));
        check("slice_cols", vec![a.clone()], seed, |g, x| g.slice_cols(x[0], 1, 2));
        let c = random(rng, 3, 2, -1.0, 1.0);
        check("concat_cols", vec![a.clone(), c], seed, |g, x| g.concat_cols(&[x[0], x[1], x[0]]));
        let sq = random(rng, 4, 4, -1.0, 1.0);
        check("diag", vec![sq], seed, |g, x| g.diag(x[0]));
        let v = random(rng, 4, 1, -1.0, 1.0);
        check("diag_embed", vec![v], seed, |g, x| g.diag_embed(x[0]));
        let z = random(rng, 5, 4, -1.0, 1.0);
        check("sq_dist", vec![a, z], seed, |g, x| g.sq_dist(x[0], x[1]));
    });
}

/// Symmetric positive definite `B Bᵀ + I` built on the tape.
fn spd(g: &mut Graph, b: NodeId) -> NodeId {
    let n = g.shape(b).0;
    let bt = g.transpose(b);
    let a = g.matmul(b, bt);
    let eye = g.constant(Tensor::eye(n));
    g.add(a, eye)
}

#[test]
fn cholesky_and_triangular_solve() {
    for_seeds(|seed, rng| {
        let b = random(rng, 4, 4, -1.0, 1.0);
        let rhs = random(rng, 4, 3, -1.0, 1.0);
        check("cholesky", vec![b.clone()], seed, |g, x| {
            let a = spd(g, x[0]);
            g.cholesky(a).unwrap()
        });
        check("solve_lower", vec![b.clone(), rhs], seed, |g, x| {
            let a = spd(g, x[0]);
            let l = g.cholesky(a).unwrap();
            g.solve_lower(l, x[1])
        });
        check("log_det", vec![b], seed, |g, x| {
            let a = spd(g, x[0]);
            let l = g.cholesky(a).unwrap();
            let d = g.diag(l);
            let ld = g.log(d);
            g.sum(ld)
        });
    });
}

#[test]
fn batch_norm_train_and_eval_paths() {
    for_seeds(|seed, rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, 6, 3, -2.0, 2.0));
        let mut bn = BatchNorm::new(&mut store, "bn", 3);
        store.set(bn.gamma, random(rng, 1, 3, 0.5, 1.5));
        store.set(bn.beta, random(rng, 1, 3, -0.5, 0.5));
        bn.running_mean = vec![0.1, -0.2, 0.3];
        bn.running_var = vec![0.5, 1.5, 2.0];
        for train in [true, false] {
            check_store("batch_norm", store.clone(), seed, |g, s| {
                let xn = g.param(s, x);
                bn.forward(g, s, xn, train).1
            });
        }
    });
}

#[test]
fn mlp_forward_with_batch_norm() {
    for_seeds(|seed, rng| {
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, 5, 3, -1.0, 1.0));
        let config = MlpConfig {
            layer_widths: vec![3, 5, 4],
            activation: Activation::Relu,
            dropout_p: 0.0,
            batch_norm_after_encoder: true,
        };
        let mlp = Mlp::new(&mut store, "m", config, rng).unwrap();
        for l in &mlp.layers {
            let b = store.get(l.bias).map(|_| rng.random_range(-0.3..0.3));
            store.set(l.bias, b);
        }
        check_store("mlp", store, seed, |g, s| {
            let xn = g.param(s, x);
            mlp.forward(g, s, xn, Mode::Train, None).unwrap().output
        });
    });
}

#[test]
fn gaussian_nll_loss() {
    for_seeds(|seed, rng| {
        let mu = random(rng, 6, 1, -2.0, 2.0);
        let lv = random(rng, 6, 1, -1.5, 1.5);
        let t = random(rng, 6, 1, -2.0, 2.0);
        check("gaussian_nll", vec![mu, lv, t], seed, |g, x| gaussian_nll(g, x[0], x[1], x[2]));
    });
}
