//! Fixtures shared by the head benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqdqn::heads::{AnyHead, Batch, HeadConfig, HeadKind};
use uqdqn::ndcore::Tensor;

pub const OBS_DIM: usize = 4;
pub const ACTIONS: usize = 2;

fn states(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let data = (0..n * OBS_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::new(vec![n, OBS_DIM], data).expect("shape")
}

/// A CartPole-shaped head with its default config, initialized from random states.
pub fn head(kind: HeadKind) -> AnyHead {
    use uqdqn::heads::Head;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut h = AnyHead::new(&HeadConfig::default_for(kind), OBS_DIM, ACTIONS, 1000, &mut rng).expect("head");
    h.initialize_from_data(&states(&mut rng, 64), &mut rng).expect("init");
    h
}

/// A random batch with targets.
pub fn batch(n: usize) -> (Batch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Batch {
        states: states(&mut rng, n),
        actions: (0..n).map(|_| rng.random_range(0..ACTIONS)).collect(),
        rewards: vec![1.0; n],
        next_states: states(&mut rng, n),
        terminals: vec![false; n],
    };
    let y = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    (b, y)
}

pub fn single_state() -> Tensor {
    states(&mut ChaCha8Rng::seed_from_u64(2), 1)
}
