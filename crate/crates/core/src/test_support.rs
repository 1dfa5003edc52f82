//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{init_model, EncoderConfig, ModelState, Nonlinearity};
use crate::tensor::Tensor;

pub fn tiny_model(seed: u64) -> ModelState<f64> {
    let vision = EncoderConfig {
        input_dim: 12,
        hidden_dims: vec![10],
        embed_dim: 8,
        nonlinearity: Nonlinearity::Relu,
        seed: 0,
        vocab_size: None,
    };
    let text = EncoderConfig {
        input_dim: 6,
        hidden_dims: vec![8],
        embed_dim: 8,
        nonlinearity: Nonlinearity::Relu,
        seed: 0,
        vocab_size: Some(10),
    };
    init_model(&vision, &text, 0.07, seed).unwrap()
}

/// `n` images of shape 3×2×2 with pixels uniform in `[0, 1]`.
pub fn images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 2, 2], |_| rng.gen_range(0.0..1.0))
}

/// `n` random unit rows of width `d`.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}
