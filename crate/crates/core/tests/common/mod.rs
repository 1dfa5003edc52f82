//! Helpers shared by the integration tests: finite-difference oracle,
//! random fixtures and the directional experiment.
#![allow(dead_code)]

pub mod experiment;

use advflyp::encoders::{init_model, EncoderConfig, ModelState, Nonlinearity};
use advflyp::tensor::Tensor;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both
/// vectors are essentially zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = uniform(&[n, d], -1.0, 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

/// Vision 12 → 10 → `embed`, text 6 → 8 → `embed` over a 10-token vocabulary.
pub fn small_model(seed: u64, act: Nonlinearity, embed: usize) -> ModelState<f64> {
    let vision = EncoderConfig {
        input_dim: 12,
        hidden_dims: vec![10],
        embed_dim: embed,
        nonlinearity: act,
        seed: 0,
        vocab_size: None,
    };
    let text = EncoderConfig {
        input_dim: 6,
        hidden_dims: vec![8],
        embed_dim: embed,
        nonlinearity: act,
        seed: 0,
        vocab_size: Some(10),
    };
    init_model(&vision, &text, 0.07, seed).unwrap()
}
