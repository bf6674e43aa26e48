use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::Conv2dParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// ChaCha8 stream keyed by (seed, stream). ChaCha8 is the PRNG contract for
/// the whole crate: every randomized artifact derives from it so identical
/// seeds reproduce identical runs.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in (−bound, bound), sampled in f64 so f32 and f64 models
/// share the same initialization for a given seed.
pub fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::of((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}

impl<S: Scalar> Conv2dParams<S> {
    /// Kernel from a seeded uniform distribution scaled by 1/√(fan-in);
    /// bias zero.
    pub fn init(
        rng: &mut ChaCha8Rng,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform_tensor(rng, vec![c_out, c_in, k, k], bound);
        Conv2dParams::new(weight, Tensor::zeros(vec![c_out]), stride, padding)
            .expect("valid construction")
    }

    /// All-zero kernel and bias; used where training must start from an
    /// identity warp.
    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2dParams::new(
            Tensor::zeros(vec![c_out, c_in, k, k]),
            Tensor::zeros(vec![c_out]),
            stride,
            padding,
        )
        .expect("valid construction")
    }
}
