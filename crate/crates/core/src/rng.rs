//! Seeded randomness. ChaCha8 keeps streams identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::scalar::Scalar;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under one user seed.
pub fn derived(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tensor with entries drawn from uniform(lo, hi) in row-major order.
pub fn uniform<T: Scalar>(rng: &mut LabRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
