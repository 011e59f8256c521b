//! Parameter initialization.

use super::Tensor;
use rand::Rng;

/// Kaiming-uniform initialization with fan-in scaling and leaky-ReLU gain.
///
/// Bound is `gain * sqrt(3 / fan_in)` with `gain = sqrt(2 / (1 + a^2))`.
pub fn kaiming_uniform(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    negative_slope: f64,
) -> Tensor {
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}
