use rand::Rng;

use crate::tape::LEAKY_RELU_SLOPE;
use crate::tensor::Tensor;

/// `[fan_in, fan_out]` weight matrix drawn from the Kaiming uniform
/// distribution for leaky-ReLU layers.
pub fn kaiming_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let gain = (2.0 / (1.0 + LEAKY_RELU_SLOPE * LEAKY_RELU_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}
