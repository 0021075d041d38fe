//! Gumbel-Softmax relaxation of categorical sampling.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSamplerConfig {
    pub temperature: f64,
    pub straight_through: bool,
    pub rng_seed: u64,
}

impl Default for GumbelSamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            straight_through: true,
            rng_seed: 0,
        }
    }
}

/// Uniform draw from the open interval (0, 1); exact 0 is rejected.
pub fn sample_open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Standard Gumbel noise from a uniform draw: `-log(-log(u))`.
pub fn gumbel_noise(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Draws `softmax((log_probs + h) / temperature)` row-wise with fresh noise
/// per entry. With `straight_through` the forward value is the one-hot of
/// the row argmax while gradients follow the soft sample.
pub fn gumbel_softmax(
    tape: &mut Tape,
    log_probs: Var,
    temperature: f64,
    straight_through: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(TensorError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let n = tape.value(log_probs).len();
    if n == 0 {
        return Err(TensorError::InvalidArgument("gumbel_softmax over zero classes".into()));
    }
    let shape = tape.shape(log_probs).to_vec();
    let noise: Vec<f64> = (0..n).map(|_| gumbel_noise(sample_open_unit(rng))).collect();
    let h = tape.constant(shape, noise)?;
    let shifted = tape.add(log_probs, h)?;
    let scaled = tape.scale(shifted, 1.0 / temperature)?;
    let soft = tape.softmax(scaled)?;
    if straight_through {
        tape.straight_through(soft)
    } else {
        Ok(soft)
    }
}

/// Sampler owning its own random stream.
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    config: GumbelSamplerConfig,
    rng: RngStream,
}

impl GumbelSampler {
    pub fn new(config: GumbelSamplerConfig) -> Result<Self> {
        if !(config.temperature > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                config.temperature
            )));
        }
        Ok(Self {
            config,
            rng: RngStream::new(config.rng_seed),
        })
    }

    pub fn from_stream(config: GumbelSamplerConfig, rng: RngStream) -> Result<Self> {
        let mut s = Self::new(config)?;
        s.rng = rng;
        Ok(s)
    }

    pub fn config(&self) -> &GumbelSamplerConfig {
        &self.config
    }

    pub fn sample(&mut self, tape: &mut Tape, log_probs: Var) -> Result<Var> {
        gumbel_softmax(
            tape,
            log_probs,
            self.config.temperature,
            self.config.straight_through,
            &mut self.rng,
        )
    }
}
