//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values live in row-major `f64` buffers. A [`Tape`] records every
//! primitive operation applied to its [`Var`] handles; calling
//! [`Tape::backward`] on a scalar replays the record in reverse and yields
//! exact gradients for every leaf that requires them. Trainable weights are
//! kept in a [`ParamSet`] and copied onto a fresh tape for each step, so a
//! tape never outlives a single forward/backward pass.
//!
//! The crate also carries the pieces a training loop needs around the tape:
//! momentum SGD with plateau decay ([`Sgd`]), global-norm gradient clipping,
//! a straight-through Gumbel-Softmax sampler, and a seedable, splittable
//! random stream ([`RngStream`]).

mod error;
mod gumbel;
mod init;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gumbel::{gumbel_noise, gumbel_softmax, sample_open_unit, GumbelSampler, GumbelSamplerConfig};
pub use init::kaiming_uniform;
pub use optim::{clip_global_norm, global_grad_norm, PlateauDecay, Sgd, SgdConfig};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::{ParamId, ParamSet, Tensor};
