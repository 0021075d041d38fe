//! Concept bottleneck and concept embedding models with test-time
//! interventions, intervention-aware training, selection policies,
//! datasets and evaluation.

pub mod error;
pub mod groups;
pub mod intervention;
pub mod model;
pub mod data;
pub mod eval;
pub mod policy;
pub mod train;

pub use error::{Error, Result};
pub use groups::Groups;
