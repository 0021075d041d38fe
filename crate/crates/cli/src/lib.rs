//! Command-line tools, checkpoints and the intervention-session service.

pub mod checkpoint;
pub mod experiment;
pub mod service;
pub mod verify;
