//! The shared noise-estimation network and its training plumbing.

pub mod denoiser;
pub mod encoding;
pub mod gradcheck;
pub mod layers;
pub mod optim;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams, NetInput, OutputMode, PriorSign, StageCondition};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Sgd, SgdConfig};
