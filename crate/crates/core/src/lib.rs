//! Multi-resolution denoising diffusion for gridded spatiotemporal traffic.
//!
//! The reverse chain is split into stages; each stage runs at its own
//! spatiotemporal resolution and ends on a clean field of that resolution,
//! which then guides the next, finer stage.

pub mod bundle;
pub mod engine;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod synth;

pub use bundle::TensorBundle;
pub use engine::{
    canonical_sample, hnap_forward, refine_zero_shot, rrdp_sample, train, training_step, NetworkPredictor,
    NoisePredictor, Normalizer, OraclePredictor, PriorSource, SampleOptions, SampleOutput, TrainConfig, TrainReport,
    TrainSample, TrainedModel,
};
pub use error::{Axis, BundleError, Error, Result};
pub use grid::{Aggregation, MultiScaleTraffic, Replication, ResolutionLevel, SpatioTemporalGrid};
pub use guidance::{FusionParams, PriorNoise};
pub use nn::{Denoiser, DenoiserConfig, DenoiserParams, OutputMode, PriorSign};
pub use schedule::{Adding, Denoising, Intensity, RgpPlan, ScheduleSpec, SigmaForm, Strategy};
pub use synth::{CityConfig, SyntheticCity, Tile, UrbanContext};
