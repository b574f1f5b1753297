//! Trajectory-controlled guidance for latent video diffusion.
//!
//! A user draws boxes along a path; the sampler nudges the latent at a few
//! noisy timesteps so that features inside each box match the first frame's
//! features, then restores the high frequencies of the unoptimized latent.

pub mod attention;
pub mod backend;
pub mod baselines;
pub mod error;
pub mod grid_io;
pub mod guidance;
pub mod latent;
pub mod metrics;
pub mod sampler;
pub mod scenes;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod trajectory;

pub use backend::{
    AdapterManifest, BlobParams, DenoiserBackend, FeatureMapSet, LayerKey, LayerKind, Stage, SyntheticBlobDenoiser,
    ToyUNetConfig, ToyUNetDenoiser,
};
pub use baselines::BaselineVariant;
pub use error::{Error, Result};
pub use guidance::{FeatureSource, GuidanceConfig, GuidanceTarget, Weighting};
pub use latent::{LatentShape, LatentVideo};
pub use metrics::TrackedTrajectory;
pub use sampler::{generate, GenerateOptions, Generation, NoiseInit, ScheduleConfig};
pub use spectral::{FilterKind, FilterSpec};
pub use tensor::Tensor;
pub use trajectory::{BoxTrajectory, KeyframeTrajectory, LatentBox, Point};
