//! Scribble-guided diffusion guidance.
//!
//! Moment-alignment and focal cross-attention losses on user scribbles, KL-based
//! scribble propagation over aggregated self-attention, and a DDIM sampler that
//! shifts the latent along the loss gradient. A closed-form mixture world stands
//! in for the denoiser so every piece can be checked against exact answers.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`.

pub mod attention;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod moments;
pub mod propagation;
pub mod rng;
pub mod scalar;
pub mod scribble;
pub mod toyworld;

pub use attention::{cross_loss, cross_loss_and_grad, focal_loss, grad_cross_loss, grad_focal_loss, CrossLoss, GuidanceConfig};
pub use diffusion::{
    cfg_combine, ddim_step, guided_sample, make_schedule, sample_ddim, DdimOutput, LatentState, SampleOutput,
    ScheduleSpec, StepDiagnostics,
};
pub use error::{Error, Result};
pub use grid::{avg_pool, resize_bilinear, Grid2D, Mask, ProbVector};
pub use metrics::{miou, orientation_error, scribble_ratio, EvalReport};
pub use moments::{grad_moment_loss, moment_loss, moment_summary, MomentLoss, MomentSummary, TokenMaps};
pub use propagation::{
    aggregate_self_attention, merge_neighbors, pool_anchors, symmetric_kl, AggregatedAttention, AnchorGrid,
    AttentionLevel, Merge, PropagationState, SelfAttentionStack,
};
pub use rng::Rng;
pub use scalar::Scalar;
pub use scribble::{rasterize, Scribble, ScribbleFile, ScribbleGeometry, ScribbleSet, StrokeKind};
pub use toyworld::{ToyWorld, WorldSpec};

pub type Grid = Grid2D<f64>;
pub type GridF32 = Grid2D<f32>;
pub type Schedule = diffusion::DiffusionSchedule<f64>;
pub type World = ToyWorld<f64>;
pub type Latent = LatentState<f64>;
