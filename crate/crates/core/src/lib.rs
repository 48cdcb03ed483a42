//! Goal-directed procedure planning with projected conditional diffusion.
//!
//! Given a start observation, a goal (observation or task label), and a
//! horizon, sample an action sequence from a learned distribution. The crate
//! provides the full stack at desk scale: a from-scratch autodiff engine,
//! cosine noise schedules with DDPM/DDIM steps, condition-annotated plan
//! tensors with projection, three denoiser backbones behind a runtime
//! registry, the training and sampling loops, planning metrics, and a
//! synthetic procedural-task generator.

pub mod classifier;
pub mod conditioning;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
