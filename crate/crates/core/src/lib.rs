//! Diffusion-based style removal and transfer on a procedural toy image
//! domain: a from-scratch denoiser, deterministic forward/reverse chains,
//! embedding-space disentanglement losses, and the fine-tuning loop that
//! ties them together. Everything runs on CPU from fixed seeds.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod schedule;
pub mod tensor;

pub use denoiser::{DenoiserConfig, DenoiserParams, LinearGaussianOracle};
pub use diffusion::{ChainResult, Denoiser};
pub use error::{Error, Result};
pub use schedule::{make_plan, NoiseSchedule, TimestepPlan};
pub use tensor::{
    adam_step, AdamState, Ctx, Eager, GradMap, NdArray, ParamSet, Precision, Tape, TapeBinding,
    Taped, Var,
};
