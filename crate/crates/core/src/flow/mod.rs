//! Probability paths, training targets, and samplers.

mod diffusion;
mod path;
mod sampler;
mod schedule;

pub use diffusion::{DiffusionSchedule, X0_CLIP};
pub use path::{
    corrected_target, CorrectionSign,
    alt_head_target, base_velocity, flow_loss, gaussian_like, interpolate, meanflow_target,
    sample_times, time_partial, total_derivative, AltTarget, FlowSample, TimeDerivative,
    DEFAULT_TIME_STEP,
};
pub use sampler::{function_evaluations, multi_step_sample, one_step_sample, VelocityField};
pub use schedule::{HeadKind, ScheduleKind};
