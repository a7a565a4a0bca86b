//! Noise schedules, the weighted noise-prediction objective, Adam and the
//! ancestral sampler.

mod adam;
mod sample;
mod schedule;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use sample::{ddpm_sample, ddpm_sample_with_progress, SampleOptions, SampleOutput};
pub use schedule::{make_schedule, mu_theta, posterior_mean, predict_x0, q_sample, NoiseSchedule, ScheduleKind};
pub use train::{draw_corruption, loss_simple, LossOutput, StepRecord, Trainer, TrainConfig, LOG_HEADER};
