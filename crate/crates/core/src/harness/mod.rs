//! Optimizer, metrics, training loops and the whole-video restoration pipeline.

pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use config::{QuintupleSource, Settings, SynthSettings, TrainConfig};
pub use metrics::{psnr, ssim};
pub use optim::{adam_step, lr_schedule, AdamParams, AdamState};
pub use pipeline::{evaluate, read_video, restore_video, run_pipeline, PipelineRun, VideoInput};
pub use train::{accuracy, collect_samples, cosine_margin, detect, train_deblur, train_detector, DeblurSample, TrainLog};
