//! Noise schedules, samplers, the block-chain denoiser and its training.

pub mod chain;
pub mod container;
pub mod data;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod teacher;

pub use chain::{sample, ChainNoise, TrajectoryRecord};
pub use data::{Dataset, DatasetSpec};
pub use model::{BlockChainModel, BlockKind, BoundModel, DataLayout, ModelSpec};
pub use sampler::{advance, forward_diffuse, predict_x0, reverse_step, SamplerKind};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use teacher::{train_teacher, TeacherConfig, TeacherReport};
