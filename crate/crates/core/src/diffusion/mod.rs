//! Linear-beta DDPM schedule, deterministic DDIM sampling and inversion, and
//! the noise-prediction training loop.

mod ddim;
mod schedule;
mod train;

pub use ddim::{ddim_update, Diffusion, NoisePredictor};
pub use schedule::{DdimSchedule, NoiseSchedule};
pub use train::{train, TrainConfig, TrainRecord, Trainer};
