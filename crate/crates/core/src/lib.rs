pub mod agd;
pub mod embed;
pub mod encoder;
mod error;
pub mod eval;
pub mod heads;
pub mod init;
pub mod model;
pub mod run;
pub mod sample;
pub mod synth;
pub mod workload;

pub use error::{CoreError, Result};

pub type Moments32 = agd::Moments<f32>;
pub type Moments64 = agd::Moments<f64>;
pub type Checkpoint32 = agd::Checkpoint<f32>;
pub type Checkpoint64 = agd::Checkpoint<f64>;
pub type TrainState32<P> = agd::TrainState<f32, P>;
pub type TrainState64<P> = agd::TrainState<f64, P>;
