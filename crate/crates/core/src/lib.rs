pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod runner;

pub use error::{Error, Result};
