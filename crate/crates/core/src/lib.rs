//! Metadata-enhanced contrastive pretraining for longitudinal imaging cohorts.

pub mod augment;
pub mod batching;
pub mod cohort;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod relations;
pub mod schedule;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
