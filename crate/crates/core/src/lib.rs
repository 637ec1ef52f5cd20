//! Unsupervised domain adaptation for semantic segmentation with a
//! mask-reconstruction guider, built on synthetic two-domain scenes.

pub mod checkpoint;
pub mod config;
pub mod data_synth;
pub mod error;
pub mod evaluation;
pub mod guider;
pub mod losses;
pub mod mixing;
pub mod nn;
pub mod seeding;
pub mod segmodel;
pub mod selftrain;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use trainer::{MethodRegistry, Trainer, UdaMethod};
