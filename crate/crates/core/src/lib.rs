//! Structure-augmented keyframe detection for blind-sweep ultrasound.
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod fsutil;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod par;
pub mod plot;
pub mod prior;
pub mod prs;
pub mod selfcheck;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use config::DetectorConfig;
pub use error::{Error, Result};
