//! Probabilistic trajectory forecasting with agent-centric teachers,
//! scene-centric students and trajectory distillation.

pub mod benchlat;
pub mod diffcore;
pub mod error;
pub mod geom;
pub mod gmm;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
