//! Brand-aware image captioning: an LSTM caption decoder with a
//! classification-aware loss and linear image-rating heads, trained with a
//! small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod train;

pub use error::{Error, Result};
