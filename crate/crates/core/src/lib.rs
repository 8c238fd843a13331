//! Multi-scale, multi-task tumour detector built from scratch: a residual
//! backbone, a top-down spatial feature encoder, anchor-based two-stage
//! detection heads trained with an IoU loss, and AP/mAP/IoU evaluation on
//! synthetic bladder phantoms.

pub mod anchors;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
