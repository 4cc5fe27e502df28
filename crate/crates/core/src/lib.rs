//! Query-sharing pixel-level contrastive learning for partially-supervised
//! instance segmentation.
//!
//! The crate trains a small RoI-level segmentation model on a procedurally
//! generated shapes benchmark. Mask annotations exist only for the *base*
//! categories; *novel* categories are supervised through boxes alone. A
//! contrastive head pulls foreground pixel features towards a batch-wide
//! foreground query (and background features towards a background query),
//! using ground-truth masks for base proposals and CAM pseudo-masks for novel
//! ones. Its features, together with the CAM, feed a class-agnostic mask head.
//!
//! Module map:
//!
//! - [`data`]: synthetic scenes, RoI extraction, on-disk layout.
//! - [`partition`]: foreground/background partitions and boundary distances.
//! - [`sampling`]: shared queries and the four key sets.
//! - [`contrast`]: the contrastive term and the four-term loss, with gradients.
//! - [`nn`] and [`heads`]: the trainable layers and model heads.
//! - [`training`]: the total objective, λ warmup and the optimization loop.
//! - [`eval`]: IoU / AP metrics, ablations and figures.
//! - [`checkpoint`]: versioned parameter snapshots.
//! - [`verify`]: loss and gradient self-checks.

pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod nn;
pub mod partition;
pub mod sampling;
pub mod training;
pub mod verify;

pub use config::TrainConfig;
pub use error::{Error, Result};
