//! Density-guided crowd detection toolkit.
//!
//! - [`geometry`]: boxes, IoU, pinhole projection of cuboids, field-of-view filtering
//! - [`density`]: box-window density maps, comparison formulations, L1 density loss,
//!   overlapping-triplet statistic
//! - [`embedding`]: density quantization and embedding lookup
//! - [`cqblock`]: toy density module and density-guided decoder with verified gradients
//! - [`metrics`]: AP, log-average miss rate, center-distance mAP, occlusion recall, NMS
//! - [`io`]: annotation parsers, artifact file formats and run configuration

pub mod cqblock;
pub mod density;
pub mod embedding;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod tensor;
