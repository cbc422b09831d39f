//! RGB-thermal object detection at desk scale.
//!
//! A dual-stream detector for co-registered visible/thermal image pairs.
//! The two backbone pyramids are fused by group shuffled multi-receptive
//! attention (GSMA) at the P3/P4 stages and by plain concatenation at P5,
//! predictions come from three branches (visible, thermal, fusion) that are
//! trained against visible, thermal, and union annotations respectively,
//! and inference combines the branches by decision-level weighted averaging.
//!
//! The crate ships everything needed to exercise those mechanisms without
//! external datasets:
//!
//! * [`shuffle`] — the parameter-free group shuffle permutation and inverse.
//! * [`gsma`] — SPC multi-receptive convolution, SE channel attention, and
//!   the full GSMA block.
//! * [`network`] — dual-stream backbone, three PAN neck/head branches,
//!   auxiliary segmentation heads, checkpointing.
//! * [`supervision`] — union-annotation construction, anchor target
//!   assignment, and the multi-branch detection/segmentation loss.
//! * [`fusion`] — decision-level grid fusion, box decoding, NMS.
//! * [`metrics`] — log-average miss rate and mAP evaluation.
//! * [`data`] — deterministic synthetic paired-modality dataset generator
//!   and loader.
//! * [`train`] / [`eval`] / [`ablate`] — reproducible runs behind the
//!   `rgbt-det` CLI.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gsma;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod shuffle;
pub mod supervision;
pub mod train;

pub use error::{Error, Result};
