//! Proposal-based multiple instance learning for weakly-supervised temporal
//! action localization on pre-extracted segment features.
//!
//! The pipeline has two trained stages. A segment-level model ([`smil`])
//! produces an attention sequence that is thresholded into candidate
//! proposals ([`proposals`]); a proposal-level model ([`pmil`]) then
//! classifies those proposals directly, with completeness pseudo-labels and
//! a cross-modal rank-consistency loss. [`infer`] and [`eval`] turn model
//! outputs into scored detections and mAP@IoU reports.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod mil;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod pmil;
pub mod proposals;
pub mod smil;
pub mod synthetic;
mod train;

pub use error::{Error, Result};
pub use train::{EpochLog, LossBreakdown};
