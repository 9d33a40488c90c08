//! Temperature-conditioned next-step predictor for coarse-grained molecular
//! dynamics, with mixed-sample curriculum pre-training and meta-initialized
//! prompt adaptation.
//!
//! Pipeline: [`mdgen`] generates temperature-tagged trajectories of a bead
//! chain under a Langevin thermostat; [`model`] assembles the equivariant
//! backbone (prompt encoder, structure encoder, predictor stack) plus the two
//! mixing networks; [`stage1`] runs curriculum pre-training, [`meta`] the
//! prompt meta-training, and [`evalkit`] the fine-tune-then-evaluate protocol
//! with its report and prompt-export artifacts.

pub mod config;
pub mod egnn;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod mdgen;
pub mod meta;
pub mod model;
pub mod par;
pub mod seeds;
pub mod stage1;

pub use error::{Error, Result};
