//! Unsupervised domain adaptation for identity retrieval with multiple
//! co-teaching networks and mean-teacher parameter averaging.
//!
//! The pieces, bottom-up:
//!
//! - [`encoder`]: a small MLP embedding network with exact gradients.
//! - [`losses`]: batch-hard triplet loss and P×K batch sampling.
//! - [`clustering`]: DBSCAN, confidence-tier peeling, pseudo-label F-score.
//! - [`coteach`]: temporal-average models, small-loss selection, and the
//!   teacher/student paradigm scheduler.
//! - [`evalmetrics`]: mAP and CMC.
//! - [`synthdata`]: seeded source/target datasets with a domain gap.
//! - [`pipeline`]: source training, fine-tuning, and the ablation runner.
//!
//! See the `examples/` directory for one runnable walkthrough per capability.

pub mod clustering;
pub mod coteach;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
