//! Large-batch training for click-through-rate models.
//!
//! The crate covers the full desk-scale pipeline: data ingestion and
//! synthetic generation ([`data`]), sparse embedding tables ([`embedding`]),
//! four CTR heads with manual backward passes ([`models`]), Adam/SGD with
//! in-gradient L2 ([`optim`]), embedding-gradient clipping including the
//! adaptive column-wise rule ([`clip`]), batch-size scaling rules
//! ([`scaling`]), AUC and logloss ([`metrics`]), and an experiment runner
//! ([`harness`]).

pub mod clip;
pub mod data;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod scaling;

pub use error::{Error, Result};
