//! Algorithmic core of the deployment loop.
//!
//! Everything in this crate is pure and allocation-only: the synthetic EMR
//! world, count featurization, the decision forest, cron arithmetic,
//! randomization arms, evaluation metrics and drift statistics. Network,
//! file formats and the CLI live in the `deployr` companion crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod arm;
pub mod cohort;
pub mod cron;
pub mod drift;
pub mod error;
pub mod features;
pub mod fingerprint;
pub mod forest;
pub mod metrics;
pub mod model;
pub mod packet;
pub mod rng;
pub mod serde_float;
pub mod time;
pub mod warehouse;
pub mod world;

pub use error::{Error, Result};
pub use fingerprint::Fingerprint;
pub use time::Timestamp;
