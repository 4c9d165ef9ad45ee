//! Runtime pieces around `deployr-core`: the simulated EMR and its HTTP
//! client, the serving engine, the packet store, monitoring and reports.

pub mod bundle_io;
pub mod client;
pub mod clock;
pub mod config;
pub mod emr;
pub mod error;
pub mod manifest;
pub mod monitor;
pub mod parity;
pub mod report;
pub mod serve;
pub mod sim;
pub mod store;
pub mod warehouse_io;

pub use error::{Error, Result};
