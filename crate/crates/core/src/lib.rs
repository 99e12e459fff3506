//! Dynamic-analysis platform for stateful multi-API RPC middleware.

pub mod analyzer;
pub mod backend;
pub mod campaign;
pub mod client;
pub mod config;
pub mod coverage;
pub mod error;
pub mod generators;
pub mod instance;
pub mod manifest;
pub mod monitors;
pub mod records;
pub mod surface;
pub mod target;
pub mod troop;
pub mod verify;
pub mod worker;
pub mod wire;

pub use error::{Error, Result};
