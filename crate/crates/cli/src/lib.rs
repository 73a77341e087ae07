//! Library side of the gateway binary: configuration layering and the
//! optional HTTP service, shared with the integration tests.

pub mod config;
#[cfg(feature = "service")]
pub mod service;
