//! Command line and HTTP service for `lbm-core`.

pub mod cli;
pub mod server;
