//! HTTP service and command-line front end for `arbor-core`.
//!
//! Both surfaces go through [`ops`], so a query run from the CLI and the same
//! query sent to `/v1/query` produce byte-identical transcripts.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod ops;
pub mod store;
