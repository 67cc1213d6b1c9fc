//! REST service and command-line front end over `prosody-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod editing;
pub mod error;
pub mod store;

pub use error::ServiceError;
