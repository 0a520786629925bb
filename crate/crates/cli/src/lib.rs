//! Pipeline configuration and stage runners behind the `musicrl` binary.

pub mod config;
pub mod stages;
