//! Library half of the `mosaic` binary, split out so tests can reuse the config types.

pub mod commands;
pub mod config;
pub mod files;
