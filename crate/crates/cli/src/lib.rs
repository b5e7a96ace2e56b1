//! Command-line driver: configuration, subcommands, projection and the
//! quick invariant suite.

pub mod app;
pub mod config;
pub mod project;
pub mod verify;
