//! Configuration, artifacts and command implementations.

pub mod pipeline;
pub mod config;
pub mod commands;
