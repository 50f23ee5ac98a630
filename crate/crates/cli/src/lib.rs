//! Command implementations behind the `capguide` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod recipes;
