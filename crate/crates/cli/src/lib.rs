//! Command-line front end: configuration resolution and the `run`,
//! `inspect-partition` and `eval` commands.

pub mod commands;
pub mod config;
