//! Batch front end for the network formation simulator.

pub mod commands;
pub mod config;
pub mod output;
