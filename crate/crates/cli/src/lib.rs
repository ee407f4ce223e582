//! Experiment runner, theory tables and figure rendering for `tlab`.

pub mod config;
pub mod error;
pub mod runner;
pub mod output;
pub mod plot;
pub mod commands;
pub mod selftest;
