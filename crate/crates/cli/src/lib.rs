//! Command line and HTTP front ends for voltlab.

pub mod cli;
pub mod server;
pub mod stages;
