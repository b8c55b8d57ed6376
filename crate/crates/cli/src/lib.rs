//! Library side of the `care` command: configuration, run directories,
//! reports and case export. The binary is a thin argument parser over
//! [`commands`].

pub mod cases;
pub mod commands;
pub mod config;
pub mod report;
pub mod rundir;
pub mod studies;
