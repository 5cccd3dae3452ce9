//! Pipeline commands and the HTTP inference service behind the `xsect`
//! binary.

pub mod commands;
pub mod image;
pub mod prediction;
pub mod server;

pub use commands::{Cli, Command};
