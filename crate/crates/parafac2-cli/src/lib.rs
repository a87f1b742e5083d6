//! Library surface of the command-line frontend: configuration resolution,
//! factor-matrix text I/O and the subcommand implementations. The `parafac2`
//! binary is a thin clap wrapper over [`commands`].

pub mod commands;
pub mod config;
pub mod matio;
