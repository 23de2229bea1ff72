//! File formats, checkpoints, run configuration and the `ntkt` command line
//! around [`ntkt_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod models;
pub mod pipeline;

pub use ntkt_core as core;
