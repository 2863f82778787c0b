//! File formats, output handling and the command line for the
//! `redesign-core` pipeline.
//!
//! Every file a command writes embeds the run's config hash, and every
//! command leaves a `<command>.manifest.json` with its inputs, outputs,
//! seed and versions.

pub mod cli;
pub mod config;
pub mod fixture;
pub mod formats;
pub mod ingest;
pub mod output;
pub mod plot;
pub mod report;

pub use cli::run;
