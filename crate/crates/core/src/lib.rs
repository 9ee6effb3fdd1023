//! Track monitoring from locomotive camera frames.
//!
//! Frames flow through [`ingest`] into the classical rail scanner
//! ([`railgeom`] + [`trackscan`]) and the detector plugins ([`detecthub`]);
//! [`signalstate`] tracks signals and switches across frames and
//! [`health`] turns everything into a track health index, immediate
//! safety flags and report files. [`synth`] renders scenes with exact
//! ground truth and scores reports against it.

pub mod cli;
pub mod config;
pub mod detecthub;
pub mod error;
pub mod health;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod railgeom;
pub mod raster;
pub mod signalstate;
pub mod synth;
pub mod trackscan;

pub use config::{load_config, RunConfig};
pub use error::{Error, Result};
pub use par::ExecMode;
