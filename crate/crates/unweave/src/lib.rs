//! File formats, pipelines, command-line interface and annotation service
//! around [`unweave_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod display;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod service;
pub mod trainlog;
