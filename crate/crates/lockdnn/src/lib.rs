//! Host-side tooling around `lockdnn-core`: model and key files, reports,
//! the toy dataset and trainer, attack experiments and the `lockdnn` CLI.

pub mod attacks;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod keyfile;
pub mod manifest;
pub mod report;
pub mod train;

pub use error::Error;
