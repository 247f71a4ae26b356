//! File formats, dataset loading, experiment orchestration and the
//! command-line driver around `oxqnn-core`.

pub mod cli;
pub mod devcfg;
pub mod error;
pub mod experiment;
pub mod idx;
pub mod output;
pub mod qnn;

pub use cli::cli_dispatch;
pub use error::{Error, Result};
