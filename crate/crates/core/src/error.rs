use alloc::string::String;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A value fell outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),
    /// Tensor or vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration or network description is inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}

macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::Error::Domain(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use domain_err;
pub(crate) use shape_err;
