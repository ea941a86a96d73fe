use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A caller-supplied argument is invalid (index out of range, repeated index, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input value outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A dense object would exceed the configured size limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// Non-finite values or solver breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(alloc::format!($($arg)*)) };
}
macro_rules! num_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($arg)*)) };
}
pub(crate) use {arg_err, num_err, shape_err};
