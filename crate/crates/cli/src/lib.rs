//! Library surface of the `echoprobe` binary: configuration loading,
//! atomic artifact IO, and the pipeline stages. Kept as a library so
//! integration and acceptance tests can drive stages in-process.

pub mod config;
pub mod io;
pub mod pipeline;
