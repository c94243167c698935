//! Session store, job runner, HTTP facade and CLI for the fusion engine.

pub mod cli;
pub mod error;
pub mod http;
pub mod jobs;
pub mod pipeline;
pub mod store;

pub use error::{ServiceError, ServiceResult};
