//! Chat service over a finetuned dialogue model: session handling, the HTTP
//! API, training-run configuration and human-judgment significance tests.

pub mod abtest;
pub mod api;
pub mod error;
pub mod run;
pub mod session;
pub mod store;

pub use error::ServiceError;
