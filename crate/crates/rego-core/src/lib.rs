//! Continual-learning laboratory for binary detection under task drift.
//!
//! The library trains a small dense classifier over a sequence of tasks and
//! counteracts forgetting with region-based gradient surgery: a Fisher-based
//! importance map splits parameters into per-class regions, each batch
//! gradient is recomposed region by region against an archive of past task
//! gradients, and an exponential-decay forgetting mask releases parameters
//! whose importance has expired. Baselines and ablations live behind one
//! strategy interface so sequences are comparable method to method.

pub mod config;
pub mod data;
pub mod error;
mod fmtio;
pub mod method;
pub mod metrics;
pub mod mlp;
pub mod region;
pub mod runner;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
