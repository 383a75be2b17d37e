pub mod analyzer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gateway;
pub mod memory;
pub mod orchestrator;
pub mod planner;
pub mod retriever;
pub mod synthetic;
pub mod template;

pub use error::{Error, Result};
