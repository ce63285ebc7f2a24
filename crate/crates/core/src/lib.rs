pub mod autodiff;
pub mod bench;
pub mod config;
pub mod container;
pub mod corpus;
pub mod embedding;
pub mod env;
pub mod error;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod reasoner;
pub mod template;
pub mod trainer;

pub use error::{Error, Result};
