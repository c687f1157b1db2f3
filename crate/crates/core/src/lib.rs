pub mod citer;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod retriever;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
