pub mod captioning;
pub mod checkpoint;
pub mod consistency;
pub mod container;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod segmentation;

pub use error::{Error, Result};
