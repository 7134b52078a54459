pub mod adapters;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod map;
pub mod world;

pub use error::{Error, Result};
pub mod loss;
pub mod model;
pub mod nn;
pub mod db;
pub mod pipeline;
pub mod augment;
pub mod pairs;
pub mod train;
pub mod retrieval;
pub mod eval;
pub mod config;
