pub mod artifact;
pub mod encoder;
pub mod env;
pub mod error;
pub mod highway_graph;
pub mod policy;
pub mod reparam;
pub mod trainer;
pub mod transition_model;
pub mod value_iteration;

pub use error::{Error, Result};
