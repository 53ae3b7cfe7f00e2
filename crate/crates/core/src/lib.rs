pub mod coref;
pub mod corpus;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod head_analysis;
pub mod injection;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
