pub mod adaptation;
pub mod conformal;
pub mod data;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod gpvar;
pub mod graph_learn;
pub mod intervals;
pub mod nn;
pub mod relqn;

pub use error::{Error, Result};
