pub mod audio;
pub mod baselines;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod neural;
pub mod pitch;
pub mod psola;
pub mod synth;

pub use error::{Error, Result};
