pub mod abc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kinematics;
pub mod priors;
pub mod scene;
pub mod session;
pub mod similarity;
pub mod surrogate;
pub mod task_sim;
pub mod trajectory;

pub use error::{Error, LoadError, Result};
