pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod exec;
pub mod model;
pub mod neuron;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};
