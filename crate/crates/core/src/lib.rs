pub mod autodiff;
pub mod bbob;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod labels;
pub mod model;
pub mod plot;
pub mod probing;
pub mod seed;
pub mod selector;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
