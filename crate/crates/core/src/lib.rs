pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod kde;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod softhist;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
