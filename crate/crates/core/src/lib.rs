pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod netbuilder;
pub mod fusion;
pub mod stacks;
pub mod data;
pub mod pgm;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod gradcheck;
pub mod config;
pub mod experiment;

pub use error::{Error, Result};
