pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lane;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod plot;
pub mod runner;
pub mod synth;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
