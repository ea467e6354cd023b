pub mod audio;
pub mod cli;
pub mod contamination;
pub mod data_io;
pub mod dsp;
pub mod engine;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod synthdata;
pub mod training;
pub mod error;
pub mod windowing;

pub use error::{Error, Result};
