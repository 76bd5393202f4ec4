pub mod downstream;
pub mod encoder;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod synth;
pub mod vh_parser;

pub use error::{Error, Result};
