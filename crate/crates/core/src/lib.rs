pub mod augment;
pub mod camera;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod polygon;
pub mod synth;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
