pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod trimap;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use trimap::{TokenInit, TriTokenTable, Trimap};
