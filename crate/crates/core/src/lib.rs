pub mod autodiff;
pub mod error;
pub mod params;
pub mod seed;

pub use error::{Error, Result};
pub mod frontend;
pub mod quantizer;
pub mod masking;
pub mod encoder;
pub mod checkpoint;
pub mod pretrain;
pub mod probe;
