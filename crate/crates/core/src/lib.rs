pub mod bench;
pub mod color;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod numkernel;
pub mod params;
pub mod raster;
pub mod ssl;
pub mod tiler;

pub use error::{Error, Result};
