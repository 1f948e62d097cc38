pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fdm;
pub mod fft;
mod pairs;
pub mod params;
mod quad;
pub mod radial;
pub mod rng;
pub mod sipf;
pub mod spectral;

pub use error::{Error, Result};
