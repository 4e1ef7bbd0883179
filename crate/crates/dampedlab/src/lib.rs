pub mod classical;
pub mod dispersion;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod qtorus;
pub mod spectra;
pub mod thermo;
pub mod wave;

pub use error::{Error, Result};
