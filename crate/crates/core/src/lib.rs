pub mod autodiff;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod finite;
pub mod grid;
pub mod io;
pub mod model;
pub mod pde;
pub mod random_fields;
pub mod rng;
pub mod spectral;
pub mod training;

pub use autodiff::{Gradients, Tape, Tensor, Value};
pub use error::{Error, Result};
pub use grid::{Grid1D, GridFunction};
pub use rng::RngStream;
