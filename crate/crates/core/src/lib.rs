//! Joint mixed-effects modelling of warp and intensity variation in stacks
//! of 2D images.
//!
//! Each observed image is modelled as a warped template plus a spatially
//! correlated intensity field plus white noise. Warps are parameterized by
//! displacements at an interior anchor grid; both the warp and intensity
//! effects follow tied-down Brownian sheet priors.

pub mod error;
pub mod gmrf;
pub mod grid;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod optim;
pub mod sim;
pub mod sparse;
pub mod warp;

pub use error::{Error, Result};
pub use gmrf::{IntensityModel, IntensitySolver, WarpPrior};
pub use grid::{Image, Lattice, Point};
pub use inference::{fit, FitConfig, ModelFit};
pub use likelihood::{LikelihoodEvaluator, VarianceParams, ZMatrix};
pub use sparse::{CholFactor, SparseSym};
pub use warp::{AnchorGrid, DisplacementGrid};
