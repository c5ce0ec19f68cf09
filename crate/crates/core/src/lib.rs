//! Diffeomorphic image matching under right- and left-invariant metrics.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: uniform grids, images, vector fields, deformations and the
//!   interpolation/composition/inversion primitives;
//! - [`kernels`]: reproducing kernels (Gaussian, sums, soft reflection
//!   symmetry, partition-of-unity mixtures) and the V-norm;
//! - [`flows`]: time integration of velocity paths under the spatial and the
//!   convective constraint, and the left/right path correspondence;
//! - [`matching`]: the inexact matching objective, its exact discrete
//!   gradient and a monotone gradient-descent registration driver;
//! - [`pulsons`]: landmark (pulson) dynamics for both invariances;
//! - [`io`]: PGM images, raw float field files and the text configuration.

pub mod error;
pub mod flows;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod matching;
pub mod pulsons;

pub use error::{Error, Result};
pub use grid::{Deformation, Grid2D, Image, Mask, VectorField};
pub use kernels::KernelSpec;
