//! Fixed-budget Gaussian splat fitting and structuring into GaussianCubes.
//!
//! The pipeline runs in stages: fit a capped number of Gaussians to posed
//! images ([`fit`]), pad to the target count, assign Gaussians to voxel cells
//! by optimal transport ([`ot`]), and store the resulting grid ([`io`]).
//! [`render`] provides the differentiable rasterizer used by fitting,
//! [`metrics`] the image-quality scores, and [`diffusion`] the forward
//! noising utilities applied to cubes.

pub mod diffusion;
pub mod fit;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod metrics;
pub mod ot;
pub mod precision;
pub mod render;

pub use gaussian::{Aabb, Gaussian, GaussianError, GaussianSet, CHANNELS};
pub use image::Image;
pub use render::{project_gaussian, render, render_backward, visibility, Camera, GaussianGradients, RenderedImage};
