//! CPU Gaussian-splatting rasterizer with an analytic backward pass.
//!
//! Splats are projected with the first-order Jacobian of the pinhole map,
//! dilated by a small low-pass term, sorted by camera-space depth and
//! alpha-composited front to back per pixel. Work is split into fixed
//! square tiles; tiles are processed in parallel and their results merged in
//! tile order, so output does not depend on the thread count.

mod backward;
mod camera;

use nalgebra::{Matrix2, Matrix2x3, Matrix3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{normalize_quat, rotation_matrix, Gaussian, GaussianError, GaussianSet};
use crate::image::Image;

pub use backward::{render_backward, GaussianGradients};
pub use camera::Camera;

/// Variance added to the projected covariance diagonal, in pixels squared.
pub const LOW_PASS: f64 = 0.3;
/// Contributions with alpha below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Per-splat alpha ceiling.
pub const MAX_ALPHA: f64 = 0.99;
/// Compositing stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splats closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Footprint half-width in standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("gradient buffer has {actual} samples but the camera expects {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("Gaussian {index}: {source}")]
    InvalidGaussian {
        index: usize,
        #[source]
        source: GaussianError,
    },
}

/// A rendered frame and the background it was composited over.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    pub background: [f64; 3],
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Projected mean in pixel coordinates.
    pub mean2d: [f64; 2],
    /// Projected covariance `J W Sigma W^T J^T`, before low-pass dilation.
    pub cov2d: Matrix2<f64>,
    /// Camera-space depth of the mean.
    pub depth: f64,
}

/// Projects a Gaussian; `Ok(None)` when its mean lies in front of the near plane.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Result<Option<Projection>, GaussianError> {
    let t = cam.to_camera_space(g.mu);
    if t[2] < NEAR_PLANE {
        return Ok(None);
    }
    let cov3 = g.covariance()?;
    let w = cam.rotation();
    let j = pinhole_jacobian(cam, t[0], t[1], t[2]);
    let tw = j * w;
    let cov2d = tw * cov3 * tw.transpose();
    Ok(Some(Projection {
        mean2d: [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy],
        cov2d: (cov2d + cov2d.transpose()) * 0.5,
        depth: t[2],
    }))
}

pub(crate) fn pinhole_jacobian(cam: &Camera, x: f64, y: f64, z: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / z;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * x * iz * iz, 0.0, cam.fy * iz, -cam.fy * y * iz * iz)
}

/// Everything the tile loops need about one visible splat.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse of the dilated covariance as (a, b, c) for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Inclusive pixel bounds `[x0, x1] x [y0, y1]`.
    pub bbox: [usize; 4],
}

pub(crate) struct Prepared {
    /// Visible splats in compositing order.
    pub splats: Vec<Splat>,
    /// Per tile, indices into `splats` in compositing order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

pub(crate) fn prepare(set: &GaussianSet, cam: &Camera) -> Result<Prepared, RenderError> {
    cam.validate()?;
    let w = cam.rotation();
    let splats: Result<Vec<Option<Splat>>, RenderError> = set
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(index, g)| make_splat(index, g, cam, &w))
        .collect();
    let mut splats: Vec<Splat> = splats?.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Ok(Prepared { splats, tiles, tiles_x })
}

fn make_splat(index: usize, g: &Gaussian, cam: &Camera, w: &Matrix3<f64>) -> Result<Option<Splat>, RenderError> {
    // A splat whose peak alpha is below the cutoff can never contribute.
    if !(g.opacity >= MIN_ALPHA) {
        return Ok(None);
    }
    let invalid = |source| RenderError::InvalidGaussian { index, source };
    if !g.is_finite() {
        return Err(invalid(GaussianError::InvalidScale(g.scale)));
    }
    let t = cam.to_camera_space(g.mu);
    if t[2] < NEAR_PLANE {
        return Ok(None);
    }
    let q = normalize_quat(g.rot).map_err(invalid)?;
    if !g.scale.iter().all(|s| *s > 0.0) {
        return Err(invalid(GaussianError::InvalidScale(g.scale)));
    }
    let r = rotation_matrix(q);
    let m = r * Matrix3::from_diagonal(&g.scale.into());
    let cov3 = m * m.transpose();
    let tw = pinhole_jacobian(cam, t[0], t[1], t[2]) * w;
    let cov = tw * cov3 * tw.transpose();
    let (a, b, c) = (cov[(0, 0)] + LOW_PASS, 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)] + LOW_PASS);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return Ok(None);
    }
    let mid = 0.5 * (a + c);
    let lambda = mid + (mid * mid - det).max(0.1).sqrt();
    let radius = (EXTENT_SIGMAS * lambda.sqrt()).ceil();
    let mean = [cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy];
    let bx0 = (mean[0] - radius).floor();
    let bx1 = (mean[0] + radius).ceil();
    let by0 = (mean[1] - radius).floor();
    let by1 = (mean[1] + radius).ceil();
    let (wmax, hmax) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if !(bx1 >= 0.0 && by1 >= 0.0 && bx0 <= wmax && by0 <= hmax) {
        return Ok(None);
    }
    let bbox = [
        bx0.max(0.0) as usize,
        bx1.min(wmax) as usize,
        by0.max(0.0) as usize,
        by1.min(hmax) as usize,
    ];
    Ok(Some(Splat {
        index,
        mean,
        conic: [c / det, -b / det, a / det],
        opacity: g.opacity,
        color: g.color,
        depth: t[2],
        bbox,
    }))
}

/// Evaluates a splat at a pixel: `(alpha, gaussian falloff)`, or `None` when skipped.
#[inline]
pub(crate) fn splat_alpha(s: &Splat, px: usize, py: usize) -> Option<(f64, f64)> {
    let [x0, x1, y0, y1] = s.bbox;
    if px < x0 || px > x1 || py < y0 || py > y1 {
        return None;
    }
    let dx = px as f64 - s.mean[0];
    let dy = py as f64 - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > 0.0 {
        return None;
    }
    let falloff = power.exp();
    let alpha = (s.opacity * falloff).min(MAX_ALPHA);
    if alpha < MIN_ALPHA {
        return None;
    }
    Some((alpha, falloff))
}

/// Composites one pixel; returns the color and final transmittance.
fn composite(splats: &[Splat], list: &[u32], px: usize, py: usize, background: [f64; 3]) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    for &si in list {
        let s = &splats[si as usize];
        let Some((alpha, _)) = splat_alpha(s, px, py) else { continue };
        let next_t = t * (1.0 - alpha);
        if next_t < MIN_TRANSMITTANCE {
            break;
        }
        for k in 0..3 {
            rgb[k] += s.color[k] * alpha * t;
        }
        t = next_t;
    }
    for k in 0..3 {
        rgb[k] += t * background[k];
    }
    (rgb, t)
}

pub(crate) fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width);
    let y1 = (y0 + TILE_SIZE).min(cam.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders `set` from `cam` over `background`.
pub fn render(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> Result<RenderedImage, RenderError> {
    let prep = prepare(set, cam)?;
    let tile_out: Vec<Vec<(usize, [f64; 3])>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            tile_pixels(tile, prep.tiles_x, cam)
                .map(|(x, y)| {
                    let (rgb, _) = composite(&prep.splats, &prep.tiles[tile], x, y, background);
                    (y * cam.width + x, rgb)
                })
                .collect()
        })
        .collect();
    let mut image = Image::zeros(cam.width, cam.height);
    for (p, rgb) in tile_out.into_iter().flatten() {
        image.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }
    Ok(RenderedImage { image, background })
}

/// Whether each Gaussian lands a splat on the image.
pub fn visibility(set: &GaussianSet, cam: &Camera) -> Result<Vec<bool>, RenderError> {
    let prep = prepare(set, cam)?;
    let mut out = vec![false; set.len()];
    for s in &prep.splats {
        out[s.index] = true;
    }
    Ok(out)
}

/// Transmittance left at every pixel after compositing, row-major.
pub fn render_transmittance(set: &GaussianSet, cam: &Camera) -> Result<Vec<f64>, RenderError> {
    let prep = prepare(set, cam)?;
    let mut out = vec![1.0; cam.pixel_count()];
    for tile in 0..prep.tiles.len() {
        for (x, y) in tile_pixels(tile, prep.tiles_x, cam) {
            out[y * cam.width + x] = composite(&prep.splats, &prep.tiles[tile], x, y, [0.0; 3]).1;
        }
    }
    Ok(out)
}
