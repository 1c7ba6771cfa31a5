use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{
    pinhole_jacobian, prepare, splat_alpha, tile_pixels, Camera, RenderError, Splat, MAX_ALPHA, MIN_TRANSMITTANCE,
};
use crate::gaussian::{rotation_matrix, GaussianSet};

/// Loss gradients with respect to every activated Gaussian parameter.
///
/// Rotation gradients are taken through the quaternion normalization, so they
/// are tangent to the sphere at the stored quaternion.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGradients {
    pub mu: Vec<[f64; 3]>,
    pub scale: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Norm of the gradient with respect to the projected mean in normalized
    /// device coordinates (pixel gradient scaled by half the image size).
    pub viewspace_grad_norm: Vec<f64>,
    /// Whether the Gaussian's footprint overlapped the image.
    pub visible: Vec<bool>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            scale: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            viewspace_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Screen-space gradient of one splat: mean (2), conic (3), opacity (1), color (3).
#[derive(Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2d {
    fn add(&mut self, o: &Grad2d) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    local: usize,
    alpha: f64,
    falloff: f64,
    transmittance: f64,
}

/// Backpropagates per-pixel loss gradients `dl_dpixels` (interleaved RGB,
/// row-major) to the Gaussian parameters.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    background: [f64; 3],
    dl_dpixels: &[f64],
) -> Result<GaussianGradients, RenderError> {
    let expected = cam.pixel_count() * 3;
    if dl_dpixels.len() != expected {
        return Err(RenderError::ShapeMismatch { expected, actual: dl_dpixels.len() });
    }
    let prep = prepare(set, cam)?;

    let per_tile: Vec<Vec<Grad2d>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| backward_tile(&prep.splats, &prep.tiles[tile], tile, prep.tiles_x, cam, background, dl_dpixels))
        .collect();

    let mut grad2d = vec![Grad2d::default(); prep.splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (local, g) in grads.iter().enumerate() {
            grad2d[prep.tiles[tile][local] as usize].add(g);
        }
    }

    let w = cam.rotation();
    let per_splat: Vec<SplatGrad> = prep
        .splats
        .par_iter()
        .zip(grad2d.par_iter())
        .map(|(s, g)| chain_to_3d(set, s, g, cam, &w))
        .collect();

    let mut out = GaussianGradients::zeros(set.len());
    for (s, g) in prep.splats.iter().zip(per_splat) {
        let i = s.index;
        out.mu[i] = g.mu;
        out.scale[i] = g.scale;
        out.rot[i] = g.rot;
        out.opacity[i] = g.opacity;
        out.color[i] = g.color;
        out.viewspace_grad_norm[i] = g.viewspace;
        out.visible[i] = true;
    }
    Ok(out)
}

fn backward_tile(
    splats: &[Splat],
    list: &[u32],
    tile: usize,
    tiles_x: usize,
    cam: &Camera,
    background: [f64; 3],
    dl_dpixels: &[f64],
) -> Vec<Grad2d> {
    let mut grads = vec![Grad2d::default(); list.len()];
    let mut contribs = Vec::with_capacity(list.len());
    for (px, py) in tile_pixels(tile, tiles_x, cam) {
        let p = (py * cam.width + px) * 3;
        let dl_dc = [dl_dpixels[p], dl_dpixels[p + 1], dl_dpixels[p + 2]];
        if dl_dc == [0.0; 3] {
            continue;
        }
        contribs.clear();
        let mut t = 1.0;
        for (local, &si) in list.iter().enumerate() {
            let s = &splats[si as usize];
            let Some((alpha, falloff)) = splat_alpha(s, px, py) else { continue };
            let next_t = t * (1.0 - alpha);
            if next_t < MIN_TRANSMITTANCE {
                break;
            }
            contribs.push(Contribution { local, alpha, falloff, transmittance: t });
            t = next_t;
        }

        // color of everything behind the current splat, relative to its transmittance
        let mut behind = background;
        for c in contribs.iter().rev() {
            let s = &splats[list[c.local] as usize];
            let g = &mut grads[c.local];
            let mut dl_dalpha = 0.0;
            for k in 0..3 {
                g.color[k] += c.alpha * c.transmittance * dl_dc[k];
                dl_dalpha += (s.color[k] - behind[k]) * dl_dc[k];
                behind[k] = s.color[k] * c.alpha + (1.0 - c.alpha) * behind[k];
            }
            dl_dalpha *= c.transmittance;
            if s.opacity * c.falloff >= MAX_ALPHA {
                continue;
            }
            g.opacity += dl_dalpha * c.falloff;
            let dl_dpower = dl_dalpha * c.alpha;
            let dx = px as f64 - s.mean[0];
            let dy = py as f64 - s.mean[1];
            let [a, b, cc] = s.conic;
            g.conic[0] += -0.5 * dx * dx * dl_dpower;
            g.conic[1] += -dx * dy * dl_dpower;
            g.conic[2] += -0.5 * dy * dy * dl_dpower;
            g.mean[0] += (a * dx + b * dy) * dl_dpower;
            g.mean[1] += (b * dx + cc * dy) * dl_dpower;
        }
    }
    grads
}

struct SplatGrad {
    mu: [f64; 3],
    scale: [f64; 3],
    rot: [f64; 4],
    opacity: f64,
    color: [f64; 3],
    viewspace: f64,
}

fn chain_to_3d(set: &GaussianSet, s: &Splat, g2: &Grad2d, cam: &Camera, w: &Matrix3<f64>) -> SplatGrad {
    let gauss = &set.gaussians[s.index];
    let t = cam.to_camera_space(gauss.mu);
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let qn = gauss.rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = gauss.rot.map(|v| v / qn);
    let r = rotation_matrix(q);
    let sdiag = Matrix3::from_diagonal(&Vector3::from(gauss.scale));
    let m = r * sdiag;
    let sigma = m * m.transpose();
    let j = pinhole_jacobian(cam, tx, ty, tz);
    let tw: Matrix2x3<f64> = j * w;

    // conic = inverse(dilated cov2d): dL/dM = -Q G Q with G the symmetric-matrix gradient
    let [a, b, c] = s.conic;
    let qmat = Matrix2::new(a, b, b, c);
    let gq = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
    let gm = -(qmat * gq * qmat);

    // M = T Sigma T^T + low-pass
    let g_sigma = tw.transpose() * gm * tw;
    let g_t: Matrix2x3<f64> = 2.0 * gm * tw * sigma;
    let g_j = g_t * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / tz;
    let iz2 = iz * iz;
    let mut g_cam = Vector3::new(
        g2.mean[0] * fx * iz,
        g2.mean[1] * fy * iz,
        -g2.mean[0] * fx * tx * iz2 - g2.mean[1] * fy * ty * iz2,
    );
    g_cam[0] += g_j[(0, 2)] * (-fx * iz2);
    g_cam[1] += g_j[(1, 2)] * (-fy * iz2);
    g_cam[2] += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * tx * iz2 * iz)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * ty * iz2 * iz);
    let g_mu = w.transpose() * g_cam;

    // Sigma = (R S)(R S)^T
    let g_m = 2.0 * g_sigma * m;
    let mut g_scale = [0.0; 3];
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for row in 0..3 {
            g_scale[i] += g_m[(row, i)] * r[(row, i)];
            g_r[(row, i)] = g_m[(row, i)] * gauss.scale[i];
        }
    }
    let g_qn = quat_grad(q, &g_r);
    let dot: f64 = (0..4).map(|k| g_qn[k] * q[k]).sum();
    let g_rot = std::array::from_fn(|k| (g_qn[k] - dot * q[k]) / qn);

    let ndc = [g2.mean[0] * 0.5 * cam.width as f64, g2.mean[1] * 0.5 * cam.height as f64];
    SplatGrad {
        mu: [g_mu[0], g_mu[1], g_mu[2]],
        scale: g_scale,
        rot: g_rot,
        opacity: g2.opacity,
        color: g2.color,
        viewspace: (ndc[0] * ndc[0] + ndc[1] * ndc[1]).sqrt(),
    }
}

/// Gradient of a loss with respect to the (unit) quaternion given `dL/dR`.
fn quat_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}
