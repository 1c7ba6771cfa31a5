//! PSNR and SSIM image-quality metrics.
//!
//! SSIM is the single-scale index with an 11x11 Gaussian window (sigma 1.5)
//! evaluated at every position where the window fits inside the image,
//! computed per color channel and averaged. [`ssim_with_grad`] also returns
//! the gradient of the index with respect to its first argument, which the
//! fitting loss uses.

use serde::Serialize;
use thiserror::Error;

use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
}

/// PSNR (dB, `+inf` for identical images) and SSIM of an image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image) -> Result<Self, MetricError> {
        Ok(Self { psnr_db: psnr(a, b)?, ssim: ssim(a, b)? })
    }
}

impl Serialize for MetricReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("MetricReport", 2)?;
        if self.psnr_db.is_finite() {
            st.serialize_field("psnr_db", &self.psnr_db)?;
        } else {
            st.serialize_field("psnr_db", "inf")?;
        }
        st.serialize_field("ssim", &self.ssim)?;
        st.end()
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for images with unit peak; `+inf` when they are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to every sample of `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>), MetricError> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" correlation of a plane with the window.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * src[x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to full size.
fn filter_valid_adjoint(map: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += w[k] * v;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * width + x + k] += w[k] * v;
            }
        }
    }
    out
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>), MetricError> {
    check_shapes(a, b)?;
    let (width, height) = (a.width, a.height);
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::TooSmall(width, height));
    }
    let w = gaussian_window();
    let n_valid = ((width - SSIM_WINDOW + 1) * (height - SSIM_WINDOW + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);

    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, width, height, &w);
        let my = filter_valid(&y, width, height, &w);
        let exx = filter_valid(&xx, width, height, &w);
        let eyy = filter_valid(&yy, width, height, &w);
        let exy = filter_valid(&xy, width, height, &w);

        let n = mx.len();
        let mut d_mx = vec![0.0; if want_grad { n } else { 0 }];
        let mut d_exx = d_mx.clone();
        let mut d_exy = d_mx.clone();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = vx + vy + C2;
            let s = (a1 * a2) / (b1 * b2);
            sum += s;
            if want_grad {
                d_mx[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                d_exx[i] = -s / b2;
                d_exy[i] = 2.0 * s / a2;
            }
        }
        total += sum / n_valid;

        if let Some(g) = grad.as_mut() {
            let gm = filter_valid_adjoint(&d_mx, width, height, &w);
            let gxx = filter_valid_adjoint(&d_exx, width, height, &w);
            let gxy = filter_valid_adjoint(&d_exy, width, height, &w);
            let scale = 1.0 / (3.0 * n_valid);
            for p in 0..width * height {
                g[p * 3 + ch] = scale * (gm[p] + 2.0 * x[p] * gxx[p] + y[p] * gxy[p]);
            }
        }
    }
    Ok((total / 3.0, grad))
}
