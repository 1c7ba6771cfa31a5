//! Densification-constrained fitting of a capped Gaussian set to posed images.

mod config;
mod dataset;
mod state;

pub use config::{FitConfig, Phase};
pub use dataset::{load_camera, load_dataset, save_dataset, View};
pub use state::{densify_constrained, from_raw, prune, reset_opacity, to_raw, top_k, DensifyEvent, FitState, RAW};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gaussian::{Aabb, Gaussian, GaussianError, GaussianSet};
use crate::image::Image;
use crate::metrics::{ssim_with_grad, SSIM_WINDOW};
use crate::precision::to_storage_precision;
use crate::render::{render, render_backward, visibility, RenderError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("no training views")]
    NoViews,
    #[error("view {index}: image is {image_w}x{image_h} but the camera is {cam_w}x{cam_h}")]
    ViewShape { index: usize, image_w: usize, image_h: usize, cam_w: usize, cam_h: usize },
    #[error("initialization failed: none of the {0} initial Gaussians is visible from any view")]
    Initialization(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("optimization diverged at iteration {0}")]
    Diverged(usize),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Per-run diagnostics.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    /// Gaussian count after each iteration.
    pub counts: Vec<usize>,
    /// Training loss of each iteration.
    pub losses: Vec<f64>,
    pub events: Vec<DensifyEvent>,
    pub pruned: usize,
    /// Count before padding.
    pub fitted_count: usize,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Exactly `n_max` Gaussians at storage precision.
    pub set: GaussianSet,
    pub report: FitReport,
}

/// Uniformly placed gray isotropic Gaussians.
pub fn initialize<R: Rng + ?Sized>(bounds: &Aabb, cfg: &FitConfig, rng: &mut R) -> GaussianSet {
    let k = cfg.initial_count();
    let sigma = bounds.extent() / (4.0 * (k as f64).cbrt());
    let gaussians = (0..k)
        .map(|_| {
            let mu = [0, 1, 2].map(|a| rng.random_range(bounds.min[a]..bounds.max[a]));
            Gaussian::isotropic(mu, sigma, cfg.init_opacity, [0.5; 3])
        })
        .collect();
    GaussianSet::new(gaussians, *bounds)
}

/// `L1 + w (1 - SSIM)` and its gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, ssim_weight: f64) -> (f64, Vec<f64>) {
    let n = rendered.data.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| {
            loss += (r - t).abs();
            if r > t {
                1.0 / n
            } else if r < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    loss /= n;
    if ssim_weight > 0.0 && rendered.width >= SSIM_WINDOW && rendered.height >= SSIM_WINDOW {
        let (s, g) = ssim_with_grad(rendered, target).expect("shapes checked by caller");
        loss += ssim_weight * (1.0 - s);
        for (a, b) in grad.iter_mut().zip(g) {
            *a -= ssim_weight * b;
        }
    }
    (loss, grad)
}

/// Fits `cfg.n_max` Gaussians inside `bounds` to the posed views.
pub fn fit(views: &[View], bounds: &Aabb, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(FitError::NoViews);
    }
    for (index, v) in views.iter().enumerate() {
        v.camera.validate()?;
        if v.image.width != v.camera.width || v.image.height != v.camera.height {
            return Err(FitError::ViewShape {
                index,
                image_w: v.image.width,
                image_h: v.image.height,
                cam_w: v.camera.width,
                cam_h: v.camera.height,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = initialize(bounds, cfg, &mut rng);
    let mut seen = vec![false; init.len()];
    for v in views {
        for (s, vis) in seen.iter_mut().zip(visibility(&init, &v.camera)?) {
            *s |= vis;
        }
    }
    if !seen.iter().any(|&s| s) {
        return Err(FitError::Initialization(init.len()));
    }

    let mut state = FitState::new(&init, cfg.first_phase);
    let mut report = FitReport::default();
    let mut order: Vec<usize> = Vec::new();
    for t in 1..=cfg.iterations {
        state.iteration = t;
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = &views[order.pop().expect("refilled above")];
        let set = state.to_set();
        let rendered = render(&set, &view.camera, cfg.background)?;
        let (loss, dl) = photometric_loss(&rendered.image, &view.image, cfg.ssim_weight);
        if !loss.is_finite() {
            return Err(FitError::Diverged(t));
        }
        let grads = render_backward(&set, &view.camera, cfg.background, &dl)?;

        if t <= cfg.densify_end {
            for i in 0..state.len() {
                if grads.visible[i] {
                    state.grad_accum[i] += grads.viewspace_grad_norm[i];
                    state.grad_count[i] += 1;
                }
            }
        }
        adam_step(&mut state, &set, &grads, cfg, t);

        if t >= cfg.densify_start && t <= cfg.densify_end && t % cfg.densify_interval == 0 {
            let event = densify_constrained(&mut state, cfg, &mut rng);
            report.events.push(event);
            report.pruned += prune(&mut state, cfg);
        }
        if cfg.opacity_reset_interval > 0 && t % cfg.opacity_reset_interval == 0 && t <= cfg.densify_end {
            reset_opacity(&mut state);
        }
        assert!(state.len() <= cfg.n_max, "count cap violated at iteration {t}");
        if state.raw.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(FitError::Diverged(t));
        }
        report.counts.push(state.len());
        report.losses.push(loss);
    }
    report.fitted_count = state.len();
    let set = finalize(&state.to_set(), cfg.n_max)?;
    Ok(FitResult { set, report })
}

/// Normalizes rotations, pads to `n_max` and rounds to storage precision.
pub fn finalize(set: &GaussianSet, n_max: usize) -> Result<GaussianSet, GaussianError> {
    let gaussians = set.gaussians.iter().map(|g| g.normalized()).collect::<Result<Vec<_>, _>>()?;
    let set = GaussianSet::new(gaussians, set.bounds).pad_to(n_max)?;
    Ok(to_storage_precision(&set))
}

fn adam_step(state: &mut FitState, set: &GaussianSet, grads: &crate::GaussianGradients, cfg: &FitConfig, t: usize) {
    let lr_pos = cfg.position_lr_at(t);
    let mut lr = [0.0; RAW];
    lr[0..3].fill(lr_pos);
    lr[3..6].fill(cfg.lr_scale);
    lr[6..10].fill(cfg.lr_rotation);
    lr[10] = cfg.lr_opacity;
    lr[11..14].fill(cfg.lr_color);
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..state.len() {
        let g = &set.gaussians[i];
        let mut raw_grad = [0.0; RAW];
        raw_grad[0..3].copy_from_slice(&grads.mu[i]);
        for k in 0..3 {
            raw_grad[3 + k] = grads.scale[i][k] * g.scale[k];
        }
        raw_grad[6..10].copy_from_slice(&grads.rot[i]);
        raw_grad[10] = grads.opacity[i] * g.opacity * (1.0 - g.opacity);
        raw_grad[11..14].copy_from_slice(&grads.color[i]);
        let (raw, m, v) = (&mut state.raw[i], &mut state.adam_m[i], &mut state.adam_v[i]);
        for k in 0..RAW {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * raw_grad[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * raw_grad[k] * raw_grad[k];
            raw[k] -= lr[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
        }
        let norm = raw[6..10].iter().map(|q| q * q).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            raw[6..10].iter_mut().for_each(|q| *q /= norm);
        } else {
            raw[6..10].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
        for c in &mut raw[11..14] {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Camera;

    pub(crate) fn ring_views(truth: &GaussianSet, n: usize, size: usize, background: [f64; 3]) -> Vec<View> {
        (0..n)
            .map(|k| {
                let a = k as f64 / n as f64 * std::f64::consts::TAU;
                let eye = [3.0 * a.cos(), 0.8 * (k as f64 - 3.5) / 3.5, 3.0 * a.sin()];
                let camera = Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], size as f64, size as f64, size, size);
                let image = render(truth, &camera, background).unwrap().image;
                View { name: format!("v{k}"), camera, image }
            })
            .collect()
    }

    fn truth() -> GaussianSet {
        let g = |mu, s, c| Gaussian::isotropic(mu, s, 0.9, c);
        GaussianSet::new(
            vec![
                g([0.3, 0.0, 0.0], 0.25, [0.9, 0.1, 0.1]),
                g([-0.3, 0.2, 0.1], 0.2, [0.1, 0.8, 0.2]),
                g([0.0, -0.3, -0.2], 0.3, [0.2, 0.2, 0.9]),
            ],
            Aabb::unit(),
        )
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let mut a = Image::filled(12, 12, [0.3, 0.5, 0.7]);
        let b = Image::new(12, 12, (0..432).map(|i| ((i * 37) % 100) as f64 / 100.0).collect()).unwrap();
        for (i, v) in a.data.iter_mut().enumerate() {
            *v += 0.001 * ((i * 13) % 7) as f64;
        }
        let (_, g) = photometric_loss(&a, &b, 0.2);
        for idx in [0, 50, 200, 431] {
            let h = 1e-7;
            let mut p = a.clone();
            p.data[idx] += h;
            let mut m = a.clone();
            m.data[idx] -= h;
            let fd = (photometric_loss(&p, &b, 0.2).0 - photometric_loss(&m, &b, 0.2).0) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "{idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn disabled_densification_keeps_initial_count() {
        let views = ring_views(&truth(), 4, 24, [1.0; 3]);
        let cfg = FitConfig {
            n_max: 16,
            iterations: 30,
            densify_interval: 1000,
            densify_start: 1,
            densify_end: 30,
            init_count: Some(4),
            ..FitConfig::default()
        };
        let res = fit(&views, &Aabb::unit(), &cfg).unwrap();
        assert!(res.report.events.is_empty());
        assert!(res.report.counts.iter().all(|&c| c <= 4));
        assert_eq!(res.set.len(), 16);
    }

    #[test]
    fn count_never_exceeds_cap_and_output_is_padded() {
        let views = ring_views(&truth(), 4, 24, [1.0; 3]);
        let cfg = FitConfig {
            n_max: 12,
            iterations: 200,
            densify_interval: 20,
            densify_start: 20,
            densify_end: 160,
            grad_threshold: 0.0,
            init_count: Some(4),
            lr_position: 1e-2,
            lr_position_final: 1e-3,
            ..FitConfig::default()
        };
        let res = fit(&views, &Aabb::unit(), &cfg).unwrap();
        assert!(res.report.counts.iter().all(|&c| c <= 12));
        assert_eq!(res.set.len(), 12);
        let phases: Vec<Phase> = res.report.events.iter().map(|e| e.phase).collect();
        assert!(phases.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(phases.len(), 8);
    }

    #[test]
    fn invisible_initialization_fails() {
        let views = ring_views(&truth(), 2, 24, [1.0; 3]);
        let far = Aabb::new([100.0; 3], [101.0; 3]).unwrap();
        let cfg = FitConfig { n_max: 8, iterations: 10, densify_start: 1, densify_end: 10, ..FitConfig::default() };
        assert!(matches!(fit(&views, &far, &cfg), Err(FitError::Initialization(_))));
    }

    #[test]
    fn loss_decreases() {
        let views = ring_views(&truth(), 6, 32, [1.0; 3]);
        let cfg = FitConfig {
            n_max: 32,
            iterations: 400,
            densify_interval: 50,
            densify_start: 100,
            densify_end: 300,
            init_count: Some(8),
            lr_position: 5e-3,
            lr_position_final: 5e-4,
            lr_scale: 1e-2,
            lr_color: 2e-2,
            ..FitConfig::default()
        };
        let res = fit(&views, &Aabb::unit(), &cfg).unwrap();
        let early: f64 = res.report.losses[90..110].iter().sum::<f64>() / 20.0;
        let late: f64 = res.report.losses[380..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "{late} vs {early}");
    }
}
