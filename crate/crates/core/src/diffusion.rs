//! Forward diffusion utilities for cube tensors: the cosine noise schedule,
//! variance-preserving forward noising and adaptive group normalization.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const DEFAULT_TIMESTEPS: usize = 1000;
/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Per-step noise ceiling of the cosine schedule.
pub const MAX_BETA: f64 = 0.999;
pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_GROUPS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("tensor sizes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("{channels} channels cannot be split into {groups} groups")]
    IndivisibleGroups { channels: usize, groups: usize },
    #[error("{name} has length {len}, which does not divide {channels} channels")]
    BadModulation { name: &'static str, len: usize, channels: usize },
    #[error("feature buffer has {len} values, expected {channels} x {spatial}")]
    BadFeatureShape { len: usize, channels: usize, spatial: usize },
}

/// Signal and noise coefficients for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from cumulative signal fractions `alpha_bar[t]`.
    pub fn from_alpha_bar(alpha_bar: &[f64]) -> Self {
        Self {
            timesteps: alpha_bar.len() - 1,
            alpha: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sigma: alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect(),
        }
    }
}

/// Cosine schedule with `f(t) = cos^2(((t/T + s) / (1 + s)) pi/2)`,
/// `alpha_bar(t) = f(t) / f(0)`, with per-step betas capped at [`MAX_BETA`].
pub fn cosine_schedule(timesteps: usize) -> NoiseSchedule {
    let t_max = timesteps.max(1);
    let f = |t: usize| {
        let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for t in 1..=t_max {
        let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
    }
    NoiseSchedule::from_alpha_bar(&alpha_bar)
}

/// `y_t = alpha_t y_0 + sigma_t eps`.
pub fn forward_noise(y0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    if y0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch(y0.len(), eps.len()));
    }
    if t > sched.timesteps {
        return Err(DiffusionError::TimestepOutOfRange { t, max: sched.timesteps });
    }
    let (a, s) = (sched.alpha[t], sched.sigma[t]);
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + s * e).collect())
}

/// Draws a standard-normal tensor of length `n`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Channel-major feature map: `channels` planes of `spatial` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub spatial: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, spatial: usize, data: Vec<f64>) -> Result<Self, DiffusionError> {
        if data.len() != channels * spatial {
            return Err(DiffusionError::BadFeatureShape { len: data.len(), channels, spatial });
        }
        Ok(Self { channels, spatial, data })
    }

    /// Values of group `g` when the channels are split into `groups` contiguous groups.
    pub fn group(&self, g: usize, groups: usize) -> &[f64] {
        let per = self.channels / groups * self.spatial;
        &self.data[g * per..(g + 1) * per]
    }
}

/// Condition-derived modulation for [`adagn`].
///
/// `gamma` and `beta` may hold one value per channel or one per block of
/// channels; each length must divide the channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub groups: usize,
}

impl AdaGnParams {
    pub fn identity(groups: usize) -> Self {
        Self { gamma: vec![0.0], beta: vec![0.0], groups }
    }
}

/// `GroupNorm(f) * (1 + gamma) + beta`.
pub fn adagn(features: &FeatureMap, params: &AdaGnParams) -> Result<FeatureMap, DiffusionError> {
    let c = features.channels;
    if params.groups == 0 || c % params.groups != 0 {
        return Err(DiffusionError::IndivisibleGroups { channels: c, groups: params.groups });
    }
    for (name, v) in [("gamma", &params.gamma), ("beta", &params.beta)] {
        if v.is_empty() || c % v.len() != 0 {
            return Err(DiffusionError::BadModulation { name, len: v.len(), channels: c });
        }
    }
    let per_group = c / params.groups;
    let mut out = features.data.clone();
    for g in 0..params.groups {
        let vals = features.group(g, params.groups);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for ch in g * per_group..(g + 1) * per_group {
            let gamma = params.gamma[ch / (c / params.gamma.len())];
            let beta = params.beta[ch / (c / params.beta.len())];
            let plane = &mut out[ch * features.spatial..(ch + 1) * features.spatial];
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv * (1.0 + gamma) + beta;
            }
        }
    }
    Ok(FeatureMap { data: out, ..*features })
}
