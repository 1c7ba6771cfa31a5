use serde::{Deserialize, Serialize};

use super::FitError;

/// Which densification operation an event applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Clone,
    Split,
}

impl Phase {
    pub fn flipped(self) -> Self {
        match self {
            Phase::Clone => Phase::Split,
            Phase::Split => Phase::Clone,
        }
    }
}

/// Fitting hyperparameters. Every field may be omitted from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Hard cap on the Gaussian count and the padded output size.
    pub n_max: usize,
    pub iterations: usize,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    /// Mean view-space positional gradient norm that makes a Gaussian a candidate.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest scale exceeds this fraction of the scene extent are pruned.
    pub prune_scale_fraction: f64,
    /// Candidates up to this fraction of the extent are cloned, larger ones split.
    pub dense_fraction: f64,
    /// Period of the opacity reset during densification; 0 disables it.
    pub opacity_reset_interval: usize,
    /// Initial Gaussian count; `n_max / 32` when absent.
    pub init_count: Option<usize>,
    pub init_opacity: f64,
    pub first_phase: Phase,
    pub lr_position: f64,
    /// Position learning rate reached at the last iteration (log-linear decay).
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub ssim_weight: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_max: 32768,
            iterations: 30000,
            densify_interval: 100,
            densify_start: 500,
            densify_end: 15000,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            prune_scale_fraction: 0.5,
            dense_fraction: 0.01,
            opacity_reset_interval: 3000,
            init_count: None,
            init_opacity: 0.1,
            first_phase: Phase::Clone,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            ssim_weight: 0.2,
            background: [1.0; 3],
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self, FitError> {
        let cfg: Self = toml::from_str(text).map_err(|e| FitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut text = toml::to_string(self).expect("config serializes");
        if self.init_count.is_none() {
            text.push_str("# init_count defaults to n_max / 32\n");
        }
        text
    }

    pub fn initial_count(&self) -> usize {
        self.init_count.unwrap_or(self.n_max / 32).clamp(1, self.n_max)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        if self.n_max == 0 {
            return bad("n_max must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be at least 1");
        }
        if self.densify_start >= self.densify_end || self.densify_end > self.iterations {
            return bad("densification window must satisfy densify_start < densify_end <= iterations");
        }
        if self.init_count == Some(0) {
            return bad("init_count must be at least 1");
        }
        let nonneg = [
            self.grad_threshold,
            self.prune_opacity,
            self.prune_scale_fraction,
            self.dense_fraction,
            self.lr_position,
            self.lr_position_final,
            self.lr_scale,
            self.lr_rotation,
            self.lr_opacity,
            self.lr_color,
            self.ssim_weight,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("thresholds, learning rates and weights must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.init_opacity) || self.init_opacity == 0.0 || self.init_opacity == 1.0 {
            return bad("init_opacity must lie strictly between 0 and 1");
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return bad("background must be finite");
        }
        Ok(())
    }

    /// Shortens the run to `iterations`, pulling the densification window in
    /// when it would no longer fit.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        if self.densify_end > iterations {
            self.densify_end = iterations;
        }
        if self.densify_start >= self.densify_end {
            self.densify_start = self.densify_end.saturating_sub(1);
        }
        self
    }

    pub fn position_lr_at(&self, iteration: usize) -> f64 {
        if self.lr_position == 0.0 || self.lr_position_final == 0.0 || self.iterations <= 1 {
            return self.lr_position;
        }
        let t = (iteration.min(self.iterations) as f64 / self.iterations as f64).clamp(0.0, 1.0);
        (self.lr_position.ln() * (1.0 - t) + self.lr_position_final.ln() * t).exp()
    }
}
