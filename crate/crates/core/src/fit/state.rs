use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{FitConfig, Phase};
use crate::gaussian::{normalize_quat, rotation_matrix, Aabb, Gaussian, GaussianSet};

/// Raw parameters per Gaussian: position, log-scale, quaternion,
/// logit-opacity, color.
pub const RAW: usize = 14;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn to_raw(g: &Gaussian) -> [f64; RAW] {
    let mut r = [0.0; RAW];
    r[0..3].copy_from_slice(&g.mu);
    for k in 0..3 {
        r[3 + k] = g.scale[k].ln();
    }
    r[6..10].copy_from_slice(&g.rot);
    r[10] = logit(g.opacity);
    r[11..14].copy_from_slice(&g.color);
    r
}

pub fn from_raw(r: &[f64; RAW]) -> Gaussian {
    Gaussian {
        mu: [r[0], r[1], r[2]],
        scale: [r[3].exp(), r[4].exp(), r[5].exp()],
        rot: [r[6], r[7], r[8], r[9]],
        opacity: sigmoid(r[10]),
        color: [r[11], r[12], r[13]],
    }
}

/// Outcome of one densification event.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub phase: Phase,
    /// Number of Gaussians eligible for this phase (`N_d`).
    pub candidates: usize,
    /// Eligible indices with their mean view-space gradient, in index order.
    pub scores: Vec<(usize, f64)>,
    /// Densified indices in descending gradient order, ties by index.
    pub selected: Vec<usize>,
    pub count_before: usize,
    pub count_after: usize,
}

/// Optimizer-side view of a fit in progress.
#[derive(Clone, Debug)]
pub struct FitState {
    pub raw: Vec<[f64; RAW]>,
    pub bounds: Aabb,
    pub adam_m: Vec<[f64; RAW]>,
    pub adam_v: Vec<[f64; RAW]>,
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
    pub iteration: usize,
    pub phase: Phase,
}

impl FitState {
    pub fn new(set: &GaussianSet, phase: Phase) -> Self {
        let n = set.len();
        Self {
            raw: set.gaussians.iter().map(to_raw).collect(),
            bounds: set.bounds,
            adam_m: vec![[0.0; RAW]; n],
            adam_v: vec![[0.0; RAW]; n],
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            iteration: 0,
            phase,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        from_raw(&self.raw[i])
    }

    pub fn to_set(&self) -> GaussianSet {
        GaussianSet::new(self.raw.iter().map(from_raw).collect(), self.bounds)
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.grad_count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.grad_count[i] as f64
        }
    }

    fn push(&mut self, raw: [f64; RAW]) {
        self.raw.push(raw);
        self.adam_m.push([0.0; RAW]);
        self.adam_v.push([0.0; RAW]);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    fn reset_accumulators(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.raw.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.adam_m.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.adam_v.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.grad_accum.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.grad_count.retain(|_| *k.next().unwrap());
    }
}

/// Top `k` of `indices` by descending `score`, ties broken by lower index.
pub fn top_k(indices: &[usize], score: impl Fn(usize) -> f64, k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = indices.to_vec();
    v.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    v.truncate(k);
    v
}

/// Densifies under the count cap, applying only the current phase's
/// operation, then flips the phase and clears the gradient statistics.
///
/// Clone candidates are Gaussians at or above the gradient threshold whose
/// largest scale is at most `dense_fraction` of the extent; split candidates
/// are the larger ones. With `N_c` Gaussians present, at most
/// `n_max - N_c` candidates are densified, preferring larger gradients.
pub fn densify_constrained<R: Rng + ?Sized>(state: &mut FitState, cfg: &FitConfig, rng: &mut R) -> DensifyEvent {
    let n_c = state.len();
    let limit = cfg.dense_fraction * state.bounds.extent();
    let phase = state.phase;
    let eligible: Vec<usize> = (0..n_c)
        .filter(|&i| {
            let g = state.gaussian(i);
            let small = g.max_scale() <= limit;
            state.mean_grad(i) >= cfg.grad_threshold && (small == (phase == Phase::Clone))
        })
        .collect();
    let budget = cfg.n_max.saturating_sub(n_c);
    let selected = top_k(&eligible, |i| state.mean_grad(i), budget.min(eligible.len()));
    let scores = eligible.iter().map(|&i| (i, state.mean_grad(i))).collect();
    let mut order = selected.clone();
    order.sort_unstable();
    match phase {
        Phase::Clone => {
            for &i in &order {
                let raw = state.raw[i];
                state.push(raw);
            }
        }
        Phase::Split => {
            for &i in &order {
                let g = state.gaussian(i);
                let [a, b] = [0, 1].map(|_| split_sample(&g, rng));
                state.raw[i] = to_raw(&a);
                state.adam_m[i] = [0.0; RAW];
                state.adam_v[i] = [0.0; RAW];
                state.push(to_raw(&b));
            }
        }
    }
    state.reset_accumulators();
    state.phase = phase.flipped();
    DensifyEvent {
        iteration: state.iteration,
        phase,
        candidates: eligible.len(),
        scores,
        selected,
        count_before: n_c,
        count_after: state.len(),
    }
}

/// A child placed at a point drawn from `g`, with scales divided by 1.6.
fn split_sample<R: Rng + ?Sized>(g: &Gaussian, rng: &mut R) -> Gaussian {
    let r = rotation_matrix(normalize_quat(g.rot).unwrap_or([1.0, 0.0, 0.0, 0.0]));
    let z = nalgebra::Vector3::from([0, 1, 2].map(|k| g.scale[k] * rng.sample::<f64, _>(StandardNormal)));
    let off = r * z;
    Gaussian {
        mu: [g.mu[0] + off[0], g.mu[1] + off[1], g.mu[2] + off[2]],
        scale: g.scale.map(|s| s / 1.6),
        ..*g
    }
}

/// Removes nearly transparent or oversized Gaussians, keeping at least one.
/// Returns the number removed.
pub fn prune(state: &mut FitState, cfg: &FitConfig) -> usize {
    let max_scale = cfg.prune_scale_fraction * state.bounds.extent();
    let mut keep: Vec<bool> = (0..state.len())
        .map(|i| {
            let g = state.gaussian(i);
            g.opacity >= cfg.prune_opacity && g.max_scale() <= max_scale
        })
        .collect();
    if !keep.iter().any(|&k| k) && !keep.is_empty() {
        let best = top_k(&(0..state.len()).collect::<Vec<_>>(), |i| state.gaussian(i).opacity, 1)[0];
        keep[best] = true;
    }
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed > 0 {
        state.retain(&keep);
    }
    removed
}

/// Caps every opacity at 0.01 and clears its optimizer moments.
pub fn reset_opacity(state: &mut FitState) {
    let cap = logit(0.01);
    for i in 0..state.len() {
        state.raw[i][10] = state.raw[i][10].min(cap);
        state.adam_m[i][10] = 0.0;
        state.adam_v[i][10] = 0.0;
    }
}
