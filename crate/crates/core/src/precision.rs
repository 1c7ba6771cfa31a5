//! Storage-precision helpers.
//!
//! Cubes store single-precision values and positions as offsets from cell
//! centers. A set survives that storage unchanged when every non-position
//! value is an `f32` and every position and cell center lies on a common
//! power-of-two lattice fine enough that any offset fits a 24-bit
//! significand.

use crate::gaussian::{Aabb, Gaussian, GaussianSet};

/// Uniform grid `q * Z` with `q = 2^(e - 23)`, where `2^e` bounds every
/// coordinate magnitude of the box it was built for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionLattice {
    pub step: f64,
    /// Largest representable coordinate magnitude, `2^e`.
    pub limit: f64,
}

impl PositionLattice {
    pub fn for_bounds(bounds: &Aabb) -> Self {
        let m = bounds.min.iter().chain(&bounds.max).fold(0.0f64, |m, v| m.max(v.abs()));
        let mut e = if m > 0.0 { m.log2().ceil() as i32 } else { -126 };
        while 2f64.powi(e) < m {
            e += 1;
        }
        while e > -126 && 2f64.powi(e - 1) >= m {
            e -= 1;
        }
        Self { step: 2f64.powi(e - 23), limit: 2f64.powi(e) }
    }

    /// Nearest lattice point, with the magnitude clamped to [`Self::limit`].
    pub fn snap(&self, v: f64) -> f64 {
        ((v / self.step).round() * self.step).clamp(-self.limit, self.limit)
    }

    pub fn snap3(&self, p: [f64; 3]) -> [f64; 3] {
        p.map(|v| self.snap(v))
    }

    pub fn contains(&self, v: f64) -> bool {
        v.abs() <= self.limit && (v / self.step).fract() == 0.0
    }
}

pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn round_box(b: &Aabb) -> Aabb {
    Aabb { min: b.min.map(round_f32), max: b.max.map(round_f32) }
}

/// Rounds a set to the precision of cube storage: bounds and all
/// non-position channels to `f32`, positions onto the bounds lattice.
pub fn to_storage_precision(set: &GaussianSet) -> GaussianSet {
    let bounds = round_box(&set.bounds);
    let lattice = PositionLattice::for_bounds(&bounds);
    let gaussians = set
        .gaussians
        .iter()
        .map(|g| Gaussian {
            mu: lattice.snap3(g.mu),
            scale: g.scale.map(|s| round_f32(s).max(f32::MIN_POSITIVE as f64)),
            rot: g.rot.map(round_f32),
            opacity: round_f32(g.opacity),
            color: g.color.map(round_f32),
        })
        .collect();
    GaussianSet { gaussians, bounds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lattice_for_unit_box() {
        let l = PositionLattice::for_bounds(&Aabb::unit());
        assert_eq!(l.limit, 1.0);
        assert_eq!(l.step, 2f64.powi(-23));
        let l = PositionLattice::for_bounds(&Aabb::new([-3.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap());
        assert_eq!(l.limit, 4.0);
        assert_eq!(l.snap(10.0), 4.0);
        assert!(l.contains(l.snap(0.123456789)));
    }

    proptest! {
        #[test]
        fn lattice_offsets_are_exact_in_f32(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let l = PositionLattice::for_bounds(&Aabb::new([-5.0; 3], [5.0; 3]).unwrap());
            let (x, y) = (l.snap(a), l.snap(b));
            let off = (x - y) as f32;
            prop_assert_eq!(off as f64 + y, x);
        }
    }

    #[test]
    fn storage_precision_is_idempotent() {
        let g = Gaussian {
            mu: [0.1, -0.7, 0.33],
            scale: [0.01, 0.2, 0.3],
            rot: [0.9, 0.1, 0.2, 0.3],
            opacity: 0.7,
            color: [0.1, 0.2, 0.3],
        };
        let s = GaussianSet::new(vec![g], Aabb::unit());
        let once = to_storage_precision(&s);
        assert_eq!(to_storage_precision(&once), once);
    }
}
