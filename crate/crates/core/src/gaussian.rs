//! Gaussian primitives: the 14-channel splat parameterization, covariance
//! construction, density evaluation, and fixed-count padding.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of scalar channels in a flattened Gaussian:
/// position (3), scale (3), rotation wxyz (4), opacity (1), color (3).
pub const CHANNELS: usize = 14;

/// Condition-number cap above which a covariance is considered degenerate.
pub const MAX_CONDITION_NUMBER: f64 = 1e8;

/// Scale used for padding Gaussians. It is the smallest positive normal
/// single-precision float so that padded entries survive storage unchanged.
pub const PAD_SCALE: f64 = f32::MIN_POSITIVE as f64;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("invalid rotation: quaternion has zero or non-finite norm")]
    InvalidRotation,
    #[error("invalid scale {0:?}: components must be finite and strictly positive")]
    InvalidScale([f64; 3]),
    #[error("degenerate covariance: condition number {0:e} exceeds cap")]
    DegenerateCovariance(f64),
    #[error("set holds {len} Gaussians which exceeds the target count {target}")]
    Overfull { len: usize, target: usize },
    #[error("invalid bounds: min {min:?} must be strictly below max {max:?}")]
    InvalidBounds { min: [f64; 3], max: [f64; 3] },
}

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GaussianError> {
        let valid = (0..3).all(|k| min[k].is_finite() && max[k].is_finite() && min[k] < max[k]);
        if !valid {
            return Err(GaussianError::InvalidBounds { min, max });
        }
        Ok(Self { min, max })
    }

    /// The `[-1, 1]^3` cube.
    pub fn unit() -> Self {
        Self { min: [-1.0; 3], max: [1.0; 3] }
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn size(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.max[k] - self.min[k])
    }

    /// Longest side length, used as the scene extent by densification and pruning.
    pub fn extent(&self) -> f64 {
        let s = self.size();
        s[0].max(s[1]).max(s[2])
    }

    /// Smallest box containing all points, grown by `margin` on every side.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>, margin: f64) -> Option<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        if !any {
            return None;
        }
        for k in 0..3 {
            let pad = margin.max(1e-6 * (max[k] - min[k]).abs()).max(1e-6);
            min[k] -= pad;
            max[k] += pad;
        }
        Aabb::new(min, max).ok()
    }
}

/// One 3D Gaussian splat with activated parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: [f64; 3],
    /// Per-axis standard deviation, strictly positive.
    pub scale: [f64; 3],
    /// Rotation quaternion in (w, x, y, z) order.
    pub rot: [f64; 4],
    /// Opacity in `[0, 1]`.
    pub opacity: f64,
    /// RGB color in `[0, 1]`.
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn isotropic(mu: [f64; 3], sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self { mu, scale: [sigma; 3], rot: [1.0, 0.0, 0.0, 0.0], opacity, color }
    }

    /// The invisible placeholder used by [`GaussianSet::pad_to`].
    pub fn padding(at: [f64; 3]) -> Self {
        Self { mu: at, scale: [PAD_SCALE; 3], rot: [1.0, 0.0, 0.0, 0.0], opacity: 0.0, color: [0.0; 3] }
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>, GaussianError> {
        covariance(self.rot, self.scale)
    }

    /// Evaluates the unnormalized density `exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))`.
    pub fn eval_density(&self, x: [f64; 3]) -> Result<f64, GaussianError> {
        eval_density(self, x)
    }

    pub fn max_scale(&self) -> f64 {
        self.scale[0].max(self.scale[1]).max(self.scale[2])
    }

    /// Flattens to `[mu, scale, rot, opacity, color]`.
    pub fn to_channels(&self) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        out[0..3].copy_from_slice(&self.mu);
        out[3..6].copy_from_slice(&self.scale);
        out[6..10].copy_from_slice(&self.rot);
        out[10] = self.opacity;
        out[11..14].copy_from_slice(&self.color);
        out
    }

    pub fn from_channels(c: &[f64; CHANNELS]) -> Self {
        Self {
            mu: [c[0], c[1], c[2]],
            scale: [c[3], c[4], c[5]],
            rot: [c[6], c[7], c[8], c[9]],
            opacity: c[10],
            color: [c[11], c[12], c[13]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_channels().iter().all(|v| v.is_finite())
    }

    /// Returns a copy whose rotation has unit norm.
    pub fn normalized(&self) -> Result<Self, GaussianError> {
        Ok(Self { rot: normalize_quat(self.rot)?, ..*self })
    }
}

pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4], GaussianError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(GaussianError::InvalidRotation);
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit quaternion in (w, x, y, z) order.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Builds `R diag(s)^2 R^T` from a (not necessarily unit) quaternion and a scale vector.
pub fn covariance(rot: [f64; 4], scale: [f64; 3]) -> Result<Matrix3<f64>, GaussianError> {
    if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(GaussianError::InvalidScale(scale));
    }
    let r = rotation_matrix(normalize_quat(rot)?);
    let m = r * Matrix3::from_diagonal(&Vector3::from(scale));
    let cov = m * m.transpose();
    // symmetrize away rounding asymmetry
    Ok((cov + cov.transpose()) * 0.5)
}

pub fn eval_density(g: &Gaussian, x: [f64; 3]) -> Result<f64, GaussianError> {
    if !g.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(GaussianError::InvalidScale(g.scale));
    }
    let smax = g.max_scale();
    let smin = g.scale[0].min(g.scale[1]).min(g.scale[2]);
    let cond = (smax / smin).powi(2);
    if cond > MAX_CONDITION_NUMBER {
        return Err(GaussianError::DegenerateCovariance(cond));
    }
    let d = Vector3::from(x) - Vector3::from(g.mu);
    // Sigma^-1 = R diag(1/s^2) R^T, which avoids inverting a tiny-scale matrix directly.
    let r = rotation_matrix(normalize_quat(g.rot)?);
    let local = r.transpose() * d;
    let m2: f64 = (0..3).map(|k| (local[k] / g.scale[k]).powi(2)).sum();
    Ok((-0.5 * m2).exp())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sorted_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let mut ev: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    [ev[0], ev[1], ev[2]]
}

/// Ordered collection of Gaussians with the bounds of the scene they model.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub bounds: Aabb,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>, bounds: Aabb) -> Self {
        Self { gaussians, bounds }
    }

    pub fn empty(bounds: Aabb) -> Self {
        Self::new(Vec::new(), bounds)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends zero-opacity placeholders until the set holds `n_target` Gaussians.
    ///
    /// Placeholders sit at the bounds center with the smallest positive scale,
    /// identity rotation and black color, so they contribute nothing to a render.
    pub fn pad_to(&self, n_target: usize) -> Result<Self, GaussianError> {
        if self.len() > n_target {
            return Err(GaussianError::Overfull { len: self.len(), target: n_target });
        }
        let mut out = self.clone();
        let center = self.bounds.center();
        out.gaussians.resize(n_target, Gaussian::padding(center));
        Ok(out)
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.gaussians.iter().map(|g| g.mu).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{a} != {b}");
        }
    }

    #[test]
    fn identity_covariance() {
        let c = covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert_mat_close(&c, &Matrix3::identity(), 1e-15);
    }

    #[test]
    fn axis_aligned_covariance() {
        let c = covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        assert_mat_close(&c, &Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 1e-15);
    }

    #[test]
    fn rotated_covariance_matches_explicit_product() {
        let h = 0.5f64.sqrt();
        let c = covariance([h, 0.0, 0.0, h], [2.0, 1.0, 1.0]).unwrap();
        // 90 degrees about z maps x to y
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        assert_mat_close(&c, &expected, 1e-12);
        assert_mat_close(&c, &Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), 1e-12);
    }

    #[test]
    fn covariance_errors() {
        assert_eq!(covariance([0.0; 4], [1.0; 3]), Err(GaussianError::InvalidRotation));
        assert!(matches!(
            covariance([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 1.0]),
            Err(GaussianError::InvalidScale(_))
        ));
        assert!(matches!(
            covariance([1.0, 0.0, 0.0, 0.0], [1.0, -2.0, 1.0]),
            Err(GaussianError::InvalidScale(_))
        ));
    }

    #[test]
    fn density_values() {
        let g = Gaussian::isotropic([0.5, -1.0, 2.0], 1.0, 1.0, [0.0; 3]);
        assert_eq!(g.eval_density(g.mu).unwrap(), 1.0);
        let x = [1.5, -1.0, 2.0];
        assert!((g.eval_density(x).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g.eval_density(x).unwrap() - 0.60653).abs() < 1e-5);

        // Mahalanobis distance 3 along a stretched axis
        let g = Gaussian { scale: [2.0, 0.5, 1.0], ..g };
        let x = [0.5, -1.0 + 1.5, 2.0];
        assert!((g.eval_density(x).unwrap() - (-4.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_density_rejected() {
        let g = Gaussian { scale: [1.0, 1e-5, 1.0], ..Gaussian::isotropic([0.0; 3], 1.0, 1.0, [0.0; 3]) };
        assert!(matches!(g.eval_density([0.0; 3]), Err(GaussianError::DegenerateCovariance(_))));
    }

    #[test]
    fn pad_appends_invisible_gaussians() {
        let bounds = Aabb::new([0.0, 0.0, 0.0], [2.0, 4.0, 6.0]).unwrap();
        let gs = (0..5).map(|i| Gaussian::isotropic([i as f64 * 0.1; 3], 0.1, 0.5, [0.2; 3])).collect();
        let set = GaussianSet::new(gs, bounds);
        let padded = set.pad_to(8).unwrap();
        assert_eq!(padded.len(), 8);
        assert_eq!(&padded.gaussians[..5], &set.gaussians[..]);
        for g in &padded.gaussians[5..] {
            assert_eq!(g.opacity, 0.0);
            assert_eq!(g.mu, [1.0, 2.0, 3.0]);
            assert_eq!(g.rot, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(g.color, [0.0; 3]);
            assert!(g.scale.iter().all(|s| *s > 0.0));
        }
        assert_eq!(padded.pad_to(8).unwrap(), padded);
        assert_eq!(set.pad_to(5).unwrap(), set);
        assert_eq!(set.pad_to(4), Err(GaussianError::Overfull { len: 5, target: 4 }));
    }

    #[test]
    fn channel_layout() {
        let g = Gaussian {
            mu: [1.0, 2.0, 3.0],
            scale: [4.0, 5.0, 6.0],
            rot: [7.0, 8.0, 9.0, 10.0],
            opacity: 11.0,
            color: [12.0, 13.0, 14.0],
        };
        let c = g.to_channels();
        assert_eq!(c.len(), CHANNELS);
        assert_eq!(c, std::array::from_fn(|i| (i + 1) as f64));
        assert_eq!(Gaussian::from_channels(&c), g);
    }

    fn quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
    }

    proptest! {
        #[test]
        fn covariance_is_spd_with_scale_squared_spectrum(q in quat(), s in prop::array::uniform3(0.05f64..3.0)) {
            let c = covariance(q, s).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let ev = sorted_eigenvalues(&c);
            let mut s2 = s.map(|v| v * v);
            s2.sort_by(f64::total_cmp);
            for k in 0..3 {
                prop_assert!(ev[k] > 0.0);
                prop_assert!((ev[k] - s2[k]).abs() < 1e-5 * s2[2].max(1.0));
            }
        }

        #[test]
        fn density_is_rotation_equivariant(
            q in quat(),
            r in quat(),
            s in prop::array::uniform3(0.2f64..2.0),
            d in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let g = Gaussian { mu: [0.3, -0.2, 0.1], scale: s, rot: q, opacity: 1.0, color: [0.0; 3] };
            let x = [g.mu[0] + d[0], g.mu[1] + d[1], g.mu[2] + d[2]];
            let base = g.eval_density(x).unwrap();

            // rotate both the offset and the Gaussian orientation by r
            let rn = normalize_quat(r).unwrap();
            let qn = normalize_quat(q).unwrap();
            let rot = quat_mul(rn, qn);
            let rd = rotation_matrix(rn) * Vector3::from(d);
            let g2 = Gaussian { rot, ..g };
            let x2 = [g.mu[0] + rd[0], g.mu[1] + rd[1], g.mu[2] + rd[2]];
            let rotated = g2.eval_density(x2).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
        }

        #[test]
        fn pad_preserves_prefix(n in 0usize..10, extra in 0usize..10) {
            let gs = (0..n).map(|i| Gaussian::isotropic([i as f64; 3], 1.0, 0.5, [0.1; 3])).collect();
            let set = GaussianSet::new(gs, Aabb::unit());
            let p = set.pad_to(n + extra).unwrap();
            prop_assert_eq!(&p.gaussians[..n], &set.gaussians[..]);
            prop_assert_eq!(p.pad_to(n + extra).unwrap(), p);
        }
    }

    fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
        let [aw, ax, ay, az] = a;
        let [bw, bx, by, bz] = b;
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    }
}
