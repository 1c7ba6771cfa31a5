//! Approximate assignment over spatially sorted segments.

use super::{distance_matrix, lap::lapjv, OtError, TransportPlan};
use crate::gaussian::Aabb;

pub const DEFAULT_SEGMENTS: usize = 4;
const MORTON_BITS: u32 = 21;

/// Interleaves the low 21 bits of each coordinate, x in the lowest position.
pub fn morton_encode(q: [u32; 3]) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut x = (v as u64) & 0x1f_ffff;
        x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
        x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
        x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x << 2)) & 0x1249_2492_4924_9249;
        x
    }
    spread(q[0]) | (spread(q[1]) << 1) | (spread(q[2]) << 2)
}

/// Morton key of `p` quantized to a 2^21 grid over `frame`.
pub fn morton_key(p: &[f64; 3], frame: &Aabb) -> u64 {
    let max_q = ((1u32 << MORTON_BITS) - 1) as f64;
    let size = frame.size();
    let q = [0, 1, 2].map(|k| {
        let t = ((p[k] - frame.min[k]) / size[k]).clamp(0.0, 1.0);
        (t * max_q).round() as u32
    });
    morton_encode(q)
}

/// Indices of `points` ordered by Morton key, ties by index.
pub fn morton_order(points: &[[f64; 3]], frame: &Aabb) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = points.iter().enumerate().map(|(i, p)| (morton_key(p, frame), i)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Sorts both point sets by a shared Morton frame, splits each into
/// `n_segments` equal rank blocks and solves each block pair exactly.
pub fn solve_lap_segmented(mus: &[[f64; 3]], centers: &[[f64; 3]], n_segments: usize) -> Result<TransportPlan, OtError> {
    let n = mus.len();
    if n != centers.len() {
        return Err(OtError::CountMismatch(n, centers.len()));
    }
    if n == 0 {
        return Err(OtError::Empty);
    }
    if n_segments == 0 || n % n_segments != 0 {
        return Err(OtError::Indivisible { n, segments: n_segments });
    }
    if let Some(i) = mus.iter().chain(centers).position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(OtError::NonFinitePoint(i));
    }
    let frame = Aabb::enclosing(mus.iter().chain(centers), 0.0).expect("non-empty finite points");
    let g_order = morton_order(mus, &frame);
    let v_order = morton_order(centers, &frame);
    let m = n / n_segments;
    let mut assignment = vec![usize::MAX; n];
    for s in 0..n_segments {
        let gs = &g_order[s * m..(s + 1) * m];
        let vs = &v_order[s * m..(s + 1) * m];
        let block_mus: Vec<[f64; 3]> = gs.iter().map(|&i| mus[i]).collect();
        let block_centers: Vec<[f64; 3]> = vs.iter().map(|&j| centers[j]).collect();
        let d = distance_matrix(&block_mus, &block_centers)?;
        let x = lapjv(&d)?;
        drop(d);
        for (local_i, &local_j) in x.iter().enumerate() {
            assignment[gs[local_i]] = vs[local_j];
        }
    }
    Ok(TransportPlan::from_points(assignment, mus, centers))
}
