//! Dense Jonker-Volgenant linear assignment.
//!
//! Column reduction, two budgeted rounds of augmenting row reduction, then
//! shortest augmenting paths for the rows still free.

use super::{CostMatrix, OtError};

/// Returns `x` with `x[row] = col` minimizing `sum cost[row][x[row]]`.
pub fn lapjv(cost: &CostMatrix) -> Result<Vec<usize>, OtError> {
    let n = cost.n;
    if n == 0 {
        return Err(OtError::Empty);
    }
    if let Some(k) = cost.data.iter().position(|c| !c.is_finite()) {
        return Err(OtError::NonFinite { row: k / n, col: k % n });
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let mut s = Solver { n, c: &cost.data, x: vec![NONE; n], y: vec![NONE; n], v: vec![0.0; n] };
    let mut free = s.column_reduction();
    for _ in 0..ARR_ROUNDS {
        if free.is_empty() {
            break;
        }
        free = s.augmenting_row_reduction(free);
    }
    s.augment(&free);
    Ok(s.x)
}

const NONE: usize = usize::MAX;
const ARR_ROUNDS: usize = 2;
/// Row-reduction steps allowed per free row in one round. The textbook
/// bound lets reduction cycle for a long time on geometric costs; past the
/// budget the remaining rows go to the augmentation phase.
const ARR_BUDGET: usize = 2;

struct Solver<'a> {
    n: usize,
    c: &'a [f64],
    /// Column assigned to each row.
    x: Vec<usize>,
    /// Row assigned to each column.
    y: Vec<usize>,
    /// Column duals.
    v: Vec<f64>,
}

impl Solver<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.c[i * self.n..(i + 1) * self.n]
    }

    fn column_reduction(&mut self) -> Vec<usize> {
        let n = self.n;
        self.v.fill(f64::INFINITY);
        for i in 0..n {
            let row = &self.c[i * n..(i + 1) * n];
            for j in 0..n {
                if row[j] < self.v[j] {
                    self.v[j] = row[j];
                    self.y[j] = i;
                }
            }
        }
        let mut unique = vec![true; n];
        for j in (0..n).rev() {
            let i = self.y[j];
            if self.x[i] == NONE {
                self.x[i] = j;
            } else {
                unique[i] = false;
                self.y[j] = NONE;
            }
        }
        let mut free = Vec::new();
        for i in 0..n {
            if self.x[i] == NONE {
                free.push(i);
            } else if unique[i] {
                let j = self.x[i];
                let row = self.row(i);
                let mut min = f64::INFINITY;
                for (j2, (&c, &v)) in row.iter().zip(&self.v).enumerate() {
                    if j2 != j {
                        min = min.min(c - v);
                    }
                }
                self.v[j] -= min;
            }
        }
        free
    }

    fn augmenting_row_reduction(&mut self, mut free: Vec<usize>) -> Vec<usize> {
        let n = self.n;
        let n_free = free.len();
        let mut current = 0usize;
        let mut new_free = 0usize;
        let mut rr_count = 0usize;
        let budget = ARR_BUDGET * n_free;
        while current < n_free {
            rr_count += 1;
            let free_i = free[current];
            current += 1;
            let row = self.row(free_i);
            let (mut j1, mut u1) = (0usize, row[0] - self.v[0]);
            let (mut j2, mut u2) = (NONE, f64::INFINITY);
            for j in 1..n {
                let h = row[j] - self.v[j];
                if h < u2 {
                    if h >= u1 {
                        u2 = h;
                        j2 = j;
                    } else {
                        u2 = u1;
                        u1 = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = self.y[j1];
            let v1_new = self.v[j1] - (u2 - u1);
            let v1_lowers = v1_new < self.v[j1];
            if rr_count < current * n && rr_count < budget {
                if v1_lowers {
                    self.v[j1] = v1_new;
                } else if i0 != NONE && j2 != NONE {
                    j1 = j2;
                    i0 = self.y[j2];
                }
                if i0 != NONE {
                    if v1_lowers {
                        current -= 1;
                        free[current] = i0;
                    } else {
                        free[new_free] = i0;
                        new_free += 1;
                    }
                }
            } else if i0 != NONE {
                free[new_free] = i0;
                new_free += 1;
            }
            self.x[free_i] = j1;
            self.y[j1] = free_i;
        }
        free.truncate(new_free);
        free
    }

    fn augment(&mut self, free: &[usize]) {
        let n = self.n;
        let mut pred = vec![0usize; n];
        let mut cols: Vec<usize> = (0..n).collect();
        let mut d = vec![0.0f64; n];
        for &free_i in free {
            let mut j = self.shortest_path(free_i, &mut pred, &mut cols, &mut d);
            loop {
                let i = pred[j];
                self.y[j] = i;
                let prev = self.x[i];
                self.x[i] = j;
                j = prev;
                if i == free_i {
                    break;
                }
            }
        }
    }

    /// Dijkstra over reduced costs from `start`; returns the free column reached
    /// and updates the duals of the columns settled on the way.
    fn shortest_path(&mut self, start: usize, pred: &mut [usize], cols: &mut [usize], d: &mut [f64]) -> usize {
        let n = self.n;
        for (k, c) in cols.iter_mut().enumerate() {
            *c = k;
        }
        let row = self.row(start);
        for j in 0..n {
            d[j] = row[j] - self.v[j];
            pred[j] = start;
        }
        let (mut lo, mut hi) = (0usize, 0usize);
        let mut n_ready = 0usize;
        let mut final_j = NONE;
        while final_j == NONE {
            if lo == hi {
                n_ready = lo;
                hi = find_min_columns(lo, d, cols);
                for &j in &cols[lo..hi] {
                    if self.y[j] == NONE {
                        final_j = j;
                    }
                }
            }
            if final_j == NONE {
                final_j = self.scan(&mut lo, &mut hi, d, cols, pred);
            }
        }
        let mind = d[cols[lo]];
        for &j in &cols[..n_ready] {
            self.v[j] += d[j] - mind;
        }
        final_j
    }

    /// Scans the columns in `cols[lo..hi]`. On reaching a free column the
    /// bounds are left untouched so `cols[lo]` still marks the settled level.
    fn scan(&self, lo: &mut usize, hi: &mut usize, d: &mut [f64], cols: &mut [usize], pred: &mut [usize]) -> usize {
        let n = self.n;
        let (mut l, mut h_idx) = (*lo, *hi);
        while l != h_idx {
            let j = cols[l];
            l += 1;
            let i = self.y[j];
            let mind = d[j];
            let row = self.row(i);
            let h = row[j] - self.v[j] - mind;
            for k in h_idx..n {
                let j = cols[k];
                let reduced = row[j] - self.v[j] - h;
                if reduced < d[j] {
                    d[j] = reduced;
                    pred[j] = i;
                    if reduced == mind {
                        if self.y[j] == NONE {
                            return j;
                        }
                        cols[k] = cols[h_idx];
                        cols[h_idx] = j;
                        h_idx += 1;
                    }
                }
            }
        }
        *lo = l;
        *hi = h_idx;
        NONE
    }
}

/// Moves the columns in `cols[lo..]` with minimal `d` to `cols[lo..hi]`; returns `hi`.
fn find_min_columns(lo: usize, d: &[f64], cols: &mut [usize]) -> usize {
    let mut hi = lo + 1;
    let mut mind = d[cols[lo]];
    for k in hi..cols.len() {
        let j = cols[k];
        if d[j] <= mind {
            if d[j] < mind {
                hi = lo;
                mind = d[j];
            }
            cols[k] = cols[hi];
            cols[hi] = j;
            hi += 1;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.n {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.n {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.n], 0.0, &mut best);
        best
    }

    fn cost_of(c: &CostMatrix, x: &[usize]) -> f64 {
        x.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum()
    }

    fn is_permutation(x: &[usize]) -> bool {
        let mut s = x.to_vec();
        s.sort_unstable();
        s.iter().enumerate().all(|(k, &v)| k == v)
    }

    #[test]
    fn two_by_two() {
        let id = CostMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(lapjv(&id).unwrap(), vec![0, 1]);
        let swap = CostMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(lapjv(&swap).unwrap(), vec![1, 0]);
    }

    #[test]
    fn matches_exhaustive_search_on_six_by_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let c = CostMatrix::new(6, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
            let x = lapjv(&c).unwrap();
            assert!(is_permutation(&x));
            let best = brute_force(&c);
            assert!((cost_of(&c, &x) - best).abs() <= 1e-12 * best.max(1.0));
        }
    }

    #[test]
    fn handles_ties_and_integer_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=7 {
            for _ in 0..40 {
                let c = CostMatrix::new(n, (0..n * n).map(|_| rng.random_range(0..3) as f64).collect()).unwrap();
                let x = lapjv(&c).unwrap();
                assert!(is_permutation(&x));
                assert_eq!(cost_of(&c, &x), brute_force(&c));
            }
        }
        let flat = CostMatrix::new(5, vec![2.0; 25]).unwrap();
        assert!(is_permutation(&lapjv(&flat).unwrap()));
    }

    #[test]
    fn rejects_non_finite() {
        let c = CostMatrix::new(2, vec![0.0, f64::NAN, 1.0, 0.0]).unwrap();
        assert_eq!(lapjv(&c), Err(OtError::NonFinite { row: 0, col: 1 }));
    }
}
