//! Set-prediction matching: costs, the Hungarian solver, the imputation loss
//! and probability filtering.
//!
//! The solver is generic over [`Cost`], so it runs on `f32`/`f64` during
//! training and on exact rationals in tests.

use crate::error::{Error, Result};
use crate::neural::ImputationOutput;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use num_rational::Ratio;
use num_traits::Num;
use std::fmt::Debug;

/// Values the assignment solver can minimise.
pub trait Cost: Copy + PartialOrd + Num + Debug {
    fn is_finite_cost(&self) -> bool;

    /// Whether a non-negative reduced cost counts as zero. `scale` is the
    /// largest absolute entry of the matrix.
    fn is_tight(reduced: Self, scale: Self) -> bool;
}

macro_rules! float_cost {
    ($t:ty) => {
        impl Cost for $t {
            fn is_finite_cost(&self) -> bool {
                self.is_finite()
            }

            fn is_tight(reduced: Self, scale: Self) -> bool {
                reduced <= <$t>::EPSILON * 16.0 * scale.max(1.0)
            }
        }
    };
}

float_cost!(f32);
float_cost!(f64);

macro_rules! exact_cost {
    ($($t:ty),*) => {$(
        impl Cost for Ratio<$t> {
            fn is_finite_cost(&self) -> bool {
                true
            }

            fn is_tight(reduced: Self, _scale: Self) -> bool {
                reduced == Self::from_integer(0)
            }
        }

        impl Cost for $t {
            fn is_finite_cost(&self) -> bool {
                true
            }

            fn is_tight(reduced: Self, _scale: Self) -> bool {
                reduced == 0
            }
        }
    )*};
}

exact_cost!(i32, i64, i128);

/// A square predictions-by-targets cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    n: usize,
    entries: Vec<T>,
}

impl<T: Cost> CostMatrix<T> {
    pub fn new(n: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Domain(format!("cost matrix needs {} entries, got {}", n * n, entries.len())));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("cost matrix must be square".into()));
        }
        Ok(Self { n, entries: rows.into_iter().flatten().collect() })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }

    /// Sum of the entries selected by `perm` (row `i` takes column `perm[i]`).
    pub fn cost_of(&self, perm: &[usize]) -> T {
        perm.iter().enumerate().fold(T::zero(), |acc, (i, &j)| acc + self.get(i, j))
    }
}

/// An optimal assignment of rows (predictions) to columns (targets).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    /// `perm[i]` is the column assigned to row `i`.
    pub perm: Vec<usize>,
    pub total_cost: T,
}

impl<T> Assignment<T> {
    /// For each column, the row assigned to it.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &j) in self.perm.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// Minimum-cost perfect assignment with the Hungarian method, `O(n^3)`.
///
/// Among all optimal permutations the lexicographically smallest is returned.
/// It is found as the smallest perfect matching of the tight-edge subgraph
/// under the optimal dual potentials.
pub fn solve_assignment<T: Cost>(cost: &CostMatrix<T>) -> Result<Assignment<T>> {
    let n = cost.n;
    if let Some(bad) = cost.entries.iter().find(|e| !e.is_finite_cost()) {
        return Err(Error::Domain(format!("non-finite cost entry {bad:?}")));
    }
    if n == 0 {
        return Ok(Assignment { perm: Vec::new(), total_cost: T::zero() });
    }

    // Potentials and matching, 1-indexed with a sentinel column 0.
    let zero = T::zero();
    let mut u = vec![zero; n + 1];
    let mut v = vec![zero; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv: Vec<Option<T>> = vec![None; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta: Option<T> = None;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if minv[j].is_none_or(|m| cur < m) {
                    minv[j] = Some(cur);
                    way[j] = j0;
                }
                let mj = minv[j].expect("set above");
                if delta.is_none_or(|d| mj < d) {
                    delta = Some(mj);
                    j1 = j;
                }
            }
            let delta = delta.expect("an unused column remains");
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else if let Some(m) = minv[j] {
                    minv[j] = Some(m - delta);
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    let mut row_of = vec![0usize; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
        row_of[j - 1] = p[j] - 1;
    }

    let scale = cost
        .entries
        .iter()
        .fold(zero, |m, &e| {
            let a = if e < zero { zero - e } else { e };
            if a > m { a } else { m }
        });
    let tight = |i: usize, j: usize| {
        let r = cost.get(i, j) - u[i + 1] - v[j + 1];
        T::is_tight(if r < zero { zero - r } else { r }, scale)
    };
    lexicographic_refine(n, &tight, &mut col_of, &mut row_of);

    let total_cost = cost.cost_of(&col_of);
    Ok(Assignment { perm: col_of, total_cost })
}

/// Turns any perfect matching of the tight graph into its lexicographically
/// smallest one by rerouting along alternating paths.
fn lexicographic_refine(
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of: &mut [usize],
    row_of: &mut [usize],
) {
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for c in 0..n {
            if fixed_col[c] || !tight(i, c) {
                continue;
            }
            if c == col_of[i] {
                break;
            }
            let freed = col_of[i];
            let start = row_of[c];
            let mut visited = vec![false; n];
            visited[c] = true;
            let mut path = Vec::new();
            if reroute(start, freed, tight, &fixed_col, row_of, &mut visited, &mut path) {
                // path holds (row, new column) pairs
                for &(r, nc) in &path {
                    col_of[r] = nc;
                    row_of[nc] = r;
                }
                col_of[i] = c;
                row_of[c] = i;
                break;
            }
        }
        fixed_col[col_of[i]] = true;
    }
}

fn reroute(
    row: usize,
    target: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed_col: &[bool],
    row_of: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..row_of.len() {
        if visited[c] || fixed_col[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        path.push((row, c));
        if reroute(row_of[c], target, tight, fixed_col, row_of, visited, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Pairwise matching cost: `||pred - target||^2 + (1 - p)` for a real target,
/// and `p` for the empty slot (whose squared-error term is zero).
pub fn match_cost<T: Scalar>(pred: &[T], prob: T, target: Option<&[T]>) -> T {
    match target {
        Some(t) => {
            assert_eq!(pred.len(), t.len(), "prediction and target widths differ");
            let sq = pred.iter().zip(t).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>();
            sq + (T::one() - prob)
        }
        None => prob,
    }
}

/// Cost of every (prediction, padded target) pair. Columns at or past
/// `targets.rows()` are empty slots.
pub fn build_cost_matrix<T: Scalar + Cost>(imp: &ImputationOutput<T>, targets: &Matrix<T>) -> Result<CostMatrix<T>> {
    let m = imp.len();
    if targets.rows() > m {
        return Err(Error::Domain(format!("{} targets exceed {m} queries; truncate upstream", targets.rows())));
    }
    if targets.rows() > 0 && targets.cols() != imp.vectors.cols() {
        return Err(Error::Domain("target width differs from prediction width".into()));
    }
    let mut entries = Vec::with_capacity(m * m);
    for i in 0..m {
        let pred = imp.vectors.row(i);
        let p = imp.probs[i];
        for j in 0..m {
            let t = (j < targets.rows()).then(|| targets.row(j));
            entries.push(match_cost(pred, p, t));
        }
    }
    CostMatrix::new(m, entries)
}

/// Probability clamp applied before taking logs.
pub const DEFAULT_LOG_CLAMP: f64 = 1e-7;

/// Imputation loss for a fixed assignment: mean matched squared error over the
/// real targets plus the existence log-loss averaged over all `M` queries.
pub fn imputation_loss<T: Scalar>(imp: &ImputationOutput<T>, targets: &Matrix<T>, assignment: &Assignment<T>, clamp: T) -> T {
    let m = imp.len();
    let n_real = targets.rows();
    let owner = assignment.inverse();
    let clip = |x: T| x.max(clamp).min(T::one() - clamp);
    let mut sq = T::zero();
    for (j, &i) in owner.iter().enumerate().take(n_real) {
        sq = sq + imp.vectors.row(i).iter().zip(targets.row(j)).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>();
    }
    let mse = if n_real == 0 { T::zero() } else { sq / T::from_usize(n_real).expect("count") };
    let mut nll = T::zero();
    for (j, &i) in owner.iter().enumerate() {
        let p = clip(imp.probs[i]);
        nll = nll - if j < n_real { p.ln() } else { (T::one() - p).ln() };
    }
    mse + nll / T::from_usize(m).expect("count")
}

/// Indices of predictions whose probability strictly exceeds `tau`, in order.
pub fn filter_imputed<T: Scalar>(imp: &ImputationOutput<T>, tau: T) -> Vec<usize> {
    imp.probs.iter().enumerate().filter(|(_, &p)| p > tau).map(|(i, _)| i).collect()
}
