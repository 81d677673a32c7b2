//! Exact empirical 1-Wasserstein distances between equal-size sample sets.

use crate::error::{Error, Result};
use crate::flows::SampleSet;
use crate::par::Execution;

/// Default cap on the assignment size; the Hungarian solve is `O(M^3)`.
pub const DEFAULT_EMD_CAP: usize = 512;

fn check_sizes(a: &SampleSet, b: &SampleSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Sorted-pairing formula, exact in one dimension.
pub fn wasserstein1_1d(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    check_sizes(a, b)?;
    if a.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: a.dim(),
        });
    }
    let mut xs = a.as_flat().to_vec();
    let mut ys = b.as_flat().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / xs.len() as f64)
}

/// Sorting formula in one dimension, exact assignment (capped) otherwise.
pub fn wasserstein1(a: &SampleSet, b: &SampleSet, cap: usize, exec: Execution) -> Result<f64> {
    if a.dim() == 1 {
        wasserstein1_1d(a, b)
    } else {
        emd_exact_with_cap(a, b, cap, exec)
    }
}

/// Row-major Euclidean cost matrix; rows are built in parallel.
pub fn cost_matrix(a: &SampleSet, b: &SampleSet, exec: Execution) -> Result<Vec<f64>> {
    check_sizes(a, b)?;
    let m = b.len();
    let rows = exec.map(a.len(), |i| {
        let p = a.point(i);
        (0..m)
            .map(|j| {
                p.iter()
                    .zip(b.point(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<f64>>()
    });
    Ok(rows.concat())
}

/// Exact EMD with uniform weights: the minimum mean cost over perfect
/// matchings, with sizes capped at `cap`.
pub fn emd_exact_with_cap(a: &SampleSet, b: &SampleSet, cap: usize, exec: Execution) -> Result<f64> {
    check_sizes(a, b)?;
    if a.len() > cap {
        return Err(Error::TooLarge { size: a.len(), cap });
    }
    let n = a.len();
    let cost = cost_matrix(a, b, exec)?;
    let assignment = hungarian(&cost, n);
    // summing the matched costs in sorted order makes the value independent
    // of input ordering (exact symmetry and permutation invariance)
    let mut matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok(total / n as f64)
}

pub fn emd_exact(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    emd_exact_with_cap(a, b, DEFAULT_EMD_CAP, Execution::default())
}

/// Minimum-cost perfect matching on a dense `n x n` matrix (shortest
/// augmenting paths with potentials). Returns the column matched to each row.
/// Ties resolve to the lowest column index.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}
