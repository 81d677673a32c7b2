//! Small summary statistics used by the experiments.

/// Sample mean and its standard error (`sd / sqrt(n)`, unbiased `sd`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (xs.len() >= 2 && sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either input is constant (the
/// statistic is undefined).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mean, _) = mean_stderr(xs);
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((n - 1.0) * p).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Local maxima of a Gaussian kernel density estimate, evaluated on a
/// uniform grid over the sample range padded by three bandwidths. Maxima
/// below `min_rel_height` times the global maximum are dropped.
pub fn kde_modes(xs: &[f64], bandwidth: f64, grid_points: usize, min_rel_height: f64) -> Vec<f64> {
    if xs.is_empty() || grid_points < 3 {
        return Vec::new();
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|g| xs.iter().map(|x| (-0.5 * ((g - x) / bandwidth).powi(2)).exp()).sum())
        .collect();
    let top = density.iter().copied().fold(0.0, f64::max);
    (1..grid_points - 1)
        .filter(|&i| density[i] > density[i - 1] && density[i] >= density[i + 1])
        .filter(|&i| density[i] >= min_rel_height * top)
        .map(|i| grid[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn mean_and_stderr() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(mean_stderr(&[7.0]).1.is_infinite());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
    }

    #[test]
    fn spearman_matches_difference_formula_without_ties() {
        let mut r = rng::stream(4, 0);
        let xs = rng::normal_vec(&mut r, 50);
        let ys: Vec<f64> = xs.iter().map(|x| x + rng::normal(&mut r)).collect();
        let (rx, ry) = (ranks(&xs), ranks(&ys));
        let n = xs.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let classic = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman(&xs, &ys).unwrap() - classic).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_based() {
        let xs = [0.1, 0.5, 0.2, 0.9, 0.7];
        let cubed: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        assert!((spearman(&xs, &cubed).unwrap() - 1.0).abs() < 1e-15);
        let flipped: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((spearman(&xs, &flipped).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&xs, &[1.0; 5]), None);
    }

    #[test]
    fn kde_finds_two_modes() {
        let mut r = rng::stream(9, 0);
        let xs: Vec<f64> = (0..4096)
            .map(|i| if i % 2 == 0 { 0.0 } else { 1.0 } + 0.1 * rng::normal(&mut r))
            .collect();
        let modes = kde_modes(&xs, silverman_bandwidth(&xs), 512, 0.1);
        assert_eq!(modes.len(), 2, "{modes:?}");
        assert!(modes[0].abs() < 0.05 && (modes[1] - 1.0).abs() < 0.05, "{modes:?}");
    }
}
