//! Self-guidance: flows at unseen conditions as `z`-dependent linear
//! combinations of flows anchored at seen conditions.
//!
//! The spline variant uses the cardinal natural cubic spline basis over the
//! knots; the continuous variant uses the closed-form kernel
//! `gamma(u) = c1 (1 + c2 u^2)^(-3/2)`.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{ConditionalFlow, FlowRef};
use crate::schedules::DiffusionSchedule;

/// Cardinal basis of natural cubic splines over scalar knots.
///
/// `coeffs[i][k] = [a, b, c, d]` gives basis `i` on interval `k` as
/// `a + b t + c t^2 + d t^3` with `t = z - knots[k]`. Beyond the end knots the
/// basis continues linearly with matching slope.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineWeights {
    knots: Vec<f64>,
    coeffs: Vec<Vec<[f64; 4]>>,
    // slope of basis i at the last knot
    right_slope: Vec<f64>,
}

impl SplineWeights {
    pub fn solve(knots: &[f64]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidArgument("spline needs at least two knots".into()));
        }
        for w in knots.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DegenerateSupport(w[0], w[1]));
            }
            if w[0] > w[1] || !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::UnsortedKnots(w[0], w[1]));
            }
        }
        let n = knots.len();
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let mut coeffs = Vec::with_capacity(n);
        let mut right_slope = Vec::with_capacity(n);
        for i in 0..n {
            let y: Vec<f64> = (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            let m = natural_second_derivatives(&h, &y);
            let table: Vec<[f64; 4]> = (0..n - 1)
                .map(|k| {
                    let slope = (y[k + 1] - y[k]) / h[k];
                    [
                        y[k],
                        slope - h[k] * (2.0 * m[k] + m[k + 1]) / 6.0,
                        0.5 * m[k],
                        (m[k + 1] - m[k]) / (6.0 * h[k]),
                    ]
                })
                .collect();
            let [_, b, c, d] = table[n - 2];
            let hl = h[n - 2];
            right_slope.push(b + 2.0 * c * hl + 3.0 * d * hl * hl);
            coeffs.push(table);
        }
        Ok(SplineWeights {
            knots: knots.to_vec(),
            coeffs,
            right_slope,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Coefficient table `[a, b, c, d]` per interval for basis `i`.
    pub fn coefficients(&self, i: usize) -> &[[f64; 4]] {
        &self.coeffs[i]
    }

    fn locate(&self, z: f64) -> Segment {
        let n = self.knots.len();
        if z < self.knots[0] {
            Segment::Left(z - self.knots[0])
        } else if z >= self.knots[n - 1] {
            Segment::Right(z - self.knots[n - 1])
        } else {
            // last k with knots[k] <= z
            let k = self.knots.partition_point(|&kn| kn <= z) - 1;
            Segment::Interior(k, z - self.knots[k])
        }
    }

    /// `order`-th derivative (0..=3) of every basis function at `z`.
    pub fn derivatives(&self, z: f64, order: usize) -> Vec<f64> {
        let n = self.knots.len();
        let seg = self.locate(z);
        (0..n)
            .map(|i| match seg {
                Segment::Left(t) => {
                    let [a, b, _, _] = self.coeffs[i][0];
                    match order {
                        0 => a + b * t,
                        1 => b,
                        _ => 0.0,
                    }
                }
                Segment::Right(t) => {
                    let value = if i == n - 1 { 1.0 } else { 0.0 };
                    match order {
                        0 => value + self.right_slope[i] * t,
                        1 => self.right_slope[i],
                        _ => 0.0,
                    }
                }
                Segment::Interior(k, t) => {
                    let [a, b, c, d] = self.coeffs[i][k];
                    match order {
                        0 => a + t * (b + t * (c + t * d)),
                        1 => b + t * (2.0 * c + 3.0 * d * t),
                        2 => 2.0 * c + 6.0 * d * t,
                        3 => 6.0 * d,
                        _ => 0.0,
                    }
                }
            })
            .collect()
    }

    /// Basis weights `p^(i)(z)`.
    pub fn weights(&self, z: f64) -> Vec<f64> {
        self.derivatives(z, 0)
    }

    /// Writes the coefficient table as CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "basis,interval,z_lo,z_hi,a,b,c,d")?;
        for (i, table) in self.coeffs.iter().enumerate() {
            for (k, [a, b, c, d]) in table.iter().enumerate() {
                writeln!(
                    out,
                    "{i},{k},{},{},{a:e},{b:e},{c:e},{d:e}",
                    self.knots[k],
                    self.knots[k + 1]
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Segment {
    Left(f64),
    Interior(usize, f64),
    Right(f64),
}

// Second derivatives of the natural cubic spline through `y`, by the
// Thomas algorithm on the interior tridiagonal system.
fn natural_second_derivatives(h: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for j in 0..inner {
        let k = j + 1;
        diag[j] = 2.0 * (h[k - 1] + h[k]);
        rhs[j] = 6.0 * ((y[k + 1] - y[k]) / h[k] - (y[k] - y[k - 1]) / h[k - 1]);
    }
    // sub- and super-diagonal entry between unknowns j and j+1 is h[j+1]
    for j in 1..inner {
        let w = h[j] / diag[j - 1];
        diag[j] -= w * h[j];
        rhs[j] -= w * rhs[j - 1];
    }
    m[inner] = rhs[inner - 1] / diag[inner - 1];
    for j in (0..inner - 1).rev() {
        m[j + 1] = (rhs[j] - h[j + 1] * m[j + 2]) / diag[j];
    }
    m
}

/// The closed-form continuous-support kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceKernel {
    pub c1: f64,
    pub c2: f64,
}

impl Default for GuidanceKernel {
    fn default() -> Self {
        GuidanceKernel { c1: 1.5, c2: 16.0 }
    }
}

impl GuidanceKernel {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel constants must be positive (got c1={c1}, c2={c2})"
            )));
        }
        Ok(GuidanceKernel { c1, c2 })
    }

    pub fn gamma(&self, u: f64) -> f64 {
        self.c1 * (1.0 + self.c2 * u * u).powf(-1.5)
    }

    /// `(w0, w1)` for the flows anchored at `z = 0` and `z = 1`.
    pub fn weights(&self, z: f64) -> (f64, f64) {
        let g0 = self.gamma(z);
        let g1 = self.gamma(1.0 - z);
        (g0 / (g0 + g1), g1 / (g0 + g1))
    }
}

fn check_bases(bases: &[FlowRef]) -> Result<(usize, DiffusionSchedule)> {
    let first = bases
        .first()
        .ok_or_else(|| Error::InvalidArgument("guided flow needs base flows".into()))?;
    let dim = first.dim();
    for b in bases {
        if b.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: b.dim(),
            });
        }
    }
    Ok((dim, first.schedule().clone()))
}

fn combine(
    weights: &[f64],
    dim: usize,
    mut eval: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = eval(i)?;
        out.iter_mut().zip(&v).for_each(|(o, vi)| *o += w * vi);
    }
    Ok(out)
}

fn combine_scalar(weights: &[f64], mut eval: impl FnMut(usize) -> Option<Result<f64>>) -> Option<Result<f64>> {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        match eval(i)? {
            Ok(v) => acc += w * v,
            Err(e) => return Some(Err(e)),
        }
    }
    Some(Ok(acc))
}

fn scalar_condition(z: &[f64]) -> Result<f64> {
    match z {
        [v] => Ok(*v),
        _ => Err(Error::DimensionMismatch {
            expected: 1,
            got: z.len(),
        }),
    }
}

/// `sum_i p^(i)(z) v_i(x, z^(i), s)`; base flow `i` is queried at its own knot.
#[derive(Clone)]
pub struct SplineGuidedFlow {
    weights: SplineWeights,
    bases: Vec<FlowRef>,
    dim: usize,
    schedule: DiffusionSchedule,
}

impl SplineGuidedFlow {
    pub fn new(knots: &[f64], bases: Vec<FlowRef>) -> Result<Self> {
        let weights = SplineWeights::solve(knots)?;
        if bases.len() != knots.len() {
            return Err(Error::SizeMismatch(knots.len(), bases.len()));
        }
        let (dim, schedule) = check_bases(&bases)?;
        Ok(SplineGuidedFlow {
            weights,
            bases,
            dim,
            schedule,
        })
    }

    /// Guides a single conditional flow by its own values at the knots.
    pub fn from_conditional(knots: &[f64], flow: FlowRef) -> Result<Self> {
        SplineGuidedFlow::new(knots, vec![flow; knots.len()])
    }

    pub fn spline(&self) -> &SplineWeights {
        &self.weights
    }

    fn knot(&self, i: usize) -> [f64; 1] {
        [self.weights.knots[i]]
    }
}

impl ConditionalFlow for SplineGuidedFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let w = self.weights.weights(scalar_condition(z)?);
        combine(&w, self.dim, |i| self.bases[i].velocity(x, &self.knot(i), s))
    }

    fn divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        let w = match scalar_condition(z) {
            Ok(zv) => self.weights.weights(zv),
            Err(e) => return Some(Err(e)),
        };
        combine_scalar(&w, |i| self.bases[i].divergence(x, &self.knot(i), s))
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let w = self.weights.weights(scalar_condition(z)?);
        combine(&w, self.dim, |i| self.bases[i].epsilon(x, &self.knot(i), s))
    }

    fn epsilon_divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        let w = match scalar_condition(z) {
            Ok(zv) => self.weights.weights(zv),
            Err(e) => return Some(Err(e)),
        };
        combine_scalar(&w, |i| self.bases[i].epsilon_divergence(x, &self.knot(i), s))
    }
}

/// Continuous-support interpolant between flows anchored at `z = 0` and `z = 1`.
#[derive(Clone)]
pub struct KernelGuidedFlow {
    kernel: GuidanceKernel,
    bases: [FlowRef; 2],
    dim: usize,
    schedule: DiffusionSchedule,
}

impl KernelGuidedFlow {
    pub fn new(kernel: GuidanceKernel, flow0: FlowRef, flow1: FlowRef) -> Result<Self> {
        let bases = [flow0, flow1];
        let (dim, schedule) = check_bases(&bases)?;
        Ok(KernelGuidedFlow {
            kernel,
            bases,
            dim,
            schedule,
        })
    }

    pub fn from_conditional(kernel: GuidanceKernel, flow: FlowRef) -> Result<Self> {
        KernelGuidedFlow::new(kernel, Arc::clone(&flow), flow)
    }

    pub fn kernel(&self) -> GuidanceKernel {
        self.kernel
    }

    fn weights(&self, z: &[f64]) -> Result<[f64; 2]> {
        let (w0, w1) = self.kernel.weights(scalar_condition(z)?);
        Ok([w0, w1])
    }
}

const ANCHORS: [[f64; 1]; 2] = [[0.0], [1.0]];

impl ConditionalFlow for KernelGuidedFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        combine(&self.weights(z)?, self.dim, |i| self.bases[i].velocity(x, &ANCHORS[i], s))
    }

    fn divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        match self.weights(z) {
            Ok(w) => combine_scalar(&w, |i| self.bases[i].divergence(x, &ANCHORS[i], s)),
            Err(e) => Some(Err(e)),
        }
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        combine(&self.weights(z)?, self.dim, |i| self.bases[i].epsilon(x, &ANCHORS[i], s))
    }

    fn epsilon_divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        match self.weights(z) {
            Ok(w) => combine_scalar(&w, |i| self.bases[i].epsilon_divergence(x, &ANCHORS[i], s)),
            Err(e) => Some(Err(e)),
        }
    }
}

/// Score of the IMCF flows of `N(0, var)` and `N(0, k^2 var)` combined with
/// weight `c` on the first, in the closed form
/// `-x / (var + var (1-c)(k^2-1) beta + sigma^2)` with
/// `beta = (var + sigma^2) / ((1 + c (k^2-1)) var + sigma^2)`.
pub fn variance_mismatch_score(x: f64, sigma: f64, var: f64, k: f64, c: f64) -> f64 {
    let s2 = sigma * sigma;
    let k2m1 = k * k - 1.0;
    let beta = (var + s2) / ((1.0 + c * k2m1) * var + s2);
    -x / (var + var * (1.0 - c) * k2m1 * beta + s2)
}

/// Variance gain of the probability-flow ODE of the same combined flow when
/// integrated from noise level `sigma_hi` down to `sigma_lo`:
/// `((var + lo^2)/(var + hi^2))^c ((k^2 var + lo^2)/(k^2 var + hi^2))^(1-c)`.
///
/// The combined velocity is linear in `x`, so a centred Gaussian stays
/// Gaussian and its variance is multiplied by this factor.
pub fn variance_mismatch_gain(var: f64, k: f64, c: f64, sigma_hi: f64, sigma_lo: f64) -> f64 {
    let kv = k * k * var;
    let a = (var + sigma_lo * sigma_lo) / (var + sigma_hi * sigma_hi);
    let b = (kv + sigma_lo * sigma_lo) / (kv + sigma_hi * sigma_hi);
    a.powf(c) * b.powf(1.0 - c)
}

/// Terminal variance `v0` of the combined flow that is self-consistent with
/// its own noising path: starting from `N(0, v0 + sigma_hi^2)` at the top
/// and integrating the ODE down to `sigma_lo` returns `N(0, v0)` up to the
/// `sigma_lo^2` floor.
pub fn variance_mismatch_terminal_variance(var: f64, k: f64, c: f64, sigma_hi: f64, sigma_lo: f64) -> f64 {
    let g = variance_mismatch_gain(var, k, c, sigma_hi, sigma_lo);
    g * sigma_hi * sigma_hi / (1.0 - g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{GaussianMixture, MixtureFlow};
    use crate::rng;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn ve() -> DiffusionSchedule {
        DiffusionSchedule::log_linear(5e-4, 5.0).unwrap()
    }

    fn gaussian_flow(mean: f64, var: f64) -> FlowRef {
        Arc::new(MixtureFlow::new(GaussianMixture::gaussian(vec![mean], var).unwrap(), ve()))
    }

    // Dense assembly of the 4(N-1) constraint system for data `y`.
    fn dense_oracle(knots: &[f64], y: &[f64]) -> Vec<[f64; 4]> {
        let n = knots.len();
        let m = 4 * (n - 1);
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DVector::<f64>::zeros(m);
        let mut row = 0;
        for k in 0..n - 1 {
            let h = knots[k + 1] - knots[k];
            a[(row, 4 * k)] = 1.0;
            b[row] = y[k];
            row += 1;
            for p in 0..4 {
                a[(row, 4 * k + p)] = h.powi(p as i32);
            }
            b[row] = y[k + 1];
            row += 1;
            if k + 1 < n - 1 {
                // first and second derivatives match at knot k+1
                a[(row, 4 * k + 1)] = 1.0;
                a[(row, 4 * k + 2)] = 2.0 * h;
                a[(row, 4 * k + 3)] = 3.0 * h * h;
                a[(row, 4 * (k + 1) + 1)] = -1.0;
                row += 1;
                a[(row, 4 * k + 2)] = 2.0;
                a[(row, 4 * k + 3)] = 6.0 * h;
                a[(row, 4 * (k + 1) + 2)] = -2.0;
                row += 1;
            }
        }
        a[(row, 2)] = 1.0;
        row += 1;
        let hl = knots[n - 1] - knots[n - 2];
        a[(row, 4 * (n - 2) + 2)] = 2.0;
        a[(row, 4 * (n - 2) + 3)] = 6.0 * hl;
        row += 1;
        assert_eq!(row, m);
        let sol = a.lu().solve(&b).unwrap();
        (0..n - 1)
            .map(|k| [sol[4 * k], sol[4 * k + 1], sol[4 * k + 2], sol[4 * k + 3]])
            .collect()
    }

    #[test]
    fn two_knots_are_linear() {
        let w = SplineWeights::solve(&[0.0, 1.0]).unwrap();
        for z in [-0.5, 0.0, 0.25, 0.5, 0.9, 1.0, 1.7] {
            let p = w.weights(z);
            assert_eq!(p[0], 1.0 - z);
            assert_eq!(p[1], z);
        }
    }

    #[test]
    fn cardinality_at_knots() {
        let w = SplineWeights::solve(&[0.0, 0.5, 1.0]).unwrap();
        let vals: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&z| w.weights(z)[1]).collect();
        assert_eq!(vals, vec![0.0, 1.0, 0.0]);
        let knots = [-1.0, 0.2, 0.3, 2.0, 2.5];
        let w = SplineWeights::solve(&knots).unwrap();
        for (j, &z) in knots.iter().enumerate() {
            let p = w.weights(z);
            for (i, pi) in p.iter().enumerate() {
                assert_eq!(*pi, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(matches!(SplineWeights::solve(&[0.0, 0.0, 1.0]), Err(Error::DegenerateSupport(..))));
        assert!(matches!(SplineWeights::solve(&[0.0, 1.0, 0.5]), Err(Error::UnsortedKnots(..))));
        assert!(SplineWeights::solve(&[0.0]).is_err());
    }

    #[test]
    fn matches_dense_oracle_on_fixed_knots() {
        let knots = [0.0, 0.3, 0.7, 1.0];
        let w = SplineWeights::solve(&knots).unwrap();
        for i in 0..knots.len() {
            let y: Vec<f64> = (0..knots.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            let oracle = dense_oracle(&knots, &y);
            for (got, want) in w.coefficients(i).iter().zip(&oracle) {
                for p in 0..4 {
                    assert!((got[p] - want[p]).abs() <= 1e-10, "basis {i}: {got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn random_knot_sets_are_c2_and_partition_unity() {
        let mut r = rng::stream(4, 0);
        for n in 4..=8 {
            let mut knots: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..3.0)).collect();
            knots.sort_by(f64::total_cmp);
            let w = SplineWeights::solve(&knots).unwrap();
            for i in 0..n {
                let y: Vec<f64> = (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
                for (got, want) in w.coefficients(i).iter().zip(dense_oracle(&knots, &y)) {
                    for p in 0..4 {
                        assert!((got[p] - want[p]).abs() <= 1e-10 * want[p].abs().max(1.0));
                    }
                }
            }
            for _ in 0..50 {
                let z = r.gen_range(-3.0..4.0);
                assert!((w.weights(z).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
            for k in 1..n - 1 {
                let z = knots[k];
                for i in 0..n {
                    let c = w.coefficients(i);
                    let [a, b, cc, d] = c[k - 1];
                    let h = knots[k] - knots[k - 1];
                    let left = [
                        a + b * h + cc * h * h + d * h * h * h,
                        b + 2.0 * cc * h + 3.0 * d * h * h,
                        2.0 * cc + 6.0 * d * h,
                    ];
                    let right = [w.derivatives(z, 0)[i], w.derivatives(z, 1)[i], w.derivatives(z, 2)[i]];
                    for p in 0..3 {
                        assert!((left[p] - right[p]).abs() <= 1e-10 * left[p].abs().max(1.0));
                    }
                }
            }
            // natural conditions: zero curvature at both end knots
            assert!(w.derivatives(knots[0], 2).iter().all(|v| v.abs() <= 1e-10));
            for i in 0..n {
                let [_, _, c, d] = w.coefficients(i)[n - 2];
                let h = knots[n - 1] - knots[n - 2];
                assert!((2.0 * c + 6.0 * d * h).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn exterior_rays_are_linear_with_matching_slope() {
        let knots = [0.0, 0.4, 1.0];
        let w = SplineWeights::solve(&knots).unwrap();
        let inside = w.derivatives(1.0 - 1e-7, 1);
        let outside = w.derivatives(2.0, 1);
        for (a, b) in inside.iter().zip(&outside) {
            assert!((a - b).abs() < 1e-6);
        }
        let left_slope = w.derivatives(0.0, 1);
        let p = w.weights(-1.0);
        for i in 0..3 {
            let at0 = if i == 0 { 1.0 } else { 0.0 };
            assert!((p[i] - (at0 - left_slope[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn csv_export_has_one_row_per_basis_interval() {
        let w = SplineWeights::solve(&[0.0, 0.5, 1.0]).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }

    #[test]
    fn kernel_values() {
        let k = GuidanceKernel::default();
        assert_eq!(k.weights(0.5), (0.5, 0.5));
        let g1 = 1.5 * 17f64.powf(-1.5);
        let expected = 1.5 / (1.5 + g1);
        assert!((k.weights(0.0).0 - expected).abs() < 1e-15);
        assert!((expected - 0.9859).abs() < 1e-4);
        for u in [0.1, 1.0, 7.0] {
            assert_eq!(k.gamma(u), k.gamma(-u));
            assert!(k.gamma(u) > 0.0);
        }
        // cubic decay: gamma(10)/gamma(20) -> 8
        let ratio = k.gamma(10.0) / k.gamma(20.0);
        assert!((ratio / 8.0 - 1.0).abs() <= 0.2);
        let mut r = rng::stream(1, 0);
        for _ in 0..1000 {
            let (a, b) = k.weights(r.gen_range(-2.0..3.0));
            assert!((a + b - 1.0).abs() < 1e-15);
        }
        assert!(GuidanceKernel::new(0.0, 1.0).is_err());
    }

    #[test]
    fn guided_flow_at_knot_is_base_flow() {
        let f0 = gaussian_flow(-1.0, 0.01);
        let f1 = gaussian_flow(0.5, 0.04);
        let f2 = gaussian_flow(1.0, 0.02);
        let g = SplineGuidedFlow::new(&[0.0, 0.5, 1.0], vec![f0.clone(), f1.clone(), f2]).unwrap();
        for (x, s) in [(0.3, 0.2), (-1.0, 0.7)] {
            assert_eq!(g.velocity(&[x], &[0.0], s).unwrap(), f0.velocity(&[x], &[0.0], s).unwrap());
            assert_eq!(g.velocity(&[x], &[0.5], s).unwrap(), f1.velocity(&[x], &[0.5], s).unwrap());
        }
    }

    #[test]
    fn linear_case_averages() {
        let f0 = gaussian_flow(-1.0, 0.01);
        let f1 = gaussian_flow(1.0, 0.09);
        let g = SplineGuidedFlow::new(&[0.0, 1.0], vec![f0.clone(), f1.clone()]).unwrap();
        let (x, s) = (0.2, 0.4);
        let u = f0.velocity(&[x], &[], s).unwrap()[0];
        let w = f1.velocity(&[x], &[], s).unwrap()[0];
        let v = g.velocity(&[x], &[0.5], s).unwrap()[0];
        assert!((v - 0.5 * (u + w)).abs() <= 1e-15 * v.abs().max(1.0));
    }

    #[test]
    fn constant_bases_are_reproduced() {
        let f = gaussian_flow(0.3, 0.05);
        let knots = [0.0, 0.2, 0.45, 0.8, 1.0];
        let g = SplineGuidedFlow::new(&knots, vec![f.clone(); 5]).unwrap();
        let mut r = rng::stream(9, 0);
        for _ in 0..100 {
            let z = r.gen_range(0.0..1.0);
            let x = r.gen_range(-2.0..2.0);
            let s = r.gen_range(0.05..0.95);
            let u = f.velocity(&[x], &[], s).unwrap()[0];
            let v = g.velocity(&[x], &[z], s).unwrap()[0];
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1e-12));
        }
    }

    #[test]
    fn guidance_is_linear_in_bases() {
        let a = [gaussian_flow(-1.0, 0.01), gaussian_flow(1.0, 0.04)];
        let b = [gaussian_flow(0.2, 0.5), gaussian_flow(-0.3, 0.02)];
        let ga = SplineGuidedFlow::new(&[0.0, 1.0], a.to_vec()).unwrap();
        let gb = SplineGuidedFlow::new(&[0.0, 1.0], b.to_vec()).unwrap();
        let ka = KernelGuidedFlow::new(GuidanceKernel::default(), a[0].clone(), a[1].clone()).unwrap();
        let kb = KernelGuidedFlow::new(GuidanceKernel::default(), b[0].clone(), b[1].clone()).unwrap();
        let (ca, cb) = (2.0, -0.7);
        let kernel = GuidanceKernel::default();
        for (z, x, s) in [(0.3, 0.4, 0.5), (1.4, -0.2, 0.8)] {
            let spline = SplineWeights::solve(&[0.0, 1.0]).unwrap().weights(z);
            let (k0, k1) = kernel.weights(z);
            for (weights, ga, gb) in [
                (spline, &ga as &dyn ConditionalFlow, &gb as &dyn ConditionalFlow),
                (vec![k0, k1], &ka, &kb),
            ] {
                let direct: f64 = (0..2)
                    .map(|i| {
                        weights[i]
                            * (ca * a[i].velocity(&[x], &[], s).unwrap()[0]
                                + cb * b[i].velocity(&[x], &[], s).unwrap()[0])
                    })
                    .sum();
                let via = ca * ga.velocity(&[x], &[z], s).unwrap()[0] + cb * gb.velocity(&[x], &[z], s).unwrap()[0];
                assert!((direct - via).abs() <= 1e-13 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mean_shift_matches_interpolated_mean_flow() {
        let var = 0.01;
        let (mu0, mu1) = (-1.0, 1.0);
        let g = SplineGuidedFlow::new(&[0.0, 1.0], vec![gaussian_flow(mu0, var), gaussian_flow(mu1, var)]).unwrap();
        let mut r = rng::stream(12, 0);
        for _ in 0..200 {
            let z = r.gen_range(0.0..1.0);
            let x = r.gen_range(-3.0..3.0);
            let s = r.gen_range(0.02..0.98);
            let target = gaussian_flow((1.0 - z) * mu0 + z * mu1, var);
            let want = target.velocity(&[x], &[], s).unwrap()[0];
            let got = g.velocity(&[x], &[z], s).unwrap()[0];
            assert!((want - got).abs() <= 1e-10 * want.abs().max(1.0), "{want} {got}");
        }
    }

    #[test]
    fn variance_mismatch_score_closed_form() {
        let var = 0.04;
        let k = 2.0;
        let sch = ve();
        let g = SplineGuidedFlow::new(&[0.0, 1.0], vec![gaussian_flow(0.0, var), gaussian_flow(0.0, k * k * var)]).unwrap();
        let mut r = rng::stream(13, 0);
        for _ in 0..200 {
            let x = r.gen_range(-3.0..3.0);
            let s = r.gen_range(0.02..0.98);
            let sigma = sch.sigma(s).unwrap();
            let score = -g.epsilon(&[x], &[0.5], s).unwrap()[0] / sigma;
            let want = variance_mismatch_score(x, sigma, var, k, 0.5);
            assert!((score - want).abs() <= 1e-8 * want.abs().max(1e-12));
        }
    }

    #[test]
    fn variance_gain_matches_sampler() {
        let var = 0.04;
        let sch = ve();
        let g = SplineGuidedFlow::new(&[0.0, 1.0], vec![gaussian_flow(0.0, var), gaussian_flow(0.0, 4.0 * var)]).unwrap();
        let config = crate::samplers::SamplerConfig::new(crate::samplers::Algorithm::Ddim, 1024, 1);
        let grid = config.grid();
        let (end, traj) = crate::samplers::run_chain(&g, &[0.5], &config, 0, true).unwrap();
        let start = traj.unwrap().states[0][0];
        let (hi, lo) = (sch.sigma(grid[0]).unwrap(), sch.sigma(grid[1024]).unwrap());
        let gain = variance_mismatch_gain(var, 2.0, 0.5, hi, lo);
        // first-order step: ~0.2% at 1024 steps
        assert!((end[0] / start - gain.sqrt()).abs() <= 5e-3 * gain.sqrt(), "{} vs {}", end[0] / start, gain.sqrt());
        // both anchors are their own fixed points
        for (c, v) in [(1.0, var), (0.0, 4.0 * var)] {
            let v0 = variance_mismatch_terminal_variance(var, 2.0, c, 5.0, 5e-4);
            assert!((v0 - v).abs() <= 1e-6, "{v0} vs {v}");
        }
    }

    #[test]
    fn guided_divergence_is_weighted_sum() {
        let f0 = gaussian_flow(-1.0, 0.01);
        let f1 = gaussian_flow(1.0, 0.04);
        let g = KernelGuidedFlow::new(GuidanceKernel::default(), f0.clone(), f1.clone()).unwrap();
        let (x, z, s) = (0.1, 0.3, 0.6);
        let (w0, w1) = GuidanceKernel::default().weights(z);
        let want = w0 * f0.divergence(&[x], &[], s).unwrap().unwrap() + w1 * f1.divergence(&[x], &[], s).unwrap().unwrap();
        let got = g.divergence(&[x], &[z], s).unwrap().unwrap();
        assert!((want - got).abs() <= 1e-14 * want.abs());
    }
}
