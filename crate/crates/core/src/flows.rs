//! Conditional flow fields and closed-form Gaussian-mixture ideal flows.
//!
//! All mixture quantities are computed in log-space; the noise level spans
//! several decades and plain softmax weights underflow otherwise.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::DiffusionSchedule;

/// Evaluation contract for a conditional velocity field `v_s(x, z)`.
///
/// `epsilon` is the noise prediction; under the variance-exploding schedule
/// `velocity = sigma_dot(s) * epsilon`.
pub trait ConditionalFlow: Send + Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &DiffusionSchedule;

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>>;

    /// Trace of the Jacobian of `velocity` in `x`, or `None` when the flow
    /// has no analytic divergence.
    fn divergence(&self, _x: &[f64], _z: &[f64], _s: f64) -> Option<Result<f64>> {
        None
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let rate = epsilon_rate(self.schedule(), s)?;
        let mut v = self.velocity(x, z, s)?;
        v.iter_mut().for_each(|vi| *vi /= rate);
        Ok(v)
    }

    /// Divergence of `epsilon`, when an analytic divergence exists.
    fn epsilon_divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        let div = self.divergence(x, z, s)?;
        Some(div.and_then(|d| Ok(d / epsilon_rate(self.schedule(), s)?)))
    }
}

pub type FlowRef = Arc<dyn ConditionalFlow>;

fn epsilon_rate(schedule: &DiffusionSchedule, s: f64) -> Result<f64> {
    let rate = schedule.sigma_dot(s)?;
    if rate == 0.0 {
        return Err(Error::SingularSchedule {
            coefficient: "epsilon",
            s,
            reason: "sigma_dot(s) = 0",
        });
    }
    Ok(rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    DatasetDraw,
    SamplerOutput,
}

/// Equally weighted empirical distribution over `R^d` for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    pub condition: Vec<f64>,
    pub provenance: Provenance,
}

impl SampleSet {
    /// `data` is row-major with `dim` coordinates per point.
    pub fn new(dim: usize, data: Vec<f64>, condition: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("sample dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("sample set must be non-empty".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        Ok(SampleSet {
            dim,
            data,
            condition,
            provenance,
        })
    }

    pub fn from_points(points: &[Vec<f64>], condition: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        SampleSet::new(dim, data, condition, provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Splits into the first `n` points and the rest.
    pub fn split_at(&self, n: usize) -> Result<(SampleSet, SampleSet)> {
        let (a, b) = self.data.split_at(n * self.dim);
        Ok((
            SampleSet::new(self.dim, a.to_vec(), self.condition.clone(), self.provenance)?,
            SampleSet::new(self.dim, b.to_vec(), self.condition.clone(), self.provenance)?,
        ))
    }

    /// Per-coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Per-coordinate unbiased variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for p in self.iter() {
            for j in 0..self.dim {
                v[j] += (p[j] - m[j]).powi(2);
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|a| *a /= denom);
        v
    }
}

/// Isotropic Gaussian component `weight * N(mean, variance * I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpec {
    components: Vec<MixtureComponent>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;
    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(spec.components)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(g: GaussianMixture) -> Self {
        MixtureSpec {
            components: g.components,
        }
    }
}

// Per-component quantities of the noised mixture at one (x, s).
struct Responsibilities {
    resp: Vec<f64>,
    // -(x - alpha mu_j) / tau_j^2, flattened
    grads: Vec<f64>,
    inv_tau2: Vec<f64>,
    log_norm: f64,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional mean".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has dimension {} (expected {dim})",
                    c.mean.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {i} has weight {}", c.weight)));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has variance {}",
                    c.variance
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(GaussianMixture { components })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    /// Equal-weight mixture of isotropic components sharing one variance.
    pub fn equal_weights(means: &[Vec<f64>], variance: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        GaussianMixture::new(
            means
                .iter()
                .map(|m| MixtureComponent {
                    weight: w,
                    mean: m.clone(),
                    variance,
                })
                .collect(),
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            m.iter_mut().zip(&c.mean).for_each(|(a, b)| *a += c.weight * b);
        }
        m
    }

    /// Per-coordinate variance of the clean mixture.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim()];
        for c in &self.components {
            for j in 0..v.len() {
                v[j] += c.weight * (c.variance + (c.mean[j] - m[j]).powi(2));
            }
        }
        v
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        let sd = c.variance.sqrt();
        c.mean
            .iter()
            .map(|m| m + sd * crate::rng::normal(rng))
            .collect()
    }

    pub fn sample_set<R: Rng + ?Sized>(&self, n: usize, condition: Vec<f64>, rng: &mut R) -> Result<SampleSet> {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            data.extend(self.sample(rng));
        }
        SampleSet::new(self.dim(), data, condition, Provenance::DatasetDraw)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn responsibilities(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<Responsibilities> {
        self.check_dim(x)?;
        let alpha = schedule.alpha(s)?;
        let sigma = schedule.sigma(s)?;
        let d = self.dim();
        let k = self.components.len();
        let mut logits = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k * d);
        let mut inv_tau2 = Vec::with_capacity(k);
        for c in &self.components {
            let tau2 = alpha * alpha * c.variance + sigma * sigma;
            let inv = 1.0 / tau2;
            let mut dist2 = 0.0;
            for (xj, mj) in x.iter().zip(&c.mean) {
                let diff = xj - alpha * mj;
                dist2 += diff * diff;
                grads.push(-diff * inv);
            }
            logits.push(
                c.weight.ln()
                    - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * tau2).ln()
                    - 0.5 * dist2 * inv,
            );
            inv_tau2.push(inv);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut resp: Vec<f64> = logits
            .iter()
            .map(|l| {
                let e = (l - max).exp();
                total += e;
                e
            })
            .collect();
        resp.iter_mut().for_each(|r| *r /= total);
        Ok(Responsibilities {
            resp,
            grads,
            inv_tau2,
            log_norm: max + total.ln(),
        })
    }

    /// `log p_s(x)` for the mixture noised by the schedule.
    pub fn log_density(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<f64> {
        Ok(self.responsibilities(x, s, schedule)?.log_norm)
    }

    /// `grad_x log p_s(x)`.
    pub fn score(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        Ok(self.score_and_trace(x, s, schedule)?.0)
    }

    /// Score and the trace of its Jacobian.
    ///
    /// The trace is `-d * sum_j r_j / tau_j^2 + sum_j r_j |g_j - g_bar|^2`,
    /// the per-component terms plus the covariance of the component scores.
    pub fn score_and_trace(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<(Vec<f64>, f64)> {
        let r = self.responsibilities(x, s, schedule)?;
        let d = self.dim();
        let mut score = vec![0.0; d];
        for (j, rj) in r.resp.iter().enumerate() {
            for i in 0..d {
                score[i] += rj * r.grads[j * d + i];
            }
        }
        let mut trace = 0.0;
        for (j, rj) in r.resp.iter().enumerate() {
            let mut spread = 0.0;
            for i in 0..d {
                spread += (r.grads[j * d + i] - score[i]).powi(2);
            }
            trace += rj * (spread - d as f64 * r.inv_tau2[j]);
        }
        Ok((score, trace))
    }

    /// Posterior mean `E[X0 | X_s = x]`.
    pub fn posterior_mean(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let r = self.responsibilities(x, s, schedule)?;
        let alpha = schedule.alpha(s)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (j, c) in self.components.iter().enumerate() {
            let gain = alpha * c.variance * r.inv_tau2[j];
            for i in 0..d {
                let diff = x[i] - alpha * c.mean[i];
                out[i] += r.resp[j] * (c.mean[i] + gain * diff);
            }
        }
        Ok(out)
    }
}

/// `grad_x log p_s(x)` of a Gaussian mixture under the schedule.
pub fn mixture_score(x: &[f64], s: f64, gmm: &GaussianMixture, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    gmm.score(x, s, schedule)
}

/// Ideal flow `gamma1 * score + gamma2 * x` of a Gaussian mixture.
pub fn imcf_flow(x: &[f64], s: f64, gmm: &GaussianMixture, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    let c = schedule.coefficients(s)?;
    let score = gmm.score(x, s, schedule)?;
    Ok(score
        .iter()
        .zip(x)
        .map(|(g, xi)| c.gamma1 * g + c.gamma2 * xi)
        .collect())
}

/// Divergence of [`imcf_flow`] in `x`.
pub fn mixture_divergence(x: &[f64], s: f64, gmm: &GaussianMixture, schedule: &DiffusionSchedule) -> Result<f64> {
    let c = schedule.coefficients(s)?;
    let (_, trace) = gmm.score_and_trace(x, s, schedule)?;
    Ok(c.gamma1 * trace + c.gamma2 * gmm.dim() as f64)
}

/// Where a [`MixtureFlow`] gets its mixture for a given condition.
#[derive(Clone)]
pub enum MixtureSource {
    Fixed(GaussianMixture),
    Conditional {
        dim: usize,
        family: Arc<dyn Fn(&[f64]) -> Result<GaussianMixture> + Send + Sync>,
    },
}

impl fmt::Debug for MixtureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixtureSource::Fixed(g) => f.debug_tuple("Fixed").field(g).finish(),
            MixtureSource::Conditional { dim, .. } => {
                f.debug_struct("Conditional").field("dim", dim).finish_non_exhaustive()
            }
        }
    }
}

/// Ideal model-consistent flow of a Gaussian mixture (optionally indexed by `z`).
#[derive(Clone, Debug)]
pub struct MixtureFlow {
    source: MixtureSource,
    schedule: DiffusionSchedule,
}

impl MixtureFlow {
    pub fn new(gmm: GaussianMixture, schedule: DiffusionSchedule) -> Self {
        MixtureFlow {
            source: MixtureSource::Fixed(gmm),
            schedule,
        }
    }

    pub fn conditional<F>(dim: usize, family: F, schedule: DiffusionSchedule) -> Self
    where
        F: Fn(&[f64]) -> Result<GaussianMixture> + Send + Sync + 'static,
    {
        MixtureFlow {
            source: MixtureSource::Conditional {
                dim,
                family: Arc::new(family),
            },
            schedule,
        }
    }

    /// Mixture that this flow transports for condition `z`.
    pub fn mixture_for(&self, z: &[f64]) -> Result<GaussianMixture> {
        match &self.source {
            MixtureSource::Fixed(g) => Ok(g.clone()),
            MixtureSource::Conditional { family, .. } => family(z),
        }
    }

    fn with_mixture<T>(&self, z: &[f64], f: impl FnOnce(&GaussianMixture) -> Result<T>) -> Result<T> {
        match &self.source {
            MixtureSource::Fixed(g) => f(g),
            MixtureSource::Conditional { family, .. } => f(&family(z)?),
        }
    }

    /// Velocity through the posterior-mean form `c1 E[X0 | x] + c2 x`.
    pub fn velocity_denoising_form(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let c = self.schedule.coefficients(s)?;
        self.with_mixture(z, |g| {
            let m = g.posterior_mean(x, s, &self.schedule)?;
            Ok(m.iter().zip(x).map(|(mi, xi)| c.c1 * mi + c.c2 * xi).collect())
        })
    }
}

impl ConditionalFlow for MixtureFlow {
    fn dim(&self) -> usize {
        match &self.source {
            MixtureSource::Fixed(g) => g.dim(),
            MixtureSource::Conditional { dim, .. } => *dim,
        }
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        if self.schedule.is_ve() {
            let rate = self.schedule.sigma_dot(s)?;
            let mut eps = self.epsilon(x, z, s)?;
            eps.iter_mut().for_each(|e| *e *= rate);
            return Ok(eps);
        }
        self.with_mixture(z, |g| imcf_flow(x, s, g, &self.schedule))
    }

    fn divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        Some(self.with_mixture(z, |g| mixture_divergence(x, s, g, &self.schedule)))
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let sigma = self.schedule.sigma(s)?;
        self.with_mixture(z, |g| {
            let mut score = g.score(x, s, &self.schedule)?;
            score.iter_mut().for_each(|v| *v *= -sigma);
            Ok(score)
        })
    }

    fn epsilon_divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        Some(self.schedule.sigma(s).and_then(|sigma| {
            self.with_mixture(z, |g| Ok(-sigma * g.score_and_trace(x, s, &self.schedule)?.1))
        }))
    }
}

/// Noise prediction of the ideal flow of an empirical distribution,
/// `sum_i softmax_i(-|x - a x_i|^2 / 2 sigma^2) (x - a x_i) / sigma`,
/// together with its divergence in `x`.
pub fn empirical_epsilon_and_divergence(
    x: &[f64],
    s: f64,
    samples: &SampleSet,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, f64)> {
    empirical_kernel(x, s, samples, schedule).map(|k| (k.epsilon, k.divergence))
}

/// Everything the empirical oracle computes at one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalKernel {
    pub epsilon: Vec<f64>,
    pub divergence: f64,
    /// Kish effective sample size `1 / sum_i w_i^2` of the softmax weights:
    /// how many samples actually inform the estimate at this noise level.
    pub effective_samples: f64,
}

pub fn empirical_kernel(x: &[f64], s: f64, samples: &SampleSet, schedule: &DiffusionSchedule) -> Result<EmpiricalKernel> {
    let d = samples.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let sigma = schedule.sigma(s)?;
    let alpha = schedule.alpha(s)?;
    if sigma == 0.0 {
        return Err(Error::SingularSchedule {
            coefficient: "epsilon",
            s,
            reason: "sigma(s) = 0",
        });
    }
    let inv2 = 0.5 / (sigma * sigma);
    let mut logits = Vec::with_capacity(samples.len());
    let mut max = f64::NEG_INFINITY;
    for p in samples.iter() {
        let mut dist2 = 0.0;
        for (xj, pj) in x.iter().zip(p) {
            let diff = xj - alpha * pj;
            dist2 += diff * diff;
        }
        let l = -dist2 * inv2;
        max = max.max(l);
        logits.push(l);
    }
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let mut mean_disp = vec![0.0; d];
    for (w, p) in logits.iter_mut().zip(samples.iter()) {
        *w /= total;
        for j in 0..d {
            mean_disp[j] += *w * (x[j] - alpha * p[j]);
        }
    }
    let effective_samples = 1.0 / logits.iter().map(|w| w * w).sum::<f64>();
    let mut spread = 0.0;
    for (w, p) in logits.iter().zip(samples.iter()) {
        if *w == 0.0 {
            continue;
        }
        let mut dev2 = 0.0;
        for j in 0..d {
            dev2 += (x[j] - alpha * p[j] - mean_disp[j]).powi(2);
        }
        spread += w * dev2;
    }
    let eps = mean_disp.iter().map(|m| m / sigma).collect();
    let div = (d as f64 - spread / (sigma * sigma)) / sigma;
    Ok(EmpiricalKernel {
        epsilon: eps,
        divergence: div,
        effective_samples,
    })
}

pub fn empirical_epsilon_imcf(x: &[f64], s: f64, samples: &SampleSet, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    Ok(empirical_epsilon_and_divergence(x, s, samples, schedule)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ve() -> DiffusionSchedule {
        DiffusionSchedule::log_linear(5e-4, 5.0).unwrap()
    }

    // time at which sigma(s) equals `target` under `ve()`
    fn time_for_sigma(target: f64) -> f64 {
        (target / 5e-4).ln() / (1e4f64).ln()
    }

    fn three_component() -> GaussianMixture {
        GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.2,
                mean: vec![-1.0, 0.5],
                variance: 0.04,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.3, -0.2],
                variance: 0.1,
            },
            MixtureComponent {
                weight: 0.3,
                mean: vec![1.2, 1.0],
                variance: 0.02,
            },
        ])
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::equal_weights(&[vec![0.0], vec![1.0, 2.0]], 1.0).is_err());
        assert!(GaussianMixture::gaussian(vec![0.0], 0.0).is_err());
        let bad = vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![0.0],
                variance: 1.0,
            },
            MixtureComponent {
                weight: 0.4,
                mean: vec![1.0],
                variance: 1.0,
            },
        ];
        assert!(matches!(GaussianMixture::new(bad), Err(Error::InvalidMixture(_))));
        assert!(SampleSet::new(2, vec![], vec![], Provenance::DatasetDraw).is_err());
        assert!(SampleSet::new(2, vec![1.0, 2.0, 3.0], vec![], Provenance::DatasetDraw).is_err());
    }

    #[test]
    fn mixture_serde_round_trip_and_validation() {
        let g = three_component();
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<GaussianMixture>(&text).unwrap(), g);
        let bad = r#"{"components":[{"weight":0.5,"mean":[0.0],"variance":1.0}]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }

    #[test]
    fn single_component_score_value() {
        let g = GaussianMixture::gaussian(vec![-1.0], 0.01).unwrap();
        let s = time_for_sigma(0.3);
        let score = mixture_score(&[0.0], s, &g, &ve()).unwrap();
        assert!((score[0] + 10.0).abs() < 1e-9, "{score:?}");
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_midpoint() {
        let g = GaussianMixture::equal_weights(&[vec![0.0], vec![1.0]], 0.05).unwrap();
        for s in [0.1, 0.5, 0.9] {
            assert!(mixture_score(&[0.5], s, &g, &ve()).unwrap()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let g = three_component();
        let sch = ve();
        let mut r = rng::stream(11, 0);
        for _ in 0..50 {
            let x = rng::normal_vec(&mut r, 2);
            let s = 0.3 + 0.6 * rand::Rng::gen::<f64>(&mut r);
            let score = g.score(&x, s, &sch).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (g.log_density(&xp, s, &sch).unwrap() - g.log_density(&xm, s, &sch).unwrap()) / (2.0 * h);
                assert!((fd - score[j]).abs() <= 1e-5 * score[j].abs().max(1e-3), "fd={fd} score={}", score[j]);
            }
        }
    }

    #[test]
    fn zero_score_point_gives_gamma2_x() {
        let g = GaussianMixture::equal_weights(&[vec![0.0], vec![1.0]], 0.05).unwrap();
        let v = imcf_flow(&[0.5], 0.4, &g, &ve()).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn single_gaussian_flow_closed_form() {
        let sch = ve();
        let var = 0.01;
        let g = GaussianMixture::gaussian(vec![0.0], var).unwrap();
        let flow = MixtureFlow::new(g, sch.clone());
        for (x, s) in [(0.7, 0.2), (-2.0, 0.6), (3.0, 0.95)] {
            let sigma = sch.sigma(s).unwrap();
            let sdot = sch.sigma_dot(s).unwrap();
            let v = flow.velocity(&[x], &[], s).unwrap()[0];
            let closed = sdot * sigma * x / (var + sigma * sigma);
            assert!((v - closed).abs() <= 1e-12 * closed.abs());
            // denoising form with E[X0 | x] = x var / (var + sigma^2)
            let post = x * var / (var + sigma * sigma);
            let c = sch.coefficients(s).unwrap();
            let denoise = c.c1 * post + c.c2 * x;
            assert!((v - denoise).abs() <= 1e-10 * closed.abs());
            let div = flow.divergence(&[x], &[], s).unwrap().unwrap();
            let closed_div = sdot * sigma / (var + sigma * sigma);
            assert!((div - closed_div).abs() <= 1e-12 * closed_div);
        }
    }

    #[test]
    fn isotropic_divergence_scales_with_dimension() {
        let sch = ve();
        let var = 0.3;
        let g = GaussianMixture::gaussian(vec![0.1, -0.4, 2.0, 0.0], var).unwrap();
        let s = 0.55;
        let sigma = sch.sigma(s).unwrap();
        let expected = 4.0 * sch.sigma_dot(s).unwrap() * sigma / (var + sigma * sigma);
        let got = mixture_divergence(&[0.3, 0.3, 0.3, 0.3], s, &g, &sch).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn divergence_matches_finite_difference_trace() {
        let sch = ve();
        let pair = GaussianMixture::equal_weights(&[vec![-1.0], vec![1.0]], 0.04).unwrap();
        let g3 = three_component();
        let cases: Vec<(GaussianMixture, Vec<f64>)> = vec![(pair, vec![0.0]), (g3, vec![0.1, 0.4])];
        for (g, x) in cases {
            let flow = MixtureFlow::new(g, sch.clone());
            for s in [0.3, 0.6, 0.8] {
                let div = flow.divergence(&x, &[], s).unwrap().unwrap();
                let mut fd = 0.0;
                for j in 0..x.len() {
                    let h = 1e-5 * (1.0 + x[j].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    fd += (flow.velocity(&xp, &[], s).unwrap()[j] - flow.velocity(&xm, &[], s).unwrap()[j]) / (2.0 * h);
                }
                assert!((div - fd).abs() <= 1e-5 * div.abs(), "s={s} div={div} fd={fd}");
            }
        }
    }

    #[test]
    fn epsilon_round_trip_is_exact() {
        let sch = ve();
        let flow = MixtureFlow::new(three_component(), sch.clone());
        let mut r = rng::stream(3, 0);
        for _ in 0..100 {
            let x = rng::normal_vec(&mut r, 2);
            let s = rand::Rng::gen_range(&mut r, 0.01..0.99);
            let v = flow.velocity(&x, &[], s).unwrap();
            let e = flow.epsilon(&x, &[], s).unwrap();
            let rate = sch.sigma_dot(s).unwrap();
            for (vi, ei) in v.iter().zip(&e) {
                assert_eq!(*vi, rate * ei);
            }
        }
    }

    #[test]
    fn score_and_denoising_forms_agree() {
        let sch = ve();
        let flow = MixtureFlow::new(three_component(), sch.clone());
        let mut r = rng::stream(5, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x: Vec<f64> = rng::normal_vec(&mut r, 2).iter().map(|v| 2.0 * v).collect();
            let s = rand::Rng::gen_range(&mut r, 0.02..0.98);
            let a = flow.velocity(&x, &[], s).unwrap();
            let b = flow.velocity_denoising_form(&x, &[], s).unwrap();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(diff / norm.max(1e-300));
        }
        assert!(worst <= 1e-10, "worst relative disagreement {worst}");
    }

    #[test]
    fn general_schedule_forms_agree() {
        let sch = DiffusionSchedule::general(Arc::new(crate::schedules::TrigonometricInterpolant)).unwrap();
        let flow = MixtureFlow::new(three_component(), sch);
        for s in [0.1, 0.5, 0.9] {
            let x = [0.4, -0.3];
            let a = flow.velocity(&x, &[], s).unwrap();
            let b = flow.velocity_denoising_form(&x, &[], s).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-10 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn empirical_epsilon_trivial_cases() {
        let sch = ve();
        let one = SampleSet::from_points(&[vec![0.3, -0.1]], vec![], Provenance::DatasetDraw).unwrap();
        let (e, _) = empirical_epsilon_and_divergence(&[0.3, -0.1], 0.5, &one, &sch).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        let two = SampleSet::from_points(&[vec![0.0], vec![1.0]], vec![], Provenance::DatasetDraw).unwrap();
        let e = empirical_epsilon_imcf(&[0.5], 0.5, &two, &sch).unwrap();
        assert_eq!(e[0], 0.0);
    }

    #[test]
    fn empirical_divergence_matches_finite_difference() {
        let sch = ve();
        let mut r = rng::stream(21, 0);
        let set = three_component().sample_set(300, vec![], &mut r).unwrap();
        for s in [0.35, 0.6] {
            let x = [0.2, 0.1];
            let (_, div) = empirical_epsilon_and_divergence(&x, s, &set, &sch).unwrap();
            let mut fd = 0.0;
            for j in 0..2 {
                let h = 1e-5;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                fd += (empirical_epsilon_imcf(&xp, s, &set, &sch).unwrap()[j]
                    - empirical_epsilon_imcf(&xm, s, &set, &sch).unwrap()[j])
                    / (2.0 * h);
            }
            assert!((div - fd).abs() <= 1e-5 * div.abs().max(1.0), "div={div} fd={fd}");
        }
    }

    #[test]
    fn empirical_epsilon_is_stable_at_small_sigma() {
        let sch = ve();
        let set = SampleSet::from_points(&[vec![-500.0], vec![500.0], vec![0.0]], vec![], Provenance::DatasetDraw).unwrap();
        for x in [-700.0, 0.1, 250.0, 1000.0] {
            let (e, div) = empirical_epsilon_and_divergence(&[x], 0.0, &set, &sch).unwrap();
            assert!(e[0].is_finite() && div.is_finite());
        }
    }

    #[test]
    fn empirical_epsilon_converges_to_analytic() {
        let sch = ve();
        let (mu, var) = (0.5, 0.01);
        let g = GaussianMixture::gaussian(vec![mu], var).unwrap();
        let mut r = rng::stream(8, 0);
        let set = g.sample_set(2000, vec![], &mut r).unwrap();
        // sigma(s) >= sigma_bar
        for s in [time_for_sigma(0.1), time_for_sigma(0.3), 0.8] {
            let sigma = sch.sigma(s).unwrap();
            for x in [0.2, 0.5 + 2.0 * sigma, 0.5 - sigma] {
                let analytic = sigma * (x - mu) / (var + sigma * sigma);
                let e = empirical_epsilon_imcf(&[x], s, &set, &sch).unwrap()[0];
                assert!((e - analytic).abs() <= 0.1 * analytic.abs(), "s={s} x={x} e={e} analytic={analytic}");
            }
        }
    }

    #[test]
    fn empirical_epsilon_error_shrinks_like_inverse_sqrt_n() {
        let sch = ve();
        let (mu, var) = (0.0, 0.04);
        let g = GaussianMixture::gaussian(vec![mu], var).unwrap();
        let s = time_for_sigma(0.2);
        let sigma = sch.sigma(s).unwrap();
        let probes: Vec<f64> = (0..21).map(|i| -0.4 + 0.04 * i as f64).collect();
        let rms = |n: usize| -> f64 {
            let reps = 40;
            let mut acc = 0.0;
            for rep in 0..reps {
                let mut r = rng::stream(100 + n as u64, rep as u64);
                let set = g.sample_set(n, vec![], &mut r).unwrap();
                for &x in &probes {
                    let analytic = sigma * (x - mu) / (var + sigma * sigma);
                    acc += (empirical_epsilon_imcf(&[x], s, &set, &sch).unwrap()[0] - analytic).powi(2);
                }
            }
            (acc / (reps * probes.len()) as f64).sqrt()
        };
        let ns = [100usize, 400, 1600];
        let errs: Vec<f64> = ns.iter().map(|&n| rms(n)).collect();
        let slope = (errs[2].ln() - errs[0].ln()) / ((ns[2] as f64).ln() - (ns[0] as f64).ln());
        assert!((slope + 0.5).abs() <= 0.15, "slope {slope} errs {errs:?}");
    }

    #[test]
    fn kernel_effective_sample_size() {
        let sch = ve();
        let one = SampleSet::new(1, vec![0.3], vec![], Provenance::DatasetDraw).unwrap();
        assert_eq!(empirical_kernel(&[2.0], 0.5, &one, &sch).unwrap().effective_samples, 1.0);
        let pair = SampleSet::new(1, vec![0.0, 1.0], vec![], Provenance::DatasetDraw).unwrap();
        let k = empirical_kernel(&[0.5], 0.2, &pair, &sch).unwrap();
        assert!((k.effective_samples - 2.0).abs() < 1e-12);
        // at large noise every sample counts; at small noise only the nearest
        let mut r = rng::stream(3, 0);
        let many = GaussianMixture::gaussian(vec![0.0], 0.01).unwrap().sample_set(1000, vec![], &mut r).unwrap();
        let wide = empirical_kernel(&[0.0], 1.0, &many, &sch).unwrap().effective_samples;
        let narrow = empirical_kernel(&[0.0], 0.0, &many, &sch).unwrap().effective_samples;
        assert!(wide > 990.0 && narrow < 20.0, "{wide} {narrow}");
    }
}
