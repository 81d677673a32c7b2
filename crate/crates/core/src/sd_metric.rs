//! Schedule Deviation: a Monte-Carlo estimate of how fast a flow leaves the
//! noising path of its own terminal distribution.
//!
//! At a probe `x_s = x0 + sigma(s) xi` the integrand is
//! `|sigma div(eps - eps_ref) + (eps_ref - eps) . eps_ref|`, scaled by
//! `c2(s) = sigma_dot / sigma` unless the unit-`c2` reporting convention is on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{empirical_epsilon_and_divergence, empirical_kernel, ConditionalFlow, GaussianMixture, SampleSet};
use crate::par::Execution;
use crate::rng;
use crate::samplers::{reverse_sample, SamplerConfig};
use crate::schedules::{default_margin, interior_grid, DiffusionSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceStrategy {
    Analytic,
    RandomBasis,
    FiniteDifference,
}

impl DivergenceStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceStrategy::Analytic => "analytic",
            DivergenceStrategy::RandomBasis => "random",
            DivergenceStrategy::FiniteDifference => "fd",
        }
    }
}

impl std::str::FromStr for DivergenceStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(DivergenceStrategy::Analytic),
            "random" | "random-basis" => Ok(DivergenceStrategy::RandomBasis),
            "fd" | "finite-difference" => Ok(DivergenceStrategy::FiniteDifference),
            other => Err(Error::InvalidArgument(format!(
                "unknown divergence strategy `{other}` (expected analytic, random or fd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdConfig {
    pub n_outer: usize,
    pub n_imcf: usize,
    pub divergence_strategy: DivergenceStrategy,
    pub fd_step: f64,
    pub s_grid: Vec<f64>,
    pub report_c2_one: bool,
    pub seed: u64,
    /// When set, times at which the empirical oracle's median kernel
    /// effective sample size falls below this fraction of the oracle size are
    /// reported but left out of the total. At small noise the kernel
    /// collapses onto a few samples and the absolute value in the integrand
    /// turns oracle noise into positive bias.
    #[serde(default)]
    pub min_oracle_ess_fraction: Option<f64>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SdConfig {
    fn default() -> Self {
        SdConfig {
            n_outer: 256,
            n_imcf: 2000,
            divergence_strategy: DivergenceStrategy::Analytic,
            fd_step: 1e-4,
            s_grid: default_s_grid(16),
            report_c2_one: true,
            seed: 0,
            min_oracle_ess_fraction: None,
            execution: Execution::default(),
        }
    }
}

/// `points` uniform times on `[margin, 1 - margin]` with the 64-step margin.
pub fn default_s_grid(points: usize) -> Vec<f64> {
    interior_grid(points, default_margin(64))
}

impl SdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_imcf == 0 {
            return Err(Error::InvalidArgument("n_outer and n_imcf must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument(format!("fd_step must be positive (got {})", self.fd_step)));
        }
        if self.s_grid.is_empty() {
            return Err(Error::InvalidArgument("s_grid is empty".into()));
        }
        for w in self.s_grid.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidArgument("s_grid must be strictly increasing".into()));
            }
        }
        if self.s_grid.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
            return Err(Error::InvalidArgument("s_grid must lie inside (0, 1)".into()));
        }
        if self.min_oracle_ess_fraction.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidArgument("min_oracle_ess_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Reference (ideal) flow against which deviation is measured.
#[derive(Clone, Debug)]
pub enum ImcfSource {
    /// Closed-form noise prediction of a Gaussian mixture.
    Analytic(GaussianMixture),
    /// Empirical oracle over `oracle`; probes draw `x0` from `probes`
    /// (held-out points) or, when absent, from `oracle` itself.
    Empirical { oracle: SampleSet, probes: Option<SampleSet> },
}

impl ImcfSource {
    /// Draws `n_imcf + n_outer` terminal samples from the sampler; the first
    /// `n_imcf` feed the oracle and the rest are held out as probe origins.
    pub fn from_sampler(
        flow: &dyn ConditionalFlow,
        z: &[f64],
        sampler: &SamplerConfig,
        n_imcf: usize,
        n_outer: usize,
    ) -> Result<Self> {
        let all = reverse_sample(flow, z, sampler, n_imcf + n_outer)?;
        let (oracle, probes) = all.split_at(n_imcf)?;
        Ok(ImcfSource::Empirical {
            oracle,
            probes: Some(probes),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ImcfSource::Analytic(g) => g.dim(),
            ImcfSource::Empirical { oracle, .. } => oracle.dim(),
        }
    }

    pub fn oracle_size(&self) -> Option<usize> {
        match self {
            ImcfSource::Analytic(_) => None,
            ImcfSource::Empirical { oracle, .. } => Some(oracle.len()),
        }
    }

    /// A single-sample empirical oracle is permitted but unreliable.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, ImcfSource::Empirical { oracle, .. } if oracle.len() == 1)
    }

    /// Reference noise prediction and its divergence.
    pub fn epsilon_and_divergence(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<(Vec<f64>, f64)> {
        match self {
            ImcfSource::Analytic(g) => {
                let sigma = schedule.sigma(s)?;
                let (mut score, trace) = g.score_and_trace(x, s, schedule)?;
                score.iter_mut().for_each(|v| *v *= -sigma);
                Ok((score, -sigma * trace))
            }
            ImcfSource::Empirical { oracle, .. } => empirical_epsilon_and_divergence(x, s, oracle, schedule),
        }
    }

    /// Effective number of oracle samples behind the estimate at `x`
    /// (`None` for the analytic oracle).
    pub fn effective_samples(&self, x: &[f64], s: f64, schedule: &DiffusionSchedule) -> Result<Option<f64>> {
        match self {
            ImcfSource::Analytic(_) => Ok(None),
            ImcfSource::Empirical { oracle, .. } => {
                Ok(Some(empirical_kernel(x, s, oracle, schedule)?.effective_samples))
            }
        }
    }

    fn draw_origin<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Vec<f64> {
        match self {
            ImcfSource::Analytic(g) => g.sample(rng),
            ImcfSource::Empirical { oracle, probes } => match probes {
                Some(p) => p.point(index % p.len()).to_vec(),
                None => oracle.point(rng.gen_range(0..oracle.len())).to_vec(),
            },
        }
    }
}

/// Divergence of the flow's noise prediction by the chosen strategy.
pub fn flow_epsilon_divergence<R: Rng + ?Sized>(
    flow: &dyn ConditionalFlow,
    x: &[f64],
    z: &[f64],
    s: f64,
    strategy: DivergenceStrategy,
    fd_step: f64,
    rng: &mut R,
) -> Result<f64> {
    let partial = |j: usize| -> Result<f64> {
        let h = fd_step * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        Ok((flow.epsilon(&xp, z, s)?[j] - flow.epsilon(&xm, z, s)?[j]) / (2.0 * h))
    };
    match strategy {
        DivergenceStrategy::Analytic => flow
            .epsilon_divergence(x, z, s)
            .unwrap_or(Err(Error::Strategy { strategy: "analytic" })),
        DivergenceStrategy::FiniteDifference => (0..x.len()).map(partial).sum(),
        DivergenceStrategy::RandomBasis => {
            let j = rng.gen_range(0..x.len());
            Ok(x.len() as f64 * partial(j)?)
        }
    }
}

/// `div(eps_flow - eps_ref)` at `x`, with the reference divergence supplied.
pub fn divergence_of_difference<R: Rng + ?Sized>(
    flow: &dyn ConditionalFlow,
    reference_divergence: f64,
    x: &[f64],
    z: &[f64],
    s: f64,
    strategy: DivergenceStrategy,
    fd_step: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(flow_epsilon_divergence(flow, x, z, s, strategy, fd_step, rng)? - reference_divergence)
}

/// The unscaled integrand `|sigma div(eps - eps_ref) + (eps_ref - eps) . eps_ref|`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_integrand<R: Rng + ?Sized>(
    flow: &dyn ConditionalFlow,
    source: &ImcfSource,
    x: &[f64],
    z: &[f64],
    s: f64,
    strategy: DivergenceStrategy,
    fd_step: f64,
    rng: &mut R,
) -> Result<f64> {
    let schedule = flow.schedule();
    let sigma = schedule.sigma(s)?;
    let eps = flow.epsilon(x, z, s)?;
    let (eps_ref, div_ref) = source.epsilon_and_divergence(x, s, schedule)?;
    let div = divergence_of_difference(flow, div_ref, x, z, s, strategy, fd_step, rng)?;
    let transport: f64 = eps_ref.iter().zip(&eps).map(|(r, e)| (r - e) * r).sum();
    let value = (sigma * div + transport).abs();
    if !value.is_finite() {
        return Err(Error::NonFinite { s, x: x.to_vec() });
    }
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdPoint {
    pub s: f64,
    pub sd: f64,
    pub stderr: f64,
    /// Largest single-probe integrand (after scaling).
    pub max_integrand: f64,
    /// Median effective sample size of the empirical oracle over the probes.
    pub oracle_ess: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdReport {
    pub z: Vec<f64>,
    pub per_s: Vec<SdPoint>,
    pub total_sd: f64,
    pub total_stderr: f64,
    pub strategy: DivergenceStrategy,
    pub c2_one: bool,
    /// Set when the empirical oracle holds a single sample.
    pub unreliable: bool,
    /// Times left out of the total because the oracle was unresolved there.
    pub excluded_s: Vec<f64>,
}

/// Mean and standard error of the deviation integrand at one time.
pub fn schedule_deviation_at(
    flow: &dyn ConditionalFlow,
    source: &ImcfSource,
    z: &[f64],
    s: f64,
    config: &SdConfig,
) -> Result<SdPoint> {
    config.validate()?;
    if source.dim() != flow.dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.dim(),
            got: source.dim(),
        });
    }
    let schedule = flow.schedule();
    let sigma = schedule.sigma(s)?;
    let scale = if config.report_c2_one {
        1.0
    } else {
        schedule.coefficients(s)?.c2
    };
    // one stream per (time, probe); probe origins do not depend on s
    let time_seed = rng::derive_seed(config.seed, s.to_bits());
    let values = config.execution.try_map(config.n_outer, |i| {
        let mut origin_rng = rng::stream(config.seed, i as u64);
        let x0 = source.draw_origin(i, &mut origin_rng);
        let mut r = rng::stream(time_seed, i as u64);
        let x: Vec<f64> = x0.iter().map(|v| v + sigma * rng::normal(&mut r)).collect();
        let value = deviation_integrand(flow, source, &x, z, s, config.divergence_strategy, config.fd_step, &mut r)?;
        Ok::<_, Error>((scale * value, source.effective_samples(&x, s, schedule)?))
    })?;
    let oracle_ess = match source {
        ImcfSource::Analytic(_) => None,
        ImcfSource::Empirical { .. } => {
            let mut ess: Vec<f64> = values.iter().filter_map(|v| v.1).collect();
            ess.sort_by(f64::total_cmp);
            Some(ess[ess.len() / 2])
        }
    };
    let values: Vec<f64> = values.into_iter().map(|v| v.0).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(SdPoint {
        s,
        sd: mean,
        stderr: (var / n).sqrt(),
        max_integrand: values.iter().cloned().fold(0.0, f64::max),
        oracle_ess,
    })
}

/// Trapezoid weights for a sorted grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = grid[k + 1] - grid[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

/// Per-time estimates over the grid plus the trapezoid total, with standard
/// errors combined in quadrature.
///
/// With `min_oracle_ess_fraction` set, the total integrates only over the resolved
/// times; the others stay in `per_s` and are listed in `excluded_s`.
pub fn total_schedule_deviation(
    flow: &dyn ConditionalFlow,
    source: &ImcfSource,
    z: &[f64],
    config: &SdConfig,
) -> Result<SdReport> {
    config.validate()?;
    let per_s = config
        .s_grid
        .iter()
        .map(|&s| schedule_deviation_at(flow, source, z, s, config))
        .collect::<Result<Vec<_>>>()?;
    let min_ess = config.min_oracle_ess_fraction.zip(source.oracle_size()).map(|(f, n)| f * n as f64);
    let resolved = |p: &SdPoint| match (min_ess, p.oracle_ess) {
        (Some(min), Some(ess)) => ess >= min,
        _ => true,
    };
    let kept: Vec<&SdPoint> = per_s.iter().filter(|p| resolved(p)).collect();
    let excluded_s = per_s.iter().filter(|p| !resolved(p)).map(|p| p.s).collect();
    let grid: Vec<f64> = kept.iter().map(|p| p.s).collect();
    let w = trapezoid_weights(&grid);
    let total_sd = kept.iter().zip(&w).map(|(p, wk)| wk * p.sd).sum();
    let total_stderr = kept
        .iter()
        .zip(&w)
        .map(|(p, wk)| (wk * p.stderr).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(SdReport {
        z: z.to_vec(),
        per_s,
        total_sd,
        total_stderr,
        strategy: config.divergence_strategy,
        c2_one: config.report_c2_one,
        unreliable: source.is_degenerate(),
        excluded_s,
    })
}

/// Uniform 1-D finite-volume grid for the total-variation check.
///
/// The grid lives in the standardized frame `y = (x - m) / tau(s)` with
/// `tau(s)^2 = var_ref + sigma(s)^2`, where `m` and `var_ref` are the mean and
/// variance of the reference mixture. In this frame the reference path is
/// nearly stationary, so the transport velocity (and with it the Courant
/// limit and numerical diffusion) only reflects the flow's deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityGrid {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    /// Fixed number of time steps over `[0, 1]`; `None` picks steps
    /// adaptively from the Courant condition.
    pub time_steps: Option<usize>,
    /// Number of uniform `s` points at which TV is sampled (and SD integrated).
    pub s_points: usize,
}

impl DensityGrid {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Self {
        DensityGrid {
            lo,
            hi,
            cells,
            time_steps: None,
            s_points: 64,
        }
    }

    fn refined(&self) -> Self {
        DensityGrid {
            cells: 2 * self.cells,
            time_steps: self.time_steps.map(|n| 2 * n),
            ..self.clone()
        }
    }

    fn dy(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dy()
    }

    fn face(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.dy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    /// Mean TV distance over the uniform `s` grid at the base resolution.
    pub lhs: f64,
    /// Same at twice the resolution.
    pub lhs_refined: f64,
    /// Integrated schedule deviation (with the `c2` factor).
    pub rhs: f64,
    /// `2 |lhs - lhs_refined|`.
    pub slack: f64,
    pub holds: bool,
}

const COURANT: f64 = 0.9;

// Standardizing frame of the reference path.
struct Frame<'a> {
    reference: &'a GaussianMixture,
    schedule: &'a DiffusionSchedule,
    mean: f64,
    var: f64,
}

impl Frame<'_> {
    fn tau(&self, s: f64) -> Result<f64> {
        let sigma = self.schedule.sigma(s)?;
        Ok((self.var + sigma * sigma).sqrt())
    }

    fn tau_dot(&self, s: f64) -> Result<f64> {
        let sigma = self.schedule.sigma(s)?;
        Ok(sigma * self.schedule.sigma_dot(s)? / self.tau(s)?)
    }

    // reference density of y at the cell centres
    fn reference_density(&self, grid: &DensityGrid, s: f64) -> Result<Vec<f64>> {
        let tau = self.tau(s)?;
        (0..grid.cells)
            .map(|i| {
                let x = self.mean + tau * grid.center(i);
                Ok(tau * self.reference.log_density(&[x], s, self.schedule)?.exp())
            })
            .collect()
    }
}

/// Evolves `p^ref_1` backward under the flow with an upwind finite-volume
/// scheme and compares against the reference path `p^ref_s`.
pub fn tv_bound_check_1d(
    flow: &dyn ConditionalFlow,
    reference: &GaussianMixture,
    z: &[f64],
    grid: &DensityGrid,
    execution: Execution,
) -> Result<TvReport> {
    if flow.dim() != 1 || reference.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: flow.dim().max(reference.dim()),
        });
    }
    if grid.cells < 4 || !(grid.hi > grid.lo) || grid.s_points < 2 {
        return Err(Error::InvalidArgument("density grid needs hi > lo, >= 4 cells and >= 2 s points".into()));
    }
    let frame = Frame {
        reference,
        schedule: flow.schedule(),
        mean: reference.mean()[0],
        var: reference.variance()[0],
    };
    let s_grid = tv_s_grid(grid.s_points);
    let lhs = mean_tv(flow, &frame, z, grid, &s_grid, execution)?;
    let lhs_refined = mean_tv(flow, &frame, z, &grid.refined(), &s_grid, execution)?;
    let rhs = integrated_sd(flow, &frame, z, &grid.refined(), &s_grid, execution)?;
    let slack = 2.0 * (lhs - lhs_refined).abs();
    Ok(TvReport {
        lhs,
        lhs_refined,
        rhs,
        slack,
        holds: lhs <= rhs + slack,
    })
}

// Uniform grid on [margin, 1] including s = 1 (where TV is zero by construction).
fn tv_s_grid(points: usize) -> Vec<f64> {
    let margin = default_margin(points);
    let h = (1.0 - margin) / (points - 1) as f64;
    (0..points).map(|k| margin + h * k as f64).collect()
}

fn mean_tv(
    flow: &dyn ConditionalFlow,
    frame: &Frame<'_>,
    z: &[f64],
    grid: &DensityGrid,
    s_grid: &[f64],
    execution: Execution,
) -> Result<f64> {
    let dy = grid.dy();
    let n = grid.cells;
    let mut q = frame.reference_density(grid, 1.0)?;
    let mut s = 1.0;
    let mut tv_sum = 0.0;
    let fixed_dt = grid.time_steps.map(|k| 1.0 / k as f64);
    for &target in s_grid.iter().rev() {
        while s > target {
            let tau = frame.tau(s)?;
            let tau_dot = frame.tau_dot(s)?;
            // frame velocity of backward transport, u = -dy/ds, at faces
            let faces = execution.try_map(n + 1, |i| {
                let y = grid.face(i);
                let v = flow.velocity(&[frame.mean + tau * y], z, s)?[0];
                Ok::<f64, Error>(-(v - tau_dot * y) / tau)
            })?;
            let umax = faces.iter().fold(0.0f64, |m, u| m.max(u.abs()));
            let dt = match fixed_dt {
                Some(dt) => {
                    let courant = umax * dt / dy;
                    if courant > 1.0 {
                        return Err(Error::Instability {
                            courant,
                            suggested_steps: (umax / (COURANT * dy)).ceil() as usize,
                        });
                    }
                    dt
                }
                None if umax > 0.0 => COURANT * dy / umax,
                None => s - target,
            }
            .min(s - target);
            // upwind fluxes; no flux through the domain edges
            let flux: Vec<f64> = (0..=n)
                .map(|i| {
                    let u = faces[i];
                    if i == 0 || i == n {
                        0.0
                    } else if u > 0.0 {
                        u * q[i - 1]
                    } else {
                        u * q[i]
                    }
                })
                .collect();
            for i in 0..n {
                q[i] -= dt / dy * (flux[i + 1] - flux[i]);
            }
            s = if s - dt <= target { target } else { s - dt };
        }
        let reference = frame.reference_density(grid, s)?;
        tv_sum += 0.5 * dy * q.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(tv_sum / s_grid.len() as f64)
}

// Integral over s of the exact deviation `int |d/dx (p_ref (v - v_ref))| dx`,
// by midpoint quadrature on the frame grid and trapezoid in s.
fn integrated_sd(
    flow: &dyn ConditionalFlow,
    frame: &Frame<'_>,
    z: &[f64],
    grid: &DensityGrid,
    s_grid: &[f64],
    execution: Execution,
) -> Result<f64> {
    let schedule = frame.schedule;
    let per_s = s_grid
        .iter()
        .map(|&s| {
            let c = schedule.coefficients(s)?;
            let tau = frame.tau(s)?;
            let cells = execution.try_map(grid.cells, |i| {
                let x = [frame.mean + tau * grid.center(i)];
                let v = flow.velocity(&x, z, s)?[0];
                let div = match flow.divergence(&x, z, s) {
                    Some(d) => d?,
                    None => {
                        let h = 1e-5 * (1.0 + x[0].abs());
                        (flow.velocity(&[x[0] + h], z, s)?[0] - flow.velocity(&[x[0] - h], z, s)?[0]) / (2.0 * h)
                    }
                };
                let (score, trace) = frame.reference.score_and_trace(&x, s, schedule)?;
                let v_ref = c.gamma1 * score[0] + c.gamma2 * x[0];
                let div_ref = c.gamma1 * trace + c.gamma2;
                let density = frame.reference.log_density(&x, s, schedule)?.exp();
                Ok::<f64, Error>(density * ((div - div_ref) + (v - v_ref) * score[0]).abs())
            })?;
            Ok(tau * grid.dy() * cells.iter().sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(trapezoid_weights(s_grid).iter().zip(&per_s).map(|(w, v)| w * v).sum())
}
