//! Scripted reproductions.
//!
//! - [`run_zero_sd_suite`]: ideal Gaussian-mixture flows measured against their
//!   own closed-form law, where the deviation must vanish.
//! - [`run_fig6_analogue`]: samples and per-time deviation profiles across a
//!   `z` grid for the linear guide, the kernel guide and a trained network.
//! - [`run_correlation_sweep`]: total deviation against the 1-Wasserstein
//!   disagreement between samplers over a `z` grid.
//!
//! Each run is a pure function of `(config, seed)`. Bundles are written with
//! a `manifest.json` that echoes both and records git-style content hashes of
//! every input and output file, so a rerun can be checked byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{FlowSpec, OracleSpec, ScheduleSpec};
use crate::datasets::ToySpec;
use crate::error::{Error, Result};
use crate::flows::{GaussianMixture, SampleSet};
use crate::interpolants::GuidanceKernel;
use crate::io::Table;
use crate::par::Execution;
use crate::rng::derive_seed;
use crate::samplers::{reverse_sample, Algorithm, SamplerConfig};
use crate::sd_metric::{total_schedule_deviation, DivergenceStrategy, ImcfSource, SdConfig, SdReport};
use crate::stats;
use crate::transport::{wasserstein1, DEFAULT_EMD_CAP};

/// `sha256("blob <len>\0" ++ bytes)` in hex, the object id git uses in
/// SHA-256 repositories.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub version: String,
}

fn hash_inputs(paths: &[&Path]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| {
                std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))
            })?;
            Ok(FileHash {
                path: p.display().to_string(),
                hash: content_hash(&bytes),
            })
        })
        .collect()
}

/// Output directory that remembers the hash of everything written to it.
struct Bundle {
    dir: PathBuf,
    outputs: Vec<FileHash>,
}

impl Bundle {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.outputs.push(FileHash {
            path: name.to_owned(),
            hash: content_hash(&bytes),
        });
        Ok(())
    }

    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        let mut bytes = Vec::new();
        table.write(&mut bytes)?;
        self.put(name, bytes)
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(name, bytes)
    }

    fn finish(self, experiment: &str, seed: u64, config: Value, inputs: Vec<FileHash>) -> Result<Manifest> {
        let manifest = Manifest {
            experiment: experiment.to_owned(),
            seed,
            config,
            inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join("manifest.json"), bytes)?;
        Ok(manifest)
    }
}

fn sd_profile_rows(table: &mut Table, report: &SdReport) {
    let z = report.z[0];
    for p in &report.per_s {
        let resolved = !report.excluded_s.contains(&p.s);
        table.rows.push(vec![
            z,
            p.s,
            p.sd,
            p.stderr,
            p.max_integrand,
            p.oracle_ess.unwrap_or(f64::NAN),
            f64::from(u8::from(resolved)),
        ]);
    }
}

fn sd_profile_headers() -> Vec<String> {
    ["z", "s", "sd", "stderr", "max_integrand", "oracle_ess", "resolved"]
        .map(String::from)
        .to_vec()
}

/// Mean, variance and their Monte-Carlo standard errors for scalar samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub mean_stderr: f64,
    pub variance: f64,
    pub variance_stderr: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        Moments {
            mean,
            mean_stderr: (variance / n).sqrt(),
            variance,
            variance_stderr: ((m4 - variance * variance).max(0.0) / n).sqrt(),
        }
    }

    /// Both moments within `k` standard errors of the mixture's.
    pub fn matches(&self, law: &GaussianMixture, k: f64) -> bool {
        (self.mean - law.mean()[0]).abs() <= k * self.mean_stderr
            && (self.variance - law.variance()[0]).abs() <= k * self.variance_stderr
    }
}

/// Zero-deviation sanity runs: the toy ideal flows at their anchor
/// conditions against the analytic oracle.
pub fn run_zero_sd_suite(seed: u64, exec: Execution) -> Result<Vec<SdReport>> {
    let toy = ToySpec::discrete();
    let flow = toy.ideal_flow(ScheduleSpec::default().build()?)?;
    toy.conditions()
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let cfg = SdConfig {
                seed: derive_seed(seed, k as u64),
                execution: exec,
                ..SdConfig::default()
            };
            let source = ImcfSource::Analytic(toy.conditional_mixture(z)?);
            total_schedule_deviation(&flow, &source, &[z], &cfg)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fig6Method {
    /// Natural-spline (here linear) guide between the anchor conditions.
    Linear,
    Kernel,
    /// The trained network evaluated directly at each `z`.
    Nn,
}

impl Fig6Method {
    pub fn name(self) -> &'static str {
        match self {
            Fig6Method::Linear => "linear",
            Fig6Method::Kernel => "kernel",
            Fig6Method::Nn => "nn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fig6Config {
    pub z_grid: Vec<f64>,
    pub methods: Vec<Fig6Method>,
    pub toy: ToySpec,
    pub schedule: ScheduleSpec,
    pub kernel: GuidanceKernel,
    /// Trained network, required by the `nn` method.
    pub model: Option<PathBuf>,
    /// Terminal samples exported per `z`.
    pub samples: usize,
    pub sampler: Algorithm,
    pub steps: usize,
    pub oracle: OracleSpec,
    /// Deviation settings; `seed` is replaced by per-point derived seeds.
    pub sd: SdConfig,
    /// Divergence strategy for the network, which has no analytic one.
    pub nn_divergence: DivergenceStrategy,
}

impl Default for Fig6Config {
    fn default() -> Self {
        Fig6Config {
            z_grid: (0..=8).map(|k| k as f64 / 8.0).collect(),
            methods: vec![Fig6Method::Linear, Fig6Method::Kernel],
            toy: ToySpec::discrete(),
            schedule: ScheduleSpec::default(),
            kernel: GuidanceKernel::default(),
            model: None,
            samples: 4096,
            sampler: Algorithm::Ddpm,
            // the first-order DDPM variance bias is ~0.5 stderr of a 4096-draw
            // moment check here, against ~7 stderr at 64 steps
            steps: 1024,
            oracle: OracleSpec::default(),
            sd: SdConfig {
                n_imcf: 16384,
                min_oracle_ess_fraction: Some(0.5),
                ..SdConfig::default()
            },
            nn_divergence: DivergenceStrategy::FiniteDifference,
        }
    }
}

impl Fig6Config {
    pub fn validate(&self) -> Result<()> {
        if self.z_grid.is_empty() || self.methods.is_empty() || self.samples < 2 {
            return Err(Error::InvalidArgument("fig6 needs a z grid, a method and at least 2 samples".into()));
        }
        if self.methods.contains(&Fig6Method::Nn) && self.model.is_none() {
            return Err(Error::MissingArtifact(
                "method `nn` needs `model = \"<model.bin>\"`; create one with `sdev train --dataset <data.csv> --seed <S> --out <model.bin>`".into(),
            ));
        }
        self.toy.validate()?;
        self.sd.validate()
    }

    fn flow_spec(&self, method: Fig6Method) -> FlowSpec {
        match method {
            Fig6Method::Linear => FlowSpec::LinearGuide {
                toy: self.toy.clone(),
                schedule: self.schedule,
            },
            Fig6Method::Kernel => FlowSpec::KernelGuide {
                toy: self.toy.clone(),
                kernel: self.kernel,
                schedule: self.schedule,
            },
            Fig6Method::Nn => FlowSpec::Tinyflow {
                model: self.model.clone().unwrap_or_default(),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fig6Point {
    pub z: f64,
    pub samples: SampleSet,
    pub report: SdReport,
}

#[derive(Clone, Debug)]
pub struct Fig6Run {
    pub method: Fig6Method,
    pub points: Vec<Fig6Point>,
}

impl Fig6Run {
    pub fn point(&self, z: f64) -> Option<&Fig6Point> {
        self.points.iter().find(|p| p.z == z)
    }

    /// Total deviation at `z` over the larger of its values at the anchors.
    pub fn ratio(&self, z: f64, anchors: &[f64]) -> Option<f64> {
        let mid = self.point(z)?.report.total_sd;
        let top = anchors
            .iter()
            .map(|&a| self.point(a).map(|p| p.report.total_sd))
            .collect::<Option<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Some(mid / top)
    }
}

#[derive(Clone, Debug)]
pub struct Fig6Result {
    pub config: Fig6Config,
    pub seed: u64,
    pub runs: Vec<Fig6Run>,
}

/// Samples and deviation profiles for every method and `z`.
///
/// Grid points run in parallel under `exec`; point `k` of method `m` draws
/// from seeds derived from `(seed, m, k)` only.
pub fn run_fig6_analogue(config: &Fig6Config, seed: u64, exec: Execution) -> Result<Fig6Result> {
    config.validate()?;
    let mut runs = Vec::new();
    for &method in &config.methods {
        let spec = config.flow_spec(method);
        let flow = spec.build()?;
        let method_seed = derive_seed(seed, method as u64);
        let strategy = match method {
            Fig6Method::Nn => config.nn_divergence,
            _ => config.sd.divergence_strategy,
        };
        let points = exec.try_map(config.z_grid.len(), |k| {
            let z = config.z_grid[k];
            let point_seed = derive_seed(method_seed, k as u64);
            let sampler = SamplerConfig::new(config.sampler, config.steps, derive_seed(point_seed, 0)).with_execution(exec);
            let samples = reverse_sample(flow.as_ref(), &[z], &sampler, config.samples)?;
            let source = config.oracle.build(
                flow.as_ref(),
                &spec,
                z,
                config.sd.n_imcf,
                config.sd.n_outer,
                derive_seed(point_seed, 1),
                exec,
            )?;
            let sd = SdConfig {
                seed: derive_seed(point_seed, 2),
                divergence_strategy: strategy,
                execution: exec,
                ..config.sd.clone()
            };
            let report = total_schedule_deviation(flow.as_ref(), &source, &[z], &sd)?;
            Ok::<_, Error>(Fig6Point { z, samples, report })
        })?;
        runs.push(Fig6Run { method, points });
    }
    Ok(Fig6Result {
        config: config.clone(),
        seed,
        runs,
    })
}

impl Fig6Result {
    pub fn run(&self, method: Fig6Method) -> Option<&Fig6Run> {
        self.runs.iter().find(|r| r.method == method)
    }

    pub fn summary(&self) -> Value {
        let anchors = self.config.toy.conditions();
        let methods: serde_json::Map<String, Value> = self
            .runs
            .iter()
            .map(|run| {
                let points: Vec<Value> = run
                    .points
                    .iter()
                    .map(|p| {
                        let xs = p.samples.as_flat();
                        let moments = Moments::of(xs);
                        let modes = stats::kde_modes(xs, stats::silverman_bandwidth(xs), 512, 0.1);
                        let exact = anchors
                            .contains(&p.z)
                            .then(|| self.config.toy.conditional_mixture(p.z).ok())
                            .flatten();
                        json!({
                            "z": p.z,
                            "total_sd": p.report.total_sd,
                            "total_stderr": p.report.total_stderr,
                            "excluded_s": p.report.excluded_s,
                            "moments": moments,
                            "modes": modes,
                            "anchor_moments_within_3_stderr": exact.map(|law| moments.matches(&law, 3.0)),
                        })
                    })
                    .collect();
                let ratio = run.ratio(0.5, &anchors);
                (run.method.name().to_owned(), json!({"points": points, "mid_to_anchor_ratio": ratio}))
            })
            .collect();
        json!({"seed": self.seed, "anchors": anchors, "methods": methods})
    }

    /// Writes `<method>_samples.csv`, `<method>_sd_profile.csv`,
    /// `totals.csv`, `summary.json` and `manifest.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<Manifest> {
        let meta = json!({"experiment": "fig6", "seed": self.seed, "config": self.config});
        let mut bundle = Bundle::create(out)?;
        for run in &self.runs {
            let name = run.method.name();
            let mut samples = Table::new(meta.clone(), vec!["z".into(), "x".into()]);
            let mut profile = Table::new(meta.clone(), sd_profile_headers());
            for p in &run.points {
                samples.rows.extend(p.samples.as_flat().iter().map(|&x| vec![p.z, x]));
                sd_profile_rows(&mut profile, &p.report);
            }
            bundle.table(&format!("{name}_samples.csv"), &samples)?;
            bundle.table(&format!("{name}_sd_profile.csv"), &profile)?;
        }
        let mut headers = vec!["z".to_owned()];
        for run in &self.runs {
            headers.push(format!("{}_total_sd", run.method.name()));
            headers.push(format!("{}_total_stderr", run.method.name()));
        }
        let mut totals = Table::new(meta, headers);
        for (k, &z) in self.config.z_grid.iter().enumerate() {
            let mut row = vec![z];
            for run in &self.runs {
                row.push(run.points[k].report.total_sd);
                row.push(run.points[k].report.total_stderr);
            }
            totals.rows.push(row);
        }
        bundle.table("totals.csv", &totals)?;
        bundle.json("summary.json", &self.summary())?;
        let inputs = match &self.config.model {
            Some(m) if self.config.methods.contains(&Fig6Method::Nn) => hash_inputs(&[m.as_path()])?,
            _ => Vec::new(),
        };
        bundle.finish("fig6", self.seed, serde_json::to_value(&self.config)?, inputs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateConfig {
    /// Grid `k / (z_points - 1)` over `[0, 1]`.
    pub z_points: usize,
    pub flow: FlowSpec,
    pub samples: usize,
    pub steps: usize,
    pub ge_mu: f64,
    pub oracle: OracleSpec,
    /// Deviation settings; `seed` is replaced by per-point derived seeds.
    pub sd: SdConfig,
}

impl Default for CorrelateConfig {
    fn default() -> Self {
        CorrelateConfig {
            z_points: 32,
            flow: FlowSpec::LinearGuide {
                toy: ToySpec::discrete(),
                schedule: ScheduleSpec::default(),
            },
            samples: 2048,
            steps: 64,
            ge_mu: 2.0,
            oracle: OracleSpec::default(),
            sd: SdConfig {
                min_oracle_ess_fraction: Some(0.5),
                ..SdConfig::default()
            },
        }
    }
}

impl CorrelateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_points < 2 || self.samples < 2 {
            return Err(Error::InvalidArgument("correlate needs z_points >= 2 and samples >= 2".into()));
        }
        self.sd.validate()
    }

    pub fn z_grid(&self) -> Vec<f64> {
        (0..self.z_points).map(|k| k as f64 / (self.z_points - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub z: f64,
    pub total_sd: f64,
    pub total_stderr: f64,
    pub w1_ddim: f64,
    pub w1_ge: f64,
}

#[derive(Clone, Debug)]
pub struct CorrelationResult {
    pub config: CorrelateConfig,
    pub seed: u64,
    pub rows: Vec<CorrelationRow>,
    /// Spearman correlation of total deviation against each disagreement;
    /// `None` when either series is constant.
    pub spearman_ddim: Option<f64>,
    pub spearman_ge: Option<f64>,
}

/// Per `z`: total deviation (oracle drawn from the flow's own DDPM samples by
/// default) and the 1-Wasserstein distances from DDPM to DDIM and GE.
pub fn run_correlation_sweep(config: &CorrelateConfig, seed: u64, exec: Execution) -> Result<CorrelationResult> {
    config.validate()?;
    let flow = config.flow.build()?;
    let zs = config.z_grid();
    let rows = exec.try_map(zs.len(), |k| {
        let z = zs[k];
        let point_seed = derive_seed(seed, k as u64);
        let sample = |algorithm: Algorithm, tag: u64| {
            let cfg = SamplerConfig::new(algorithm, config.steps, derive_seed(point_seed, tag))
                .with_ge_mu(config.ge_mu)
                .with_execution(exec);
            reverse_sample(flow.as_ref(), &[z], &cfg, config.samples)
        };
        let ddpm = sample(Algorithm::Ddpm, 0)?;
        let ddim = sample(Algorithm::Ddim, 1)?;
        let ge = sample(Algorithm::Ge, 2)?;
        let source = config.oracle.build(
            flow.as_ref(),
            &config.flow,
            z,
            config.sd.n_imcf,
            config.sd.n_outer,
            derive_seed(point_seed, 3),
            exec,
        )?;
        let sd = SdConfig {
            seed: derive_seed(point_seed, 4),
            execution: exec,
            ..config.sd.clone()
        };
        let report = total_schedule_deviation(flow.as_ref(), &source, &[z], &sd)?;
        Ok::<_, Error>(CorrelationRow {
            z,
            total_sd: report.total_sd,
            total_stderr: report.total_stderr,
            w1_ddim: wasserstein1(&ddpm, &ddim, DEFAULT_EMD_CAP, exec)?,
            w1_ge: wasserstein1(&ddpm, &ge, DEFAULT_EMD_CAP, exec)?,
        })
    })?;
    let sds: Vec<f64> = rows.iter().map(|r| r.total_sd).collect();
    let ddim: Vec<f64> = rows.iter().map(|r| r.w1_ddim).collect();
    let ge: Vec<f64> = rows.iter().map(|r| r.w1_ge).collect();
    Ok(CorrelationResult {
        config: config.clone(),
        seed,
        spearman_ddim: stats::spearman(&sds, &ddim),
        spearman_ge: stats::spearman(&sds, &ge),
        rows,
    })
}

impl CorrelationResult {
    pub fn summary(&self) -> Value {
        let undefined = "total deviation is constant over the grid";
        json!({
            "seed": self.seed,
            "z_points": self.rows.len(),
            "spearman_sd_vs_w1_ddim": self.spearman_ddim,
            "spearman_sd_vs_w1_ge": self.spearman_ge,
            "sign_preserved": self.spearman_ddim.zip(self.spearman_ge).map(|(a, b)| a.signum() == b.signum()),
            "note": (self.spearman_ddim.is_none() || self.spearman_ge.is_none()).then_some(undefined),
        })
    }

    /// Writes `correlation.csv`, `summary.json` and `manifest.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<Manifest> {
        let meta = json!({"experiment": "correlate", "seed": self.seed, "config": self.config});
        let headers = ["z", "total_sd", "total_stderr", "w1_ddim", "w1_ge"].map(String::from).to_vec();
        let mut table = Table::new(meta, headers);
        table.rows = self
            .rows
            .iter()
            .map(|r| vec![r.z, r.total_sd, r.total_stderr, r.w1_ddim, r.w1_ge])
            .collect();
        let mut bundle = Bundle::create(out)?;
        bundle.table("correlation.csv", &table)?;
        bundle.json("summary.json", &self.summary())?;
        let inputs = hash_inputs(&self.config.flow.inputs())?;
        bundle.finish("correlate", self.seed, serde_json::to_value(&self.config)?, inputs)
    }
}
