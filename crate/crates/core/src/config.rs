//! Plain-data descriptions of flows and oracles, shared by the experiment
//! drivers and the command line.
//!
//! Every type here deserializes from TOML/JSON with unknown keys rejected, so
//! a typo in a config file is an error rather than a silently ignored knob.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::ToySpec;
use crate::error::{Error, Result};
use crate::flows::{empirical_kernel, ConditionalFlow, FlowRef, GaussianMixture, MixtureFlow, Provenance, SampleSet};
use crate::interpolants::{GuidanceKernel, KernelGuidedFlow, SplineGuidedFlow};
use crate::io::Table;
use crate::samplers::Algorithm;
use crate::schedules::DiffusionSchedule;
use crate::sd_metric::ImcfSource;
use crate::tinyflow::TinyFlowNet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            sigma_min: 5e-4,
            sigma_max: 5.0,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::log_linear(self.sigma_min, self.sigma_max)
    }
}

/// A conditional flow described by data.
///
/// `toy-ideal`, `linear-guide` and `kernel-guide` are closed-form flows over
/// the toy anchors; the guides interpolate between the anchor conditions.
/// `mixture` ignores `z`. `dataset` is the ideal flow of the empirical law of
/// a `(z, x)` table at each stored condition. `tinyflow` loads a trained net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FlowSpec {
    ToyIdeal {
        #[serde(default)]
        toy: ToySpec,
        #[serde(default)]
        schedule: ScheduleSpec,
    },
    LinearGuide {
        #[serde(default)]
        toy: ToySpec,
        #[serde(default)]
        schedule: ScheduleSpec,
    },
    KernelGuide {
        #[serde(default)]
        toy: ToySpec,
        #[serde(default)]
        kernel: GuidanceKernel,
        #[serde(default)]
        schedule: ScheduleSpec,
    },
    Mixture {
        mixture: GaussianMixture,
        #[serde(default)]
        schedule: ScheduleSpec,
    },
    Dataset {
        path: PathBuf,
        #[serde(default)]
        schedule: ScheduleSpec,
    },
    Tinyflow {
        model: PathBuf,
    },
}

impl FlowSpec {
    pub fn build(&self) -> Result<FlowRef> {
        Ok(match self {
            FlowSpec::ToyIdeal { toy, schedule } => Arc::new(toy.ideal_flow(schedule.build()?)?),
            FlowSpec::LinearGuide { toy, schedule } => {
                let ideal: FlowRef = Arc::new(toy.ideal_flow(schedule.build()?)?);
                Arc::new(SplineGuidedFlow::from_conditional(&toy.conditions(), ideal)?)
            }
            FlowSpec::KernelGuide { toy, kernel, schedule } => {
                let ideal: FlowRef = Arc::new(toy.ideal_flow(schedule.build()?)?);
                Arc::new(KernelGuidedFlow::from_conditional(*kernel, ideal)?)
            }
            FlowSpec::Mixture { mixture, schedule } => Arc::new(MixtureFlow::new(mixture.clone(), schedule.build()?)),
            FlowSpec::Dataset { path, schedule } => Arc::new(DatasetFlow::load(path, schedule.build()?)?),
            FlowSpec::Tinyflow { model } => Arc::new(load_model(model)?),
        })
    }

    /// The exact terminal law at `z`, when the flow is an ideal flow of a
    /// known mixture.
    pub fn exact_mixture(&self, z: f64) -> Option<GaussianMixture> {
        match self {
            FlowSpec::ToyIdeal { toy, .. } => toy.conditional_mixture(z).ok(),
            FlowSpec::Mixture { mixture, .. } => Some(mixture.clone()),
            _ => None,
        }
    }

    /// Files this flow reads.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            FlowSpec::Dataset { path, .. } => vec![path],
            FlowSpec::Tinyflow { model } => vec![model],
            _ => Vec::new(),
        }
    }
}

/// Reads a trained model, pointing at `train` when the file is absent.
pub fn load_model(path: &Path) -> Result<TinyFlowNet> {
    match File::open(path) {
        Ok(f) => TinyFlowNet::read(std::io::BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(format!(
            "model file {} does not exist; create it with `sdev train --dataset <data.csv> --seed <S> --out {}`",
            path.display(),
            path.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Where the reference (ideal) flow comes from when measuring deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleSpec {
    /// Terminal samples drawn from the flow itself (the model's own law).
    Sampler {
        #[serde(default = "ddpm")]
        algorithm: Algorithm,
        #[serde(default = "steps_64")]
        steps: usize,
    },
    /// The closed-form law of the flow (ideal flows only).
    Analytic,
}

fn ddpm() -> Algorithm {
    Algorithm::Ddpm
}

fn steps_64() -> usize {
    64
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Sampler {
            algorithm: Algorithm::Ddpm,
            steps: 64,
        }
    }
}

impl OracleSpec {
    pub fn build(
        &self,
        flow: &dyn ConditionalFlow,
        spec: &FlowSpec,
        z: f64,
        n_imcf: usize,
        n_outer: usize,
        seed: u64,
        exec: crate::Execution,
    ) -> Result<ImcfSource> {
        match self {
            OracleSpec::Sampler { algorithm, steps } => {
                let cfg = crate::samplers::SamplerConfig::new(*algorithm, *steps, seed).with_execution(exec);
                ImcfSource::from_sampler(flow, &[z], &cfg, n_imcf, n_outer)
            }
            OracleSpec::Analytic => spec.exact_mixture(z).map(ImcfSource::Analytic).ok_or_else(|| {
                Error::InvalidArgument(format!("the analytic oracle needs an ideal flow with a closed-form law at z = {z}"))
            }),
        }
    }
}

/// Ideal flow of the empirical law of `x` given `z` for a `(z, x)` table.
#[derive(Clone, Debug)]
pub struct DatasetFlow {
    groups: Vec<(f64, SampleSet)>,
    schedule: DiffusionSchedule,
}

impl DatasetFlow {
    pub fn new(pairs: &[(f64, f64)], schedule: DiffusionSchedule) -> Result<Self> {
        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
        for (z, x) in sorted {
            match groups.last_mut() {
                Some((gz, xs)) if *gz == z => xs.push(x),
                _ => groups.push((z, vec![x])),
            }
        }
        if groups.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let groups = groups
            .into_iter()
            .map(|(z, xs)| Ok((z, SampleSet::new(1, xs, vec![z], Provenance::DatasetDraw)?)))
            .collect::<Result<_>>()?;
        Ok(DatasetFlow { groups, schedule })
    }

    pub fn load(path: &Path, schedule: DiffusionSchedule) -> Result<Self> {
        let table = Table::load(path).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingArtifact(format!(
                "dataset {} does not exist; create it with `sdev gen-dataset --kind toy-discrete --seed <S> --out {}`",
                path.display(),
                path.display()
            )),
            other => other,
        })?;
        DatasetFlow::new(&toy_pairs(&table)?, schedule)
    }

    fn group(&self, z: &[f64]) -> Result<&SampleSet> {
        let [zv] = z else {
            return Err(Error::DimensionMismatch { expected: 1, got: z.len() });
        };
        self.groups
            .iter()
            .find(|g| g.0 == *zv)
            .map(|g| &g.1)
            .ok_or_else(|| Error::InvalidArgument(format!("the dataset has no rows with z = {zv}")))
    }
}

impl ConditionalFlow for DatasetFlow {
    fn dim(&self) -> usize {
        1
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn velocity(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        let rate = self.schedule.sigma_dot(s)?;
        Ok(self.epsilon(x, z, s)?.into_iter().map(|e| rate * e).collect())
    }

    fn divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        Some(self.epsilon_divergence(x, z, s)?.and_then(|d| Ok(d * self.schedule.sigma_dot(s)?)))
    }

    fn epsilon(&self, x: &[f64], z: &[f64], s: f64) -> Result<Vec<f64>> {
        Ok(empirical_kernel(x, s, self.group(z)?, &self.schedule)?.epsilon)
    }

    fn epsilon_divergence(&self, x: &[f64], z: &[f64], s: f64) -> Option<Result<f64>> {
        Some(self.group(z).and_then(|g| Ok(empirical_kernel(x, s, g, &self.schedule)?.divergence)))
    }
}

/// `(z, x)` pairs from a table with `z` and `x` columns.
pub fn toy_pairs(table: &Table) -> Result<Vec<(f64, f64)>> {
    let (Some(zc), Some(xc)) = (table.column("z"), table.column("x")) else {
        return Err(Error::InvalidArgument("expected a table with `z` and `x` columns".into()));
    };
    Ok(table.rows.iter().map(|r| (r[zc], r[xc])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::sample_toy;
    use crate::Execution;

    #[test]
    fn flow_specs_parse_from_json() {
        let spec: FlowSpec = serde_json::from_str(r#"{"kind": "kernel-guide", "kernel": {"c1": 2.0, "c2": 8.0}}"#).unwrap();
        let flow = spec.build().unwrap();
        assert_eq!(flow.dim(), 1);
        let bad = serde_json::from_str::<FlowSpec>(r#"{"kind": "linear-guide", "tyo": {}}"#);
        assert!(bad.unwrap_err().to_string().contains("tyo"));
    }

    #[test]
    fn missing_model_names_the_train_command() {
        let err = FlowSpec::Tinyflow { model: "/nonexistent/model.bin".into() }.build().err().unwrap();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert!(err.to_string().contains("sdev train"), "{err}");
    }

    #[test]
    fn dataset_flow_matches_the_empirical_kernel_and_its_divergence() {
        let toy = ToySpec { count: 300, ..ToySpec::discrete() };
        let pairs = sample_toy(&toy, 5, Execution::Sequential).unwrap();
        let schedule = ScheduleSpec::default().build().unwrap();
        let flow = DatasetFlow::new(&pairs, schedule).unwrap();
        let (x, s, h) = (0.3, 0.6, 1e-5);
        let eps = |x: f64| flow.epsilon(&[x], &[1.0], s).unwrap()[0];
        let fd = (eps(x + h) - eps(x - h)) / (2.0 * h);
        let div = flow.epsilon_divergence(&[x], &[1.0], s).unwrap().unwrap();
        assert!((fd - div).abs() < 1e-6 * (1.0 + div.abs()), "{fd} vs {div}");
        assert!(flow.epsilon(&[x], &[0.5], s).is_err());
    }
}
