use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sdev_core::config::{load_model, toy_pairs, FlowSpec, OracleSpec};
use sdev_core::datasets::{sample_maze, sample_toy, Maze, MazeSpec, MazeTrajectorySpec, Support, ToySpec};
use sdev_core::experiments::{run_correlation_sweep, run_fig6_analogue, CorrelateConfig, Fig6Config};
use sdev_core::io::{samples_to_table, table_to_samples, Table};
use sdev_core::rng::derive_seed;
use sdev_core::samplers::{reverse_sample, Algorithm, SamplerConfig};
use sdev_core::sd_metric::{total_schedule_deviation, ImcfSource, SdConfig};
use sdev_core::tinyflow::{train, Arch, TinyFlowNet, TrainConfig};
use sdev_core::transport::wasserstein1;
use sdev_core::Execution;

use crate::{Command, DatasetKind, Experiment, Failure};

/// Parses TOML, naming the offending key on failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T, Failure> {
    let de = toml::Deserializer::parse(text).map_err(|e| Failure::config(format!("{}: {e}", origin.display())))?;
    serde_path_to_error::deserialize(de).map_err(|e| Failure::Config {
        message: format!("{}: {}", origin.display(), e.inner()),
        key: Some(e.path().to_string()),
    })
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    parse_toml(&text, path)
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    path.map_or_else(|| Ok(T::default()), load_toml)
}

fn invalid(e: sdev_core::Error) -> Failure {
    Failure::config(e.to_string())
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Shared file for `sample` and `sd`: the flow plus sampler and deviation
/// settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    flow: FlowSpec,
    #[serde(default)]
    sampler: SamplerSection,
    #[serde(default)]
    oracle: OracleSpec,
    #[serde(default)]
    sd: SdConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SamplerSection {
    algorithm: Algorithm,
    steps: usize,
    ge_mu: f64,
    count: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            algorithm: Algorithm::Ddpm,
            steps: 64,
            ge_mu: 2.0,
            count: 2048,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    arch: Arch,
    train: TrainConfig,
}

pub fn run(command: Command) -> Result<(), Failure> {
    let exec = Execution::default();
    match command {
        Command::GenDataset {
            kind,
            count,
            seed,
            out,
            config,
            maze,
        } => gen_dataset(kind, count, seed, &out, config.as_deref(), maze.as_deref(), exec),
        Command::Train {
            dataset,
            seed,
            out,
            config,
            loss_log,
        } => train_cmd(&dataset, seed, &out, config.as_deref(), loss_log.as_deref(), exec),
        Command::Sample { config, z, seed, out } => sample_cmd(&config, z, seed, &out, exec),
        Command::Sd {
            config,
            z,
            seed,
            out,
            oracle,
        } => sd_cmd(&config, z, seed, &out, oracle.as_deref(), exec),
        Command::Ot { a, b, cap, out } => ot_cmd(&a, &b, cap, out.as_deref(), exec),
        Command::Experiment { which } => experiment(which, exec),
    }
}

fn gen_dataset(
    kind: DatasetKind,
    count: Option<usize>,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
    maze: Option<&Path>,
    exec: Execution,
) -> Result<(), Failure> {
    match kind {
        DatasetKind::ToyDiscrete | DatasetKind::ToyContinuous => {
            let mut spec: ToySpec = load_or_default(config)?;
            spec.support = match kind {
                DatasetKind::ToyDiscrete => Support::Discrete,
                _ => Support::Continuous,
            };
            if let Some(n) = count {
                spec.count = n;
            }
            spec.validate().map_err(invalid)?;
            let pairs = sample_toy(&spec, seed, exec)?;
            let meta = json!({"command": "gen-dataset", "kind": kind_name(kind), "seed": seed, "spec": spec});
            let mut table = Table::new(meta, vec!["z".into(), "x".into()]);
            table.rows = pairs.iter().map(|&(z, x)| vec![z, x]).collect();
            table.save(out)?;
        }
        DatasetKind::Maze => {
            let trajectory: MazeTrajectorySpec = load_or_default(config)?;
            let maze_file = maze;
            let maze = match maze_file {
                Some(p) => Maze::load(p)?,
                None => Maze::builtin(),
            };
            let spec = MazeSpec { maze, trajectory };
            spec.validate().map_err(invalid)?;
            let n = count.unwrap_or(1000);
            let draws = sample_maze(&spec, n, seed, exec)?;
            let mut headers = vec!["z_1".to_owned(), "z_2".to_owned(), "path_len".to_owned()];
            for k in 1..=spec.trajectory.path_points {
                headers.push(format!("p{k}_x"));
                headers.push(format!("p{k}_y"));
            }
            let meta = json!({
                "command": "gen-dataset",
                "kind": "maze",
                "seed": seed,
                "count": n,
                "maze": maze_file.map(|p| p.display().to_string()),
                "trajectory": spec.trajectory,
            });
            let mut table = Table::new(meta, headers);
            table.rows = draws
                .iter()
                .map(|t| {
                    let mut row = vec![t.start[0], t.start[1], t.path_len as f64];
                    row.extend(t.points.iter().flatten());
                    row
                })
                .collect();
            table.save(out)?;
        }
    }
    Ok(())
}

fn kind_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::ToyDiscrete => "toy-discrete",
        DatasetKind::ToyContinuous => "toy-continuous",
        DatasetKind::Maze => "maze",
    }
}

fn train_cmd(
    dataset: &Path,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
    loss_log: Option<&Path>,
    exec: Execution,
) -> Result<(), Failure> {
    let mut file: TrainFile = load_or_default(config)?;
    file.train.seed = seed;
    file.arch.validate().map_err(invalid)?;
    file.train.validate().map_err(invalid)?;
    let table = Table::load(dataset).map_err(|e| match e {
        sdev_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            sdev_core::Error::MissingArtifact(format!(
                "dataset {} does not exist; create it with `sdev gen-dataset --kind toy-discrete --seed <S> --out {}`",
                dataset.display(),
                dataset.display()
            ))
        }
        other => other,
    })?;
    let pairs = toy_pairs(&table)?;
    let net = TinyFlowNet::new(file.arch.clone(), seed)?;
    let outcome = train(net, &pairs, &file.train, exec)?;
    let mut bytes = Vec::new();
    outcome.net.write(&mut bytes)?;
    fs::write(out, bytes)?;
    let log = outcome.loss_log(file.train.log_every);
    if let Some(path) = loss_log {
        let meta = json!({"command": "train", "seed": seed, "dataset": dataset.display().to_string(), "config": file});
        let mut t = Table::new(meta, vec!["iteration".into(), "loss".into()]);
        t.rows = log.iter().map(|&(i, l)| vec![i as f64, l]).collect();
        t.save(path)?;
    }
    print_json(&json!({
        "iterations": outcome.losses.len(),
        "first_window_loss": log.first().map(|w| w.1),
        "last_window_loss": log.last().map(|w| w.1),
        "parameters": outcome.net.param_count(),
    }));
    Ok(())
}

fn load_run_file(path: &Path) -> Result<RunFile, Failure> {
    let file: RunFile = load_toml(path)?;
    file.sd.validate().map_err(invalid)?;
    Ok(file)
}

fn sample_cmd(config: &Path, z: f64, seed: u64, out: &Path, exec: Execution) -> Result<(), Failure> {
    let file = load_run_file(config)?;
    let s = &file.sampler;
    let cfg = SamplerConfig::new(s.algorithm, s.steps, seed)
        .with_ge_mu(s.ge_mu)
        .with_execution(exec);
    cfg.validate().map_err(invalid)?;
    let flow = file.flow.build()?;
    let samples = reverse_sample(flow.as_ref(), &[z], &cfg, s.count)?;
    let meta = json!({"command": "sample", "seed": seed, "config": file});
    samples_to_table(&samples, meta).save(out)?;
    Ok(())
}

fn sd_cmd(config: &Path, z: f64, seed: u64, out: &Path, oracle: Option<&Path>, exec: Execution) -> Result<(), Failure> {
    let file = load_run_file(config)?;
    let flow = file.flow.build()?;
    let source = match oracle {
        Some(path) => {
            let samples = table_to_samples(&Table::load(path)?)?;
            if !samples.condition.is_empty() && samples.condition != [z] {
                return Err(Failure::config(format!(
                    "oracle samples were drawn at z = {:?}, not z = {z}",
                    samples.condition
                )));
            }
            ImcfSource::Empirical {
                oracle: samples,
                probes: None,
            }
        }
        None => file.oracle.build(
            flow.as_ref(),
            &file.flow,
            z,
            file.sd.n_imcf,
            file.sd.n_outer,
            derive_seed(seed, 1),
            exec,
        )?,
    };
    let sd = SdConfig {
        seed: derive_seed(seed, 2),
        execution: exec,
        ..file.sd.clone()
    };
    let report = total_schedule_deviation(flow.as_ref(), &source, &[z], &sd)?;
    let meta = json!({
        "command": "sd",
        "seed": seed,
        "z": z,
        "oracle_file": oracle.map(|p| p.display().to_string()),
        "config": file,
    });
    let headers = ["s", "sd", "stderr", "max_integrand", "oracle_ess", "resolved"].map(String::from).to_vec();
    let mut table = Table::new(meta, headers);
    table.rows = report
        .per_s
        .iter()
        .map(|p| {
            let resolved = !report.excluded_s.contains(&p.s);
            vec![p.s, p.sd, p.stderr, p.max_integrand, p.oracle_ess.unwrap_or(f64::NAN), f64::from(u8::from(resolved))]
        })
        .collect();
    table.save(out)?;
    print_json(&json!({
        "z": z,
        "total_sd": report.total_sd,
        "total_stderr": report.total_stderr,
        "excluded_s": report.excluded_s,
        "unreliable": report.unreliable,
        "strategy": report.strategy,
    }));
    Ok(())
}

fn ot_cmd(a: &Path, b: &Path, cap: usize, out: Option<&Path>, exec: Execution) -> Result<(), Failure> {
    let sa = table_to_samples(&Table::load(a)?)?;
    let sb = table_to_samples(&Table::load(b)?)?;
    let w1 = wasserstein1(&sa, &sb, cap, exec)?;
    let summary = json!({
        "a": a.display().to_string(),
        "b": b.display().to_string(),
        "count": sa.len(),
        "dim": sa.dim(),
        "w1": w1,
    });
    if let Some(path) = out {
        let mut bytes = serde_json::to_vec_pretty(&summary).expect("serializable");
        bytes.push(b'\n');
        fs::write(path, bytes)?;
    }
    print_json(&summary);
    Ok(())
}

fn experiment(which: Experiment, exec: Execution) -> Result<(), Failure> {
    match which {
        Experiment::Fig6 { config, seed, out } => {
            let cfg: Fig6Config = load_or_default(config.as_deref())?;
            // a missing model is a runtime prerequisite, not a config error
            if let Some(model) = &cfg.model {
                load_model(model)?;
            }
            cfg.validate().map_err(|e| match e {
                sdev_core::Error::MissingArtifact(_) => Failure::Runtime(e),
                other => invalid(other),
            })?;
            let result = run_fig6_analogue(&cfg, seed, exec)?;
            result.write(&out)?;
            print_json(&result.summary());
        }
        Experiment::Correlate { config, seed, out } => {
            let cfg: CorrelateConfig = load_or_default(config.as_deref())?;
            cfg.validate().map_err(invalid)?;
            let result = run_correlation_sweep(&cfg, seed, exec)?;
            result.write(&out)?;
            print_json(&result.summary());
        }
    }
    Ok(())
}
