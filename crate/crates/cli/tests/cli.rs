use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn sdev(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdev"))
        .args(args)
        .current_dir(dir)
        .env_remove("SDEV_THREADS")
        .output()
        .expect("binary runs")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sdev-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn help_exits_zero() {
    let o = sdev(&std::env::temp_dir(), &["sd", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("--oracle"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = workdir("usage");
    let o = sdev(&dir, &["smaple"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sample"), "suggestion expected: {}", stderr(&o));
    // seeds are mandatory
    let o = sdev(&dir, &["gen-dataset", "--kind", "toy-discrete", "--out", "d.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.join("d.csv").exists());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn malformed_config_key_exits_two_with_its_path() {
    let dir = workdir("badkey");
    fs::write(dir.join("run.toml"), "[flow]\nkind = \"linear-guide\"\n[sampler]\nstesp = 8\n").unwrap();
    let o = sdev(&dir, &["sample", "--config", "run.toml", "--z", "0.5", "--seed", "1", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["key"], "sampler.stesp");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn missing_model_is_a_runtime_error_naming_train() {
    let dir = workdir("nomodel");
    fs::write(dir.join("fig6.toml"), "methods = [\"nn\"]\nmodel = \"model.bin\"\n").unwrap();
    let o = sdev(&dir, &["experiment", "fig6", "--config", "fig6.toml", "--seed", "1", "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sdev train"), "{}", stderr(&o));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn pipeline_gen_sample_sd_ot() {
    let dir = workdir("pipeline");
    let start = Instant::now();
    let ok = |args: &[&str]| {
        let o = sdev(&dir, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["gen-dataset", "--kind", "toy-discrete", "--count", "2000", "--seed", "1", "--out", "data.csv"]);
    let run = "[flow]\nkind = \"dataset\"\npath = \"data.csv\"\n\
               [sampler]\ncount = 1024\n\
               [sd]\nn_outer = 64\nmin_oracle_ess_fraction = 0.5\n";
    fs::write(dir.join("ddpm.toml"), run).unwrap();
    fs::write(dir.join("ddim.toml"), run.replace("count = 1024", "count = 1024\nalgorithm = \"ddim\"")).unwrap();
    ok(&["sample", "--config", "ddpm.toml", "--z", "1", "--seed", "2", "--out", "ddpm.csv"]);
    ok(&["sample", "--config", "ddim.toml", "--z", "1", "--seed", "3", "--out", "ddim.csv"]);
    let sd = stdout_json(&ok(&[
        "sd", "--config", "ddpm.toml", "--z", "1", "--seed", "4", "--out", "sd.csv", "--oracle", "ddpm.csv",
    ]));
    assert!(sd["total_sd"].as_f64().unwrap() >= 0.0);
    let ot = stdout_json(&ok(&["ot", "--a", "ddpm.csv", "--b", "ddim.csv", "--out", "ot.json"]));
    // both samplers reproduce the bimodal z = 1 data; their gap is small
    let w1 = ot["w1"].as_f64().unwrap();
    assert!(w1 > 0.0 && w1 < 0.1, "{w1}");
    assert_eq!(ot, serde_json::from_slice::<serde_json::Value>(&fs::read(dir.join("ot.json")).unwrap()).unwrap());
    // every output echoes the seed and config in its metadata line
    let head = fs::read_to_string(dir.join("sd.csv")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(head.lines().next().unwrap().trim_start_matches('#')).unwrap();
    assert_eq!(meta["seed"], 4);
    assert_eq!(meta["config"]["flow"]["kind"], "dataset");
    // rerunning with the same seed is byte-identical
    ok(&["sample", "--config", "ddpm.toml", "--z", "1", "--seed", "2", "--out", "again.csv"]);
    assert_eq!(fs::read(dir.join("ddpm.csv")).unwrap(), fs::read(dir.join("again.csv")).unwrap());
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = workdir("threads");
    fs::write(dir.join("run.toml"), "[flow]\nkind = \"kernel-guide\"\n[sampler]\ncount = 256\nsteps = 16\n").unwrap();
    for (threads, out) in [("1", "a.csv"), ("3", "b.csv")] {
        let o = sdev(
            &dir,
            &["--threads", threads, "sample", "--config", "run.toml", "--z", "0.3", "--seed", "9", "--out", out],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.join("a.csv")).unwrap(), fs::read(dir.join("b.csv")).unwrap());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn experiment_rerun_reproduces_the_manifest() {
    let dir = workdir("experiment");
    let cfg = "z_points = 3\nsamples = 128\nsteps = 16\n[sd]\nn_outer = 16\nn_imcf = 128\ns_grid = [0.3, 0.6, 0.9]\n";
    fs::write(dir.join("c.toml"), cfg).unwrap();
    for out in ["a", "b"] {
        let o = sdev(&dir, &["experiment", "correlate", "--config", "c.toml", "--seed", "5", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read(dir.join("a/manifest.json")).unwrap();
    assert_eq!(a, fs::read(dir.join("b/manifest.json")).unwrap());
    assert_eq!(fs::read(dir.join("a/correlation.csv")).unwrap(), fs::read(dir.join("b/correlation.csv")).unwrap());
    fs::remove_dir_all(dir).unwrap();
}
