//! Runner-level behavior: deterministic re-runs with bit-identical CSV
//! bodies, paired-stream verification, cell independence, persisted file
//! layout, report rendering, and the binary's exit codes.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use routelab_cli::config::ExperimentSpec;
use routelab_cli::engine::{paired_streams, run, verify_paired, Family};
use routelab_cli::{protocols, report};
use routelab_core::optim::RoutingConfig;

const TINY: &str = r#"
[protocol]
name = "ablate-2x2"

[stream]
delta = 0.1
tasks = 2
input_dim = 12
subspace_dim = 3
steps_per_task = 120
batch_size = 8
noise_std = 0.05
seed = 11

[model]
layer_widths = [12, 4, 1]
seed = 12

[optimizer]
algos = ["adam"]
eta = 2e-3
beta2 = 0.99

[signature]
rank = 3

[grids]
alpha = [0.5]

[probes]
snapshot_interval = 10
eval_size = 64
adapt_k = 50
adapt_interval = 10

[run]
seeds = [1, 2]
output_dir = "unused"
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("routelab-test-{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn rerun_writes_bit_identical_csv_bodies() {
    let spec = ExperimentSpec::from_toml(TINY).unwrap();
    let out1 = protocols::execute(&spec).unwrap();
    let out2 = protocols::execute(&spec).unwrap();
    let dir1 = scratch("rerun-a");
    let dir2 = scratch("rerun-b");
    report::persist(&spec, &out1, &dir1).unwrap();
    report::persist(&spec, &out2, &dir2).unwrap();
    let m1 = fs::read(dir1.join("metrics.csv")).unwrap();
    let m2 = fs::read(dir2.join("metrics.csv")).unwrap();
    assert_eq!(m1, m2, "metrics bodies must be bit-identical across reruns");
    for entry in fs::read_dir(dir1.join("probes")).unwrap() {
        let p1 = entry.unwrap().path();
        let p2 = dir2.join("probes").join(p1.file_name().unwrap());
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "{p1:?}");
    }
    // meta.json carries the timestamps instead.
    let meta = fs::read_to_string(dir1.join("meta.json")).unwrap();
    assert!(meta.contains("created_unix"));
    assert!(dir1.join("summary.txt").is_file());
}

#[test]
fn cell_independence_under_grid_growth() {
    // Adding seeds to the grid must not change existing cells' rows.
    let small = ExperimentSpec::from_toml(TINY).unwrap();
    let mut large = ExperimentSpec::from_toml(TINY).unwrap();
    large.run.seeds = vec![1, 2, 3];
    let out_small = protocols::execute(&small).unwrap();
    let out_large = protocols::execute(&large).unwrap();
    for row in &out_small.rows {
        let matching = out_large
            .rows
            .iter()
            .find(|r| {
                r.method == row.method && r.seed == row.seed && r.routing == row.routing
            })
            .expect("row exists in larger grid");
        assert_eq!(row.forgetting.to_bits(), matching.forgetting.to_bits());
        assert_eq!(row.final_avg_loss.to_bits(), matching.final_avg_loss.to_bits());
    }
}

#[test]
fn paired_streams_share_hashes_and_unpaired_refuse() {
    let spec = ExperimentSpec::from_toml(TINY).unwrap();
    let mut base = routelab_cli::engine::RunConfig {
        run_id: "base".into(),
        stream: spec.stream.clone(),
        model: spec.model.clone(),
        algo: routelab_core::optim::Algo::Adam,
        hyper: spec.optimizer.hyper(),
        family: Family::Projection { weighted: true },
        strength: 0.5,
        adaptive: false,
        alpha_max: 0.5,
        beta_s: 0.99,
        routing: RoutingConfig::vanilla(),
        sig: Default::default(),
        probes: Default::default(),
        seed: 3,
    };
    base.sig.rank = 3;
    base.probes.adapt_k = 50;
    base.probes.eval_size = 64;
    let (a, b) = paired_streams(&base, ("shared", RoutingConfig::shared()), ("ogp", RoutingConfig::decoupled()));
    let ra = run(&a).unwrap();
    let rb = run(&b).unwrap();
    verify_paired(&ra, &rb).expect("identical batch streams");
    // Identical replay of the pair gives identical probe inputs.
    let ra2 = run(&a).unwrap();
    assert_eq!(ra.snapshots.stream_hash, ra2.snapshots.stream_hash);
    assert_eq!(ra.forgetting.to_bits(), ra2.forgetting.to_bits());
    // A different stream seed must be refused.
    let mut other = b.clone();
    other.stream.seed ^= 1;
    let rc = run(&other).unwrap();
    assert!(verify_paired(&ra, &rc).is_err());
}

#[test]
fn binary_subcommands_and_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_routelab");
    // surrogate prints the predicted table.
    let out = Command::new(exe).args(["surrogate", "0.5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("2.0000"), "surrogate output: {text}");

    // check-schedule prints the discrepancy table.
    let out = Command::new(exe).arg("check-schedule").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max |alpha_star - alpha_hat|"));

    // run on a tiny config, then report on the results.
    let dir = scratch("cli-run");
    let cfg_path = dir.join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out_dir = dir.join("results");
    let out = Command::new(exe)
        .args(["run", cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.csv").is_file());
    let out = Command::new(exe)
        .args(["report", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("vanilla"));

    // Config errors exit 1.
    let bad_path = dir.join("bad.toml");
    fs::write(&bad_path, TINY.replace("[run]", "[run]\nbogus = 1\n")).unwrap();
    let out = Command::new(exe).args(["run", bad_path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Missing directory for report exits 1.
    let out = Command::new(exe).args(["report", "/nonexistent-dir-xyz"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_renders_correlation_from_probe_files() {
    let mut spec = ExperimentSpec::from_path(
        &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/denom-intervene.toml"),
    )
    .unwrap();
    // Shrink for speed: the correlation machinery only needs the four cells.
    spec.run.seeds = vec![1, 2];
    spec.run.replicates = 2;
    spec.stream.steps_per_task = 200;
    spec.probes.adapt_k = 50;
    let out = protocols::execute(&spec).unwrap();
    let dir = scratch("report-corr");
    report::persist(&spec, &out, &dir).unwrap();
    let text = report::render(&dir).unwrap();
    assert!(text.contains("param-level"));
    assert!(
        text.contains("R_eta vs forgetting"),
        "report should include the correlation line:\n{text}"
    );
}
