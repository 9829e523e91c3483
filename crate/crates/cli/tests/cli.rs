use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpnn_core::autodiff::Tensor;
use gpnn_core::graph::synthetic::{generate, SyntheticSpec};
use gpnn_core::graph::{generate_splits, write_dataset, write_splits, DatasetPaths, Graph};

fn gpnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpnn"))
        .args(args)
        .env_remove("GPNN_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_graph(dir: &Path, g: &Graph, with_splits: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let p = DatasetPaths::in_dir(dir);
    write_dataset(g, &p.edges, &p.features).unwrap();
    if with_splits {
        let splits = generate_splits(g, (0.5, 0.25, 0.25), 3).unwrap();
        write_splits(&p.splits, &splits, g).unwrap();
    }
}

fn synthetic(root: &Path) -> PathBuf {
    let g = generate(&SyntheticSpec {
        nodes: 40,
        features: 6,
        ..Default::default()
    })
    .unwrap();
    let dir = root.join("synth");
    write_graph(&dir, &g, true);
    dir
}

const FAST: [&str; 8] = ["--set", "epochs=15", "--set", "hidden=8", "--set", "max_len=6", "--set", "patience=5"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn stats_prints_counts_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("out");
    let o = gpnn(&["stats", "--dataset", ds.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("N=40\n") && text.contains("F=6\n") && text.contains("C=4\n"), "{text}");
    assert!(text.contains(&format!("wrote {}", out.join("manifest.json").display())));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for name in ["stats.json", "id_map.txt", "config.toml"] {
        let bytes = std::fs::read(out.join(name)).unwrap();
        use sha2::Digest;
        assert_eq!(artifacts[name], hex::encode(sha2::Sha256::digest(&bytes)), "{name}");
    }
    assert!(!artifacts.contains_key("timings.json"));
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn dataset_name_resolves_under_data_root() {
    let tmp = tempfile::tempdir().unwrap();
    synthetic(tmp.path());
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_gpnn"))
        .args(["homophily", "--dataset", "synth", "--output-dir", out.to_str().unwrap()])
        .env("GPNN_DATA_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("H="));
}

#[test]
fn sample_on_a_path_matches_hand_bfs() {
    let tmp = tempfile::tempdir().unwrap();
    let g = Graph::new(Tensor::zeros(vec![5, 1]), vec![0, 1, 0, 1, 0], [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
    let ds = tmp.path().join("path");
    write_graph(&ds, &g, false);
    let out = tmp.path().join("out");
    let o = gpnn(&[
        "sample", "--dataset", ds.to_str().unwrap(), "--k", "2", "--L", "16", "--output-dir", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = std::fs::read_to_string(out.join("sequences.txt")).unwrap();
    let row2 = dump.lines().nth(2).unwrap();
    assert!(row2.starts_with("2: 2,1,3,0,4,"), "{row2}");
    assert!(row2.ends_with("| 1111100000000000"), "{row2}");
    assert!(stdout(&o).contains(row2));
}

#[test]
fn unknown_override_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("out");
    let o = gpnn(&[
        "train", "--dataset", ds.to_str().unwrap(), "--set", "hiden=64", "--output-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!out.exists());
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gpnn(&["stats", "--dataset", "nowhere", "--output-dir", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[data]: "));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("out");
    let o = gpnn(&with(
        &["train", "--dataset", ds.to_str().unwrap(), "--set", "learning_rate=1e300", "--output-dir", out.to_str().unwrap()],
        &FAST,
    ));
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    // Log lines may precede it; the error is always the final line.
    let err = stderr(&o);
    assert!(err.lines().last().unwrap().starts_with("error[numeric]: "), "{err}");
    // The diverged run is still recorded for diagnosis.
    assert!(out.join("run.json").exists());
}

#[test]
fn train_then_replay_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("run");
    let mut args = vec!["train", "--dataset", ds.to_str().unwrap(), "--split", "2", "--output-dir", out.to_str().unwrap()];
    args.extend(FAST);
    let o = gpnn(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["run.json", "checkpoint.json", "predictions.txt", "logs/split_2.jsonl", "id_map.txt"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let log = std::fs::read_to_string(out.join("logs/split_2.jsonl")).unwrap();
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(log.lines().count(), run["train_curve"].as_array().unwrap().len());

    let again = tmp.path().join("again");
    let o = gpnn(&[
        "--replay", out.join("manifest.json").to_str().unwrap(), "--replay-output-dir", again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("artifacts identical"));
    assert_eq!(std::fs::read(out.join("checkpoint.json")).unwrap(), std::fs::read(again.join("checkpoint.json")).unwrap());
}

#[test]
fn tampered_artifact_fails_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("run");
    let o = gpnn(&["homophily", "--dataset", ds.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    let path = out.join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["artifacts"]["homophily.json"] = "00".into();
    std::fs::write(&path, m.to_string()).unwrap();
    let o = gpnn(&["--replay", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("homophily.json"));
}

#[test]
fn protocol_grid_and_sweep_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let d = ds.to_str().unwrap();

    let out = tmp.path().join("protocol");
    let o = gpnn(&with(&["protocol", "--dataset", d, "--set", "model=mlp", "--output-dir", out.to_str().unwrap()], &FAST));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("dataset,model,mean,stdev,n_splits\nsynth,mlp,"), "{csv}");
    assert_eq!(std::fs::read_dir(out.join("logs")).unwrap().count(), 10);

    let out = tmp.path().join("grid");
    let o = gpnn(&with(
        &["grid", "--dataset", d, "--set", "model=gcn", "--max-configs", "2", "--output-dir", out.to_str().unwrap()],
        &FAST,
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 2);
    let o = gpnn(&["--replay", out.to_str().unwrap(), "--replay-output-dir", tmp.path().join("grid2").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = tmp.path().join("sweep");
    let o = gpnn(&with(
        &["oversmooth", "--dataset", d, "--layers", "1,2", "--models", "mlp,gcn", "--output-dir", out.to_str().unwrap()],
        &FAST,
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("\ngcn,2,") && csv.contains(",0\n"), "{csv}");

    let o = gpnn(&["oversmooth", "--dataset", d, "--models", "gat", "--output-dir", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rank_analysis_reports_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synthetic(tmp.path());
    let out = tmp.path().join("rank");
    let o = gpnn(&with(
        &["rank-analysis", "--dataset", ds.to_str().unwrap(), "--n-select", "3", "--output-dir", out.to_str().unwrap()],
        &FAST,
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let rank: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("rank.json")).unwrap()).unwrap();
    assert_eq!(rank["n_select"], 3);
    let r = rank["gpnn_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));
}

#[test]
fn convert_dense_release() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    std::fs::write(src.join("out1_graph_edges.txt"), "node_id\tnode_id\n0\t1\n1\t2\n2\t2\n").unwrap();
    std::fs::write(
        src.join("out1_node_feature_label.txt"),
        "node_id\tfeature\tlabel\n0\t1,0\t0\n1\t0,1\t1\n2\t1,1\t0\n",
    )
    .unwrap();
    let out = tmp.path().join("converted");
    let o = gpnn(&["convert", "--source", src.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gpnn(&["stats", "--dataset", out.to_str().unwrap(), "--output-dir", tmp.path().join("s").to_str().unwrap()]);
    assert!(stdout(&o).contains("N=3\n|E|=2\nF=2\nC=2\n"), "{}", stdout(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(m["artifacts"]["edges.txt"].is_string());
}
