use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use gpnn_core::graph::{convert_geom_gcn, homophily, ConvertOptions};
use gpnn_core::harness::{
    grid_search, oversmoothing_sweep, ranked_homophily_analysis, run_protocol_with, train_split_model, GridSpec,
};
use gpnn_core::model::ModelKind;
use gpnn_core::sampler::sample_sequences_with;
use gpnn_core::{AggregateReport, ErrorCategory, Graph, ModelConfig, RunResult};

use crate::artifacts::{read_manifest, Manifest, Outputs, MANIFEST};
use crate::config::{load, resolve_config, Dataset};
use crate::{fail, Cli, Command, Common};

/// Everything a dataset-backed subcommand needs, resolved before any file is written.
struct Session {
    name: &'static str,
    data: Dataset,
    cfg: ModelConfig,
    out: Outputs,
    /// Subcommand-specific flags recorded in the manifest.
    extra: Vec<String>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl Session {
    fn open(name: &'static str, common: &Common, extra: Vec<String>) -> Result<Self> {
        let cfg = resolve_config(common)?;
        let data = load(common)?;
        Ok(Session {
            name,
            data,
            cfg,
            out: Outputs::new(&common.output_dir),
            extra,
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn graph(&self) -> &Graph {
        &self.data.graph
    }

    /// Flags that replay this session: the resolved dataset directory and
    /// every config field as an explicit override.
    fn replay_args(&self) -> Result<Vec<String>> {
        let mut args = vec![
            self.name.to_string(),
            "--dataset".into(),
            self.data.dir.display().to_string(),
        ];
        let table: toml::Table = toml::from_str(&self.cfg.to_toml())?;
        for (key, value) in table {
            args.push("--set".into());
            args.push(format!("{key}={value}"));
        }
        args.extend(self.extra.iter().cloned());
        Ok(args)
    }

    fn finish(mut self) -> Result<()> {
        self.out.add("id_map.txt", id_map(self.graph()));
        self.out.add("config.toml", self.cfg.to_toml());
        self.timings.insert("total_s".into(), self.started.elapsed().as_secs_f64());
        self.out.add_json("timings.json", &self.timings)?;
        let manifest = Manifest {
            tool: "gpnn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.name.into(),
            args: self.replay_args()?,
            dataset_dir: Some(self.data.dir.clone()),
            config: Some(serde_json::to_value(&self.cfg)?),
            seed: Some(self.cfg.seed),
            artifacts: BTreeMap::new(),
        };
        print_written(&self.out.finish(manifest)?);
        Ok(())
    }
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn id_map(g: &Graph) -> String {
    let mut out = String::new();
    for (dense, orig) in g.original_ids().iter().enumerate() {
        writeln!(out, "{orig} {dense}").unwrap();
    }
    out
}

/// Run records with the wall clock removed, so artifacts are reproducible.
fn stable_run(run: &RunResult) -> RunResult {
    RunResult {
        wall_time_s: 0.0,
        ..run.clone()
    }
}

fn stable_report(report: &AggregateReport) -> AggregateReport {
    AggregateReport {
        per_split: report.per_split.iter().map(stable_run).collect(),
        ..report.clone()
    }
}

fn add_report(s: &mut Session, report: &AggregateReport) -> Result<()> {
    s.out.add_json("report.json", &stable_report(report))?;
    s.out.add("report.csv", AggregateReport::to_csv(&[report]));
    for run in &report.per_split {
        s.timings.insert(format!("split_{}_s", run.split_id), run.wall_time_s);
    }
    Ok(())
}

fn parse_model(name: &str) -> Result<ModelKind> {
    match name.trim() {
        "gpnn" => Ok(ModelKind::Gpnn),
        "mlp" => Ok(ModelKind::Mlp),
        "gcn" => Ok(ModelKind::Gcn),
        other => Err(fail(ErrorCategory::Config, format!("unknown model {other:?} (gpnn, mlp, gcn)"))),
    }
}

fn split_index(s: &Session, split: usize) -> Result<gpnn_core::SplitSet> {
    let splits = s.data.require_splits()?;
    splits.get(split).cloned().ok_or_else(|| {
        fail(
            ErrorCategory::Config,
            format!("split {split} out of range ({} splits)", splits.len()),
        )
    })
}

fn diverged(what: &str, reason: &str) -> anyhow::Error {
    fail(ErrorCategory::Numeric, format!("{what} diverged: {reason}"))
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Stats(common) => stats(&common),
        Command::Homophily(common) => homophily_cmd(&common),
        Command::Sample { common, k, max_len } => sample(&common, k, max_len),
        Command::Train { common, split } => train(&common, split),
        Command::Protocol(common) => protocol(&common),
        Command::Grid {
            common,
            grid,
            max_configs,
        } => grid_cmd(&common, grid.as_deref(), max_configs),
        Command::RankAnalysis {
            common,
            n_select,
            split,
        } => rank_analysis(&common, n_select, split),
        Command::Oversmooth { common, layers, models } => oversmooth(&common, &layers, &models),
        Command::Convert {
            source,
            splits_dir,
            split_prefix,
            sparse_dim,
            output_dir,
        } => convert(ConvertOptions {
            source_dir: source,
            splits_dir,
            split_prefix,
            sparse_feature_dim: sparse_dim,
            output_dir,
        }),
    }
}

fn stats(common: &Common) -> Result<()> {
    let mut s = Session::open("stats", common, vec![])?;
    let g = s.graph();
    let h = homophily(g);
    let summary = serde_json::json!({
        "nodes": g.num_nodes(),
        "edges": g.num_edges(),
        "features": g.num_features(),
        "classes": g.num_classes(),
        "homophily": h.ratio,
        "isolated_nodes": h.isolated,
        "self_loops_dropped": g.self_loops().len(),
        "splits": s.data.splits.as_ref().map_or(0, Vec::len),
    });
    println!("N={}", g.num_nodes());
    println!("|E|={}", g.num_edges());
    println!("F={}", g.num_features());
    println!("C={}", g.num_classes());
    println!("H={:.4}", h.ratio);
    s.out.add_json("stats.json", &summary)?;
    s.finish()
}

fn homophily_cmd(common: &Common) -> Result<()> {
    let mut s = Session::open("homophily", common, vec![])?;
    let h = homophily(s.graph());
    println!("H={:.6} isolated={}", h.ratio, h.isolated);
    s.out.add_json(
        "homophily.json",
        &serde_json::json!({ "homophily": h.ratio, "isolated_nodes": h.isolated }),
    )?;
    s.finish()
}

fn sample(common: &Common, k: Option<usize>, max_len: Option<usize>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(k) = k {
        extra.extend(["--k".to_string(), k.to_string()]);
    }
    if let Some(l) = max_len {
        extra.extend(["--L".to_string(), l.to_string()]);
    }
    let mut s = Session::open("sample", common, extra)?;
    let (k, l) = (k.unwrap_or(s.cfg.depth_k), max_len.unwrap_or(s.cfg.max_len));
    if l == 0 {
        return Err(fail(ErrorCategory::Config, "--L must be >= 1"));
    }
    let batch = sample_sequences_with(s.graph(), k, l, s.cfg.layer_order())?;
    let dump = batch.dump();
    print!("{dump}");
    s.out.add("sequences.txt", dump);
    s.finish()
}

fn train(common: &Common, split: usize) -> Result<()> {
    let mut s = Session::open("train", common, vec!["--split".into(), split.to_string()])?;
    let split_set = split_index(&s, split)?;
    let logs = s.out.direct_subdir("logs")?;
    let log = logs.join(format!("split_{split}.jsonl"));
    let (model, run) = train_split_model(s.graph(), &split_set, &s.cfg, Some(&log))?;
    println!(
        "split {split}: best epoch {} of {}, val acc {:.4}, test acc {:.4}",
        run.best_epoch,
        run.last_epoch(),
        run.val_accuracy,
        run.test_accuracy
    );
    s.timings.insert("train_s".into(), run.wall_time_s);
    s.out.add_json("run.json", &stable_run(&run))?;
    s.out.add("checkpoint.json", model.params.to_json()?);
    let mut preds = String::new();
    let ids = s.graph().original_ids();
    for (v, p) in model.predict()?.into_iter().enumerate() {
        writeln!(preds, "{} {p} {}", ids[v], s.graph().labels()[v]).unwrap();
    }
    s.out.add("predictions.txt", preds);
    let aborted = run.aborted.clone();
    s.finish()?;
    match aborted {
        Some(reason) => Err(diverged("training", &reason)),
        None => Ok(()),
    }
}

fn protocol(common: &Common) -> Result<()> {
    let mut s = Session::open("protocol", common, vec![])?;
    let splits = s.data.require_splits()?.to_vec();
    let logs = s.out.direct_subdir("logs")?;
    let name = dataset_name(&s.data.dir);
    let report = run_protocol_with(s.graph(), &splits, &s.cfg, &name, Some(&logs))?;
    println!(
        "{} on {name}: {:.4} +- {:.4} over {} splits",
        report.model, report.mean_accuracy, report.stdev_accuracy, report.n_splits
    );
    add_report(&mut s, &report)?;
    s.finish()?;
    if report.complete {
        Ok(())
    } else {
        Err(diverged("protocol", "at least one split aborted"))
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned())
}

fn grid_cmd(common: &Common, grid_path: Option<&Path>, max_configs: Option<usize>) -> Result<()> {
    let mut spec = match grid_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| fail(ErrorCategory::Config, format!("reading {}: {e}", path.display())))?;
            toml::from_str::<GridSpec>(&text)
                .map_err(|e| fail(ErrorCategory::Config, format!("grid spec {}: {e}", path.display())))?
        }
        None => GridSpec::default(),
    };
    if max_configs.is_some() {
        spec.max_configs = max_configs;
    }
    let mut s = Session::open("grid", common, vec![])?;
    // The grid definition is recorded inline so a replay does not depend on the grid file.
    s.extra = vec!["--grid".into(), s.out.dir().join("grid_spec.toml").display().to_string()];
    let splits = s.data.require_splits()?.to_vec();
    let name = dataset_name(&s.data.dir);
    log::info!("grid search over {} cells", spec.configs(&s.cfg).len());
    let result = grid_search(s.graph(), &splits, &s.cfg, &spec, &name)?;
    println!(
        "best cell: hidden={} lr={} dropout={} wd={} m={} -> val {:.4}, test {:.4} +- {:.4}",
        result.best_config.hidden,
        result.best_config.learning_rate,
        result.best_config.dropout,
        result.best_config.weight_decay,
        result.best_config.num_selected_m,
        result.report.mean_val_accuracy,
        result.report.mean_accuracy,
        result.report.stdev_accuracy
    );
    s.out.add("grid_spec.toml", toml::to_string(&spec)?);
    s.out.add_json(
        "grid.json",
        &serde_json::json!({ "best_config": result.best_config, "cells": result.cells }),
    )?;
    s.out.add("best_config.toml", result.best_config.to_toml());
    add_report(&mut s, &result.report)?;
    s.finish()
}

fn rank_analysis(common: &Common, n_select: usize, split: usize) -> Result<()> {
    let extra = vec![
        "--n-select".into(),
        n_select.to_string(),
        "--split".into(),
        split.to_string(),
    ];
    let mut s = Session::open("rank-analysis", common, extra)?;
    if s.cfg.model != ModelKind::Gpnn {
        return Err(fail(ErrorCategory::Config, "rank-analysis needs model=gpnn"));
    }
    let split_set = split_index(&s, split)?;
    let (model, run) = train_split_model(s.graph(), &split_set, &s.cfg, None)?;
    if let Some(reason) = &run.aborted {
        return Err(diverged("training", reason));
    }
    let res = ranked_homophily_analysis(s.graph(), &model, n_select, s.cfg.seed)?;
    println!(
        "top-{n_select} pointer homophily {:.4} vs random 1-hop {:.4}",
        res.gpnn_ratio, res.random_1hop_ratio
    );
    s.timings.insert("train_s".into(), run.wall_time_s);
    s.out.add_json("rank.json", &res)?;
    s.out.add_json("run.json", &stable_run(&run))?;
    s.finish()
}

fn oversmooth(common: &Common, layers: &[usize], models: &[String]) -> Result<()> {
    let kinds = models.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>>>()?;
    let join = |xs: Vec<String>| xs.join(",");
    let extra = vec![
        "--layers".into(),
        join(layers.iter().map(usize::to_string).collect()),
        "--models".into(),
        join(kinds.iter().map(|k| k.as_str().to_string()).collect()),
    ];
    let mut s = Session::open("oversmooth", common, extra)?;
    let splits = s.data.require_splits()?.to_vec();
    let table = oversmoothing_sweep(s.graph(), &splits, &s.cfg, layers, &kinds)?;
    let csv = table.to_csv();
    print!("{csv}");
    s.out.add("sweep.csv", csv);
    s.out.add_json("sweep.json", &table)?;
    s.finish()
}

fn convert(opts: ConvertOptions) -> Result<()> {
    let paths = convert_geom_gcn(&opts)?;
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let mut args = vec!["convert".to_string(), "--source".into(), abs(&opts.source_dir).display().to_string()];
    if let Some(d) = &opts.splits_dir {
        args.extend(["--splits-dir".into(), abs(d).display().to_string()]);
    }
    if let Some(p) = &opts.split_prefix {
        args.extend(["--split-prefix".into(), p.clone()]);
    }
    if let Some(d) = opts.sparse_feature_dim {
        args.extend(["--sparse-dim".into(), d.to_string()]);
    }
    let mut out = Outputs::new(&opts.output_dir);
    for p in [&paths.edges, &paths.features, &paths.splits] {
        if p.exists() {
            out.register_existing(&p.file_name().unwrap().to_string_lossy());
        }
    }
    let manifest = Manifest {
        tool: "gpnn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: "convert".into(),
        args,
        dataset_dir: None,
        config: None,
        seed: None,
        artifacts: BTreeMap::new(),
    };
    print_written(&out.finish(manifest)?);
    Ok(())
}

/// Re-runs the invocation recorded in `manifest_path` into a fresh directory
/// and checks every artifact checksum matches.
pub fn replay(manifest_path: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST)
    } else {
        manifest_path.to_path_buf()
    };
    let original = read_manifest(&manifest_path).map_err(|e| fail(ErrorCategory::Data, format!("{e:#}")))?;
    let out = output_dir.unwrap_or_else(|| {
        let parent = manifest_path.parent().unwrap_or(Path::new("."));
        let name = dataset_name(parent);
        parent.with_file_name(format!("{name}-replay"))
    });
    let mut argv = vec!["gpnn".to_string()];
    argv.extend(original.args.iter().cloned());
    argv.extend(["--output-dir".to_string(), out.display().to_string()]);
    // Inline grid specs live next to the original manifest.
    if original.subcommand == "grid" {
        if let Some(pos) = argv.iter().position(|a| a == "--grid") {
            let spec = manifest_path.parent().unwrap_or(Path::new(".")).join("grid_spec.toml");
            argv[pos + 1] = spec.display().to_string();
        }
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| fail(ErrorCategory::Config, format!("manifest args: {e}")))?;
    let cmd = cli
        .command
        .ok_or_else(|| fail(ErrorCategory::Config, "manifest records no subcommand"))?;
    let status = dispatch(cmd);
    let replayed = read_manifest(&out.join(MANIFEST)).context("replay produced no manifest")?;
    status?;
    let mut mismatched = Vec::new();
    for (name, sum) in &original.artifacts {
        if replayed.artifacts.get(name) != Some(sum) {
            mismatched.push(name.clone());
        }
    }
    for name in replayed.artifacts.keys() {
        if !original.artifacts.contains_key(name) {
            mismatched.push(name.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replay: {} artifacts identical", original.artifacts.len());
        Ok(())
    } else {
        Err(fail(
            ErrorCategory::Internal,
            format!("replay differs in {}", mismatched.join(", ")),
        ))
    }
}
