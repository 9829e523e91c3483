//! Acceptance criteria 1 to 9. Prints one PASS/FAIL line per criterion and
//! exits non-zero when a criterion that could be evaluated fails.
//!
//! Dataset criteria read `$GPNN_DATA_ROOT/<name>/{edges.txt,features.tsv,splits.json}`
//! and report FAIL with a BLOCKED reason when the data is missing.
//! `GPNN_ACCEPT_MAX_CONFIGS` caps the grid subsample per tuned model (default 6, 0 for the full grid).

mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use common::{kernel_case, model_gradcheck, random_graph, rng, toy_graph, walk_reachability_rows, KERNELS};
use gpnn_core::autodiff::{finite_difference_check, ParamStore, Tape, Tensor};
use gpnn_core::graph::{homophily_ratio, load_dataset, load_splits, write_dataset, DatasetPaths, Graph, SplitSet};
use gpnn_core::harness::{grid_search, oversmoothing_sweep, ranked_homophily_analysis, train_one_split, train_split_model, GridResult, GridSpec};
use gpnn_core::model::{ForwardOptions, ModelKind, NO_SELECTION};
use gpnn_core::{sample_sequences, Model, ModelConfig};

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Check = std::result::Result<String, String>;

fn verdict(check: Check) -> Outcome {
    match check {
        Ok(detail) => Outcome::Pass(detail),
        Err(detail) if detail.starts_with("BLOCKED") => Outcome::Blocked(detail),
        Err(detail) => Outcome::Fail(detail),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

fn criterion_1() -> Check {
    const EPS: f64 = 1e-3;
    let mut worst: f64 = 0.0;
    for name in KERNELS {
        for seed in 0..20 {
            let case = kernel_case(name, 1000 + seed);
            let r = finite_difference_check(&case.f, &case.leaves, EPS).map_err(|e| format!("{name}: {e}"))?;
            ensure(r.max_rel_error < 1e-4, || format!("{name} seed {seed}: rel error {:.2e}", r.max_rel_error))?;
            worst = worst.max(r.max_rel_error);
        }
    }
    let g = toy_graph();
    let base = ModelConfig {
        hidden: 3,
        num_selected_m: 3,
        depth_k: 2,
        max_len: 5,
        dropout: 0.0,
        ..Default::default()
    };
    let (mut checked, mut skipped) = (0, 0);
    for overrides in [&[][..], &["selection_mode=soft"], &["cell_type=lstm_cell"], &["layers=2"]] {
        let cfg = base.with_overrides(overrides).map_err(|e| e.to_string())?;
        let model = Model::new(&g, &cfg).map_err(|e| e.to_string())?;
        let r = model_gradcheck(&model, g.labels(), &[0, 1, 2, 4], EPS).map_err(|e| e.to_string())?;
        ensure(r.max_rel_error < 1e-4, || format!("gpnn {overrides:?}: rel error {:.2e}", r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped;
    }
    Ok(format!(
        "{} kernels x 20 shapes and the 6-node gpnn loss; max rel error {worst:.1e}, {checked} coords checked, {skipped} argmax-flip skipped",
        KERNELS.len()
    ))
}

// ---------------------------------------------------------------------------
// 3. Sampler oracle
// ---------------------------------------------------------------------------

fn criterion_3() -> Check {
    let mut r = rng(2024);
    let mut rows = 0;
    for i in 0..200 {
        let n = 1 + i % 12;
        let p = [0.1, 0.25, 0.5][i % 3];
        let g = random_graph(&mut r, n, p, 3, 1);
        for k in 0..=3 {
            for l in [1, 4, 12] {
                let got = sample_sequences(&g, k, l).map_err(|e| e.to_string())?;
                let want = walk_reachability_rows(&g, k, l);
                for v in 0..n {
                    ensure(got.row(v) == want[v].as_slice(), || {
                        format!("graph {i} k={k} L={l} node {v}: {:?} vs {:?}", got.row(v), want[v])
                    })?;
                    rows += 1;
                }
            }
        }
    }
    Ok(format!("200 graphs, k in 0..=3, L in {{1,4,12}}: {rows} rows identical"))
}

// ---------------------------------------------------------------------------
// 9. Property suites
// ---------------------------------------------------------------------------

fn criterion_9() -> Check {
    let e = |x: gpnn_core::Error| x.to_string();
    let mut r = rng(9);

    // Softmax normalization and zero gradient at masked entries.
    for trial in 0..50 {
        let scores = common::random_tensor(&mut r, &[4, 6]);
        let mut mask: Vec<bool> = (0..24).map(|i| (i * 7 + trial) % 3 != 0).collect();
        (0..4).for_each(|row| mask[row * 6] = true);
        let mut tape = Tape::new();
        let s = tape.param(scores).map_err(e)?;
        let p = tape.masked_softmax(s, &mask).map_err(e)?;
        let w = tape.constant(common::random_tensor(&mut r, &[4, 6])).map_err(e)?;
        let y = tape.mul(p, w).map_err(e)?;
        let loss = tape.sum(y).map_err(e)?;
        tape.backward(loss).map_err(e)?;
        let (pv, g) = (tape.value(p), tape.grad(s).unwrap());
        for row in 0..4 {
            let sum: f64 = pv.row(row).iter().sum();
            ensure((sum - 1.0).abs() < 1e-12, || format!("softmax row sums to {sum}"))?;
        }
        for (i, &m) in mask.iter().enumerate() {
            ensure(m || (pv.data()[i] == 0.0 && g.data()[i] == 0.0), || format!("masked entry {i} leaks"))?;
        }
    }

    // Loss equals ln C at uniform logits.
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(vec![3, 5], -1.25)).map_err(e)?;
    let l = tape.cross_entropy(x, &[0, 3, 4], &[0, 1, 2]).map_err(e)?;
    let ce = tape.value(l).data()[0];
    ensure((ce - 5f64.ln()).abs() < 1e-12, || format!("uniform loss {ce}"))?;

    // Unique pointer selections and bit-exact determinism.
    for trial in 0..10 {
        let g = random_graph(&mut r, 25, 0.15, 3, 4);
        let cfg = ModelConfig {
            hidden: 6,
            num_selected_m: 4,
            max_len: 8,
            seed: trial,
            ..Default::default()
        };
        let model = Model::new(&g, &cfg).map_err(e)?;
        let ptr = &model.pointers(ForwardOptions::default()).map_err(e)?[0];
        for v in 0..25 {
            let mut row: Vec<i64> = ptr.selected_positions[v * 4..(v + 1) * 4]
                .iter()
                .copied()
                .filter(|&p| p != NO_SELECTION)
                .collect();
            let n = row.len();
            row.sort_unstable();
            row.dedup();
            ensure(row.len() == n, || format!("repeated pointer choice at node {v}"))?;
        }
        let again = Model::new(&g, &cfg).map_err(e)?;
        ensure(model.logits().map_err(e)? == again.logits().map_err(e)?, || "logits differ across runs".into())?;
        let split = SplitSet {
            split_id: 0,
            train: (0..10).collect(),
            val: (10..18).collect(),
            test: (18..25).collect(),
        };
        if trial == 0 {
            let short = ModelConfig { epochs: 5, ..cfg.clone() };
            let a = train_one_split(&g, &split, &short).map_err(e)?;
            let b = train_one_split(&g, &split, &short).map_err(e)?;
            ensure(a.same_outcome(&b), || "training runs differ".into())?;
        }
    }

    // Round-trip serialization of graphs and checkpoints.
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let g = random_graph(&mut r, 30, 0.1, 4, 3);
    let (ep, fp) = (dir.path().join("e.txt"), dir.path().join("f.tsv"));
    write_dataset(&g, &ep, &fp).map_err(e)?;
    let back = load_dataset(&ep, &fp).map_err(e)?;
    ensure(back.features() == g.features() && back.edges() == g.edges(), || "graph round trip".into())?;
    let model = Model::new(&g, &ModelConfig::default()).map_err(e)?;
    let ck = dir.path().join("ck.json");
    model.params.save_checkpoint(&ck).map_err(e)?;
    ensure(ParamStore::load_checkpoint(&ck).map_err(e)? == model.params, || "checkpoint round trip".into())?;

    Ok("softmax normalization, masked zero gradient, ln C at uniform, unique selections, determinism, round trips".into())
}

// ---------------------------------------------------------------------------
// Dataset criteria
// ---------------------------------------------------------------------------

/// Name, N, |E|, F, C, homophily ratio.
const TABLE: [(&str, usize, usize, usize, usize, f64); 6] = [
    ("chameleon", 2277, 36101, 2325, 5, 0.25),
    ("squirrel", 5201, 217073, 2089, 5, 0.22),
    ("actor", 7600, 33544, 931, 5, 0.24),
    ("cornell", 183, 295, 1703, 5, 0.11),
    ("texas", 183, 309, 1703, 5, 0.06),
    ("wisconsin", 251, 499, 1703, 5, 0.16),
];

struct Data {
    root: Option<PathBuf>,
    graphs: HashMap<&'static str, std::result::Result<(Graph, Vec<SplitSet>), String>>,
    tuned: HashMap<(&'static str, ModelKind), std::result::Result<GridResult, String>>,
    max_configs: usize,
}

impl Data {
    fn new() -> Self {
        let max_configs = std::env::var("GPNN_ACCEPT_MAX_CONFIGS")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(6);
        Data {
            root: std::env::var_os("GPNN_DATA_ROOT").map(PathBuf::from),
            graphs: HashMap::new(),
            tuned: HashMap::new(),
            max_configs,
        }
    }

    fn dataset(&mut self, name: &'static str) -> std::result::Result<&(Graph, Vec<SplitSet>), String> {
        let root = self.root.clone();
        self.graphs
            .entry(name)
            .or_insert_with(|| {
                let Some(root) = root else {
                    return Err(format!("BLOCKED: dataset not found ({name}; GPNN_DATA_ROOT unset)"));
                };
                let paths = DatasetPaths::in_dir(&root.join(name));
                if !paths.edges.exists() || !paths.features.exists() {
                    return Err(format!("BLOCKED: dataset not found ({})", root.join(name).display()));
                }
                let g = load_dataset(&paths.edges, &paths.features).map_err(|e| format!("{name}: {e}"))?;
                let splits = if paths.splits.exists() {
                    load_splits(&paths.splits, &g).map_err(|e| format!("{name} splits: {e}"))?
                } else {
                    Vec::new()
                };
                Ok((g, splits))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn splits(&mut self, name: &'static str) -> std::result::Result<(Graph, Vec<SplitSet>), String> {
        let (g, splits) = self.dataset(name)?;
        if splits.is_empty() {
            return Err(format!("BLOCKED: {name} has no splits.json"));
        }
        Ok((g.clone(), splits.clone()))
    }

    /// Grid-searched report for `model` on `name`, cached across criteria.
    fn tuned(&mut self, name: &'static str, model: ModelKind) -> std::result::Result<GridResult, String> {
        if let Some(hit) = self.tuned.get(&(name, model)) {
            return hit.clone();
        }
        let result = self.splits(name).and_then(|(g, splits)| {
            let base = ModelConfig::for_model(model);
            let grid = GridSpec {
                max_configs: (self.max_configs > 0).then_some(self.max_configs),
                ..GridSpec::default()
            };
            let start = Instant::now();
            let res = grid_search(&g, &splits, &base, &grid, name).map_err(|e| format!("{name} {}: {e}", model.as_str()))?;
            eprintln!(
                "  tuned {} on {name}: {:.4} +- {:.4} ({:.0}s)",
                model.as_str(),
                res.report.mean_accuracy,
                res.report.stdev_accuracy,
                start.elapsed().as_secs_f64()
            );
            Ok(res)
        });
        self.tuned.insert((name, model), result.clone());
        result
    }
}

fn criterion_2(data: &mut Data) -> Check {
    let mut lines = Vec::new();
    let mut blocked = Vec::new();
    for (name, n, e, f, c, h) in TABLE {
        let g = match data.dataset(name) {
            Ok((g, _)) => g,
            Err(msg) if msg.starts_with("BLOCKED") => {
                blocked.push(name);
                continue;
            }
            Err(msg) => return Err(msg),
        };
        let got = (g.num_nodes(), g.num_edges(), g.num_features(), g.num_classes());
        let hr = homophily_ratio(g);
        ensure(got == (n, e, f, c) && (hr - h).abs() <= 0.02, || {
            format!("{name}: (N,E,F,C,H) = {got:?}, {hr:.3}; expected ({n}, {e}, {f}, {c}), {h}")
        })?;
        lines.push(format!("{name} H={hr:.3}"));
    }
    if !blocked.is_empty() {
        return Err(format!("BLOCKED: dataset not found ({})", blocked.join(", ")));
    }
    Ok(lines.join(", "))
}

const WEBKB: [&str; 3] = ["cornell", "texas", "wisconsin"];

fn criterion_4(data: &mut Data) -> Check {
    let mut out = Vec::new();
    for name in WEBKB {
        let gpnn = data.tuned(name, ModelKind::Gpnn)?.report.mean_accuracy;
        let mlp = data.tuned(name, ModelKind::Mlp)?.report.mean_accuracy;
        ensure(gpnn >= 0.75 && mlp >= 0.75, || format!("{name}: gpnn {gpnn:.4}, mlp {mlp:.4} (need >= 0.75)"))?;
        out.push(format!("{name} gpnn {gpnn:.4} mlp {mlp:.4}"));
    }
    Ok(out.join(", "))
}

fn criterion_5(data: &mut Data) -> Check {
    let mut out = Vec::new();
    for name in WEBKB {
        let gpnn = data.tuned(name, ModelKind::Gpnn)?.report.mean_accuracy;
        let gcn = data.tuned(name, ModelKind::Gcn)?.report.mean_accuracy;
        ensure(gpnn - gcn >= 0.10, || format!("{name}: gpnn {gpnn:.4} vs gcn {gcn:.4} (gap < 0.10)"))?;
        out.push(format!("{name} gap {:.4}", gpnn - gcn));
    }
    Ok(out.join(", "))
}

fn criterion_6(data: &mut Data) -> Check {
    let gpnn = data.tuned("chameleon", ModelKind::Gpnn)?.report.mean_accuracy;
    let gcn = data.tuned("chameleon", ModelKind::Gcn)?.report.mean_accuracy;
    ensure(gpnn >= 0.60 && gcn >= 0.55, || format!("chameleon: gpnn {gpnn:.4} (>= 0.60), gcn {gcn:.4} (>= 0.55)"))?;
    Ok(format!("chameleon gpnn {gpnn:.4}, gcn {gcn:.4}"))
}

fn criterion_7(data: &mut Data) -> Check {
    let cfg = data.tuned("chameleon", ModelKind::Gpnn)?.best_config;
    let mut out = Vec::new();
    for name in ["chameleon", "squirrel"] {
        let (g, splits) = data.splits(name)?;
        let (model, _) = train_split_model(&g, &splits[0], &cfg, None).map_err(|e| e.to_string())?;
        let r = ranked_homophily_analysis(&g, &model, 5, cfg.seed).map_err(|e| e.to_string())?;
        ensure(r.gpnn_ratio > r.random_1hop_ratio, || {
            format!("{name}: pointer {:.4} <= random 1-hop {:.4}", r.gpnn_ratio, r.random_1hop_ratio)
        })?;
        out.push(format!("{name} {:.4} > {:.4}", r.gpnn_ratio, r.random_1hop_ratio));
    }
    Ok(out.join(", "))
}

fn criterion_8(data: &mut Data) -> Check {
    let cfg = data.tuned("chameleon", ModelKind::Gpnn)?.best_config;
    let (g, splits) = data.splits("chameleon")?;
    let table = oversmoothing_sweep(&g, &splits, &cfg, &[2, 8], &[ModelKind::Gpnn, ModelKind::Gcn])
        .map_err(|e| e.to_string())?;
    let decay = |kind| {
        table
            .get(kind, 8)
            .and_then(|row| row.rel_decay)
            .ok_or_else(|| format!("{} sweep incomplete", kind.as_str()))
    };
    let (dg, dc) = (decay(ModelKind::Gpnn)?, decay(ModelKind::Gcn)?);
    ensure(dg < dc && dc >= 0.10 && dg <= 0.10, || format!("decay gpnn {dg:.4}, gcn {dc:.4}"))?;
    Ok(format!("decay gpnn {dg:.4} < gcn {dc:.4}"))
}

fn main() {
    // Honour `cargo test -- --list` and filters passed to every test target.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut data = Data::new();
    let mut failed = Vec::new();
    let criteria: [(usize, &str, Box<dyn Fn(&mut Data) -> Check>); 9] = [
        (1, "gradient correctness", Box::new(|_| criterion_1())),
        (2, "dataset fidelity", Box::new(criterion_2)),
        (3, "sampler oracle equivalence", Box::new(|_| criterion_3())),
        (4, "webkb reproduction band", Box::new(criterion_4)),
        (5, "heterophily advantage ordering", Box::new(criterion_5)),
        (6, "chameleon band", Box::new(criterion_6)),
        (7, "ranked-homophily property", Box::new(criterion_7)),
        (8, "over-smoothing property", Box::new(criterion_8)),
        (9, "property suites", Box::new(|_| criterion_9())),
    ];
    for (id, title, run) in criteria {
        let start = Instant::now();
        let outcome = verdict(run(&mut data));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("criterion {id} ({title}): PASS [{secs:.1}s] {d}"),
            Outcome::Blocked(d) => println!("criterion {id} ({title}): FAIL [{secs:.1}s] {d}"),
            Outcome::Fail(d) => {
                println!("criterion {id} ({title}): FAIL [{secs:.1}s] {d}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("evaluated criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
