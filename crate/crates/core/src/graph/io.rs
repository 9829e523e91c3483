use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Conventional file names inside a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub splits: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            edges: dir.join("edges.txt"),
            features: dir.join("features.tsv"),
            splits: dir.join("splits.json"),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads an edge list and a features file into a [`Graph`].
///
/// Node ids are remapped to `[0, N)` in features-file order; the number of
/// classes is the largest label plus one.
pub fn load_dataset(edges_path: &Path, features_path: &Path) -> Result<Graph> {
    let text = read(features_path)?;
    let mut ids = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;

    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                features_path,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(features_path, lineno, format!("bad node id {:?}", fields[0])))?;
        let row = fields[1]
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(features_path, lineno, format!("bad feature value: {e}")))?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(features_path, lineno, "non-finite feature value"));
        }
        let label: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(features_path, lineno, format!("bad label {:?}", fields[2])))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    features_path,
                    lineno,
                    format!("expected {w} features, found {}", row.len()),
                ))
            }
            _ => {}
        }
        if index.insert(id, ids.len()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        ids.push(id);
        labels.push(label);
        data.extend(row);
    }
    let width = width.ok_or_else(|| parse_err(features_path, 0, "no nodes"))?;
    let features = Tensor::new(vec![ids.len(), width], data)?;

    let text = read(edges_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(
                edges_path,
                lineno,
                format!("expected 2 node ids, found {}", parts.len()),
            ));
        }
        let mut ends = [0usize; 2];
        for (slot, raw) in ends.iter_mut().zip(&parts) {
            let id: u64 = raw
                .parse()
                .map_err(|_| parse_err(edges_path, lineno, format!("bad node id {raw:?}")))?;
            *slot = *index.get(&id).ok_or_else(|| {
                Error::Reference(format!(
                    "{}:{lineno}: edge endpoint {id} is not in the features file",
                    edges_path.display()
                ))
            })?;
        }
        edges.push((ends[0], ends[1]));
    }
    Graph::from_parts(ids, features, labels, edges)
}

/// Writes `g` in the formats read by [`load_dataset`], using original ids.
pub fn write_dataset(g: &Graph, edges_path: &Path, features_path: &Path) -> Result<()> {
    let ids = g.original_ids();
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        writeln!(edges, "{} {}", ids[u], ids[v]).unwrap();
    }
    for &v in g.self_loops() {
        writeln!(edges, "{} {}", ids[v], ids[v]).unwrap();
    }
    std::fs::write(edges_path, edges).map_err(|e| Error::io(edges_path, e))?;

    let mut feats = String::new();
    for v in 0..g.num_nodes() {
        write!(feats, "{}\t", ids[v]).unwrap();
        for (j, x) in g.features().row(v).iter().enumerate() {
            if j > 0 {
                feats.push(',');
            }
            write!(feats, "{x}").unwrap();
        }
        writeln!(feats, "\t{}", g.labels()[v]).unwrap();
    }
    std::fs::write(features_path, feats).map_err(|e| Error::io(features_path, e))
}

/// Sidecar mapping of `<original_id> <dense_id>` lines.
pub fn write_id_map(g: &Graph, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (dense, orig) in g.original_ids().iter().enumerate() {
        writeln!(out, "{orig} {dense}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
