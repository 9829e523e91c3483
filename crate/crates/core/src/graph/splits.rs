use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

pub const NUM_SPLITS: usize = 10;

/// One train/validation/test partition over dense node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub split_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSplit {
    train: Vec<u64>,
    val: Vec<u64>,
    test: Vec<u64>,
}

impl SplitSet {
    /// Checks the three parts are non-empty, in range and pairwise disjoint.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![0u8; num_nodes];
        for (tag, part) in [(1u8, &self.train), (2, &self.val), (4, &self.test)] {
            if part.is_empty() {
                return Err(Error::Validation(format!(
                    "split {}: empty {} part",
                    self.split_id,
                    part_name(tag)
                )));
            }
            for &i in part {
                if i >= num_nodes {
                    return Err(Error::Reference(format!(
                        "split {}: index {i} outside [0, {num_nodes})",
                        self.split_id
                    )));
                }
                if seen[i] != 0 {
                    return Err(Error::Validation(format!(
                        "split {}: node {i} appears in both {} and {}",
                        self.split_id,
                        part_name(seen[i]),
                        part_name(tag)
                    )));
                }
                seen[i] = tag;
            }
        }
        Ok(())
    }
}

fn part_name(tag: u8) -> &'static str {
    match tag {
        1 => "train",
        2 => "val",
        _ => "test",
    }
}

/// Reads a JSON array of exactly ten `{train, val, test}` objects. Indices are
/// the original node ids used in the dataset files.
pub fn load_splits(path: &Path, g: &Graph) -> Result<Vec<SplitSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawSplit> = serde_json::from_str(&text)?;
    if raw.len() != NUM_SPLITS {
        return Err(Error::Validation(format!(
            "{}: expected {NUM_SPLITS} splits, found {}",
            path.display(),
            raw.len()
        )));
    }
    let index: HashMap<u64, usize> = g
        .original_ids()
        .iter()
        .enumerate()
        .map(|(dense, &orig)| (orig, dense))
        .collect();
    let map = |split_id: usize, ids: Vec<u64>| -> Result<Vec<usize>> {
        ids.into_iter()
            .map(|id| {
                index.get(&id).copied().ok_or_else(|| {
                    Error::Reference(format!("split {split_id}: node id {id} not in graph"))
                })
            })
            .collect()
    };
    raw.into_iter()
        .enumerate()
        .map(|(split_id, r)| {
            let split = SplitSet {
                split_id,
                train: map(split_id, r.train)?,
                val: map(split_id, r.val)?,
                test: map(split_id, r.test)?,
            };
            split.validate(g.num_nodes())?;
            Ok(split)
        })
        .collect()
}

pub fn write_splits(path: &Path, splits: &[SplitSet], g: &Graph) -> Result<()> {
    let ids = g.original_ids();
    let to_ids = |part: &[usize]| part.iter().map(|&i| ids[i]).collect::<Vec<_>>();
    let raw: Vec<RawSplit> = splits
        .iter()
        .map(|s| RawSplit {
            train: to_ids(&s.train),
            val: to_ids(&s.val),
            test: to_ids(&s.test),
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&raw)?).map_err(|e| Error::io(path, e))
}

/// Ten seeded random partitions with the given train/val/test fractions.
/// No per-class stratification is applied.
pub fn generate_splits(g: &Graph, fractions: (f64, f64, f64), seed: u64) -> Result<Vec<SplitSet>> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = g.num_nodes();
    if (n as f64) * ft.min(fv).min(fs) < 1.0 {
        return Err(Error::Validation(format!(
            "{n} nodes are too few for fractions {fractions:?}"
        )));
    }
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train + n_val >= n {
        return Err(Error::Validation("rounded split leaves no test nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    (0..NUM_SPLITS)
        .map(|split_id| {
            order.shuffle(&mut rng);
            let mut train = order[..n_train].to_vec();
            let mut val = order[n_train..n_train + n_val].to_vec();
            let mut test = order[n_train + n_val..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            test.sort_unstable();
            Ok(SplitSet {
                split_id,
                train,
                val,
                test,
            })
        })
        .collect()
}
