//! Conversion from the Geom-GCN release layout (`out1_graph_edges.txt`,
//! `out1_node_feature_label.txt`, `*_split_*_<i>.npz`) into this crate's
//! dataset directory format.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use super::io::DatasetPaths;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConvertOptions {
    /// Directory holding `out1_graph_edges.txt` and `out1_node_feature_label.txt`.
    pub source_dir: PathBuf,
    /// Directory holding the ten `.npz` split masks; splits are skipped when absent.
    pub splits_dir: Option<PathBuf>,
    /// Only split files whose name starts with this prefix are used.
    pub split_prefix: Option<String>,
    /// Set when feature lines list active feature indices rather than dense
    /// values; `Some(0)` infers the dimension from the largest index.
    pub sparse_feature_dim: Option<usize>,
    pub output_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .filter(|(_, l)| !l.starts_with("node_id"))
}

pub fn convert_geom_gcn(opts: &ConvertOptions) -> Result<DatasetPaths> {
    std::fs::create_dir_all(&opts.output_dir).map_err(io_err(&opts.output_dir))?;
    let out = DatasetPaths::in_dir(&opts.output_dir);

    let edges_in = opts.source_dir.join("out1_graph_edges.txt");
    let text = std::fs::read_to_string(&edges_in).map_err(io_err(&edges_in))?;
    let mut edges = String::new();
    for (_, line) in data_lines(&text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        edges.push_str(&parts.join(" "));
        edges.push('\n');
    }
    std::fs::write(&out.edges, edges).map_err(io_err(&out.edges))?;

    let feats_in = opts.source_dir.join("out1_node_feature_label.txt");
    let text = std::fs::read_to_string(&feats_in).map_err(io_err(&feats_in))?;
    let rows: Vec<(usize, Vec<&str>)> = data_lines(&text)
        .map(|(n, l)| (n, l.split('\t').collect()))
        .collect();
    let mut ids = Vec::with_capacity(rows.len());
    let mut feats = String::new();
    let dim = match opts.sparse_feature_dim {
        Some(0) => Some(infer_sparse_dim(&rows, &feats_in)?),
        other => other,
    };
    for (lineno, fields) in &rows {
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: feats_in.clone(),
                line: *lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        ids.push(fields[0].trim().to_string());
        let dense = match dim {
            None => fields[1].trim().to_string(),
            Some(d) => {
                let mut v = vec!["0"; d];
                for idx in fields[1].split(',').filter(|s| !s.trim().is_empty()) {
                    let i: usize = idx.trim().parse().map_err(|_| Error::Parse {
                        path: feats_in.clone(),
                        line: *lineno,
                        msg: format!("bad feature index {idx:?}"),
                    })?;
                    if i >= d {
                        return Err(Error::Parse {
                            path: feats_in.clone(),
                            line: *lineno,
                            msg: format!("feature index {i} >= dimension {d}"),
                        });
                    }
                    v[i] = "1";
                }
                v.join(",")
            }
        };
        writeln!(feats, "{}\t{}\t{}", fields[0].trim(), dense, fields[2].trim()).unwrap();
    }
    std::fs::write(&out.features, feats).map_err(io_err(&out.features))?;

    if let Some(dir) = &opts.splits_dir {
        let files = split_files(dir, opts.split_prefix.as_deref())?;
        let mut json = Vec::with_capacity(files.len());
        for file in files {
            let masks = ["train_mask", "val_mask", "test_mask"]
                .iter()
                .map(|name| read_npz_mask(&file, name))
                .collect::<Result<Vec<_>>>()?;
            let pick = |mask: &[bool]| -> Result<Vec<u64>> {
                if mask.len() != ids.len() {
                    return Err(Error::Validation(format!(
                        "{}: mask length {} differs from {} nodes",
                        file.display(),
                        mask.len(),
                        ids.len()
                    )));
                }
                mask.iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| {
                        ids[i].parse::<u64>().map_err(|_| {
                            Error::Validation(format!("node id {:?} is not an integer", ids[i]))
                        })
                    })
                    .collect()
            };
            json.push(serde_json::json!({
                "train": pick(&masks[0])?,
                "val": pick(&masks[1])?,
                "test": pick(&masks[2])?,
            }));
        }
        std::fs::write(&out.splits, serde_json::to_string(&json)?).map_err(io_err(&out.splits))?;
    }
    Ok(out)
}

fn infer_sparse_dim(rows: &[(usize, Vec<&str>)], path: &Path) -> Result<usize> {
    let mut max = 0usize;
    for (lineno, fields) in rows {
        let Some(list) = fields.get(1) else { continue };
        for idx in list.split(',').filter(|s| !s.trim().is_empty()) {
            let i: usize = idx.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: *lineno,
                msg: format!("bad feature index {idx:?}"),
            })?;
            max = max.max(i + 1);
        }
    }
    Ok(max)
}

fn split_files(dir: &Path, prefix: Option<&str>) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.ends_with(".npz") || prefix.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let stem = name.trim_end_matches(".npz");
        if let Some(i) = stem.rsplit('_').next().and_then(|s| s.parse::<usize>().ok()) {
            found.push((i, path));
        }
    }
    found.sort();
    if found.len() != super::NUM_SPLITS {
        return Err(Error::Validation(format!(
            "{}: expected {} split files, found {}",
            dir.display(),
            super::NUM_SPLITS,
            found.len()
        )));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn read_npz_mask(path: &Path, name: &str) -> Result<Vec<bool>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut archive = zip::ZipArchive::new(file)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let mut entry = archive
        .by_name(&format!("{name}.npy"))
        .map_err(|e| Error::Validation(format!("{}: {name}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    entry.read_to_end(&mut bytes).map_err(io_err(path))?;
    parse_npy_mask(&bytes).map_err(|msg| Error::Validation(format!("{}: {name}: {msg}", path.display())))
}

/// Decodes a one-dimensional `.npy` array as a boolean mask (nonzero = true).
pub(crate) fn parse_npy_mask(bytes: &[u8]) -> std::result::Result<Vec<bool>, String> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err("not an npy array".into());
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err("truncated header".into());
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(format!("unsupported npy version {v}")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + header_len).ok_or("truncated header")?)
        .map_err(|_| "header is not utf-8")?;
    if header.contains("'fortran_order': True") {
        return Err("fortran order unsupported".into());
    }
    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|s| s.split('\'').nth(1))
        .ok_or("missing descr")?;
    let width = match &descr[1..] {
        "b1" | "u1" | "i1" => 1,
        "i2" | "u2" => 2,
        "i4" | "u4" | "f4" => 4,
        "i8" | "u8" | "f8" => 8,
        other => return Err(format!("unsupported dtype {other}")),
    };
    if descr.starts_with('>') && width > 1 {
        return Err("big-endian arrays unsupported".into());
    }
    let payload = &bytes[start + header_len..];
    if payload.len() % width != 0 {
        return Err("payload length not a multiple of the element width".into());
    }
    Ok(payload
        .chunks(width)
        .map(|c| c.iter().any(|&b| b != 0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn npy_bool(mask: &[bool]) -> Vec<u8> {
        let mut header = format!(
            "{{'descr': '|b1', 'fortran_order': False, 'shape': ({},), }}",
            mask.len()
        );
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend((header.len() as u16).to_le_bytes());
        out.extend(header.bytes());
        out.extend(mask.iter().map(|&b| b as u8));
        out
    }

    #[test]
    fn npy_round_trip() {
        let mask = [true, false, false, true];
        assert_eq!(parse_npy_mask(&npy_bool(&mask)).unwrap(), mask);
        assert!(parse_npy_mask(b"garbage").is_err());
    }

    #[test]
    fn converts_release_layout() {
        let src = tempfile::tempdir().unwrap();
        std::fs::write(
            src.path().join("out1_graph_edges.txt"),
            "node_id\tnode_id\n0\t1\n1\t2\n",
        )
        .unwrap();
        std::fs::write(
            src.path().join("out1_node_feature_label.txt"),
            "node_id\tfeature\tlabel\n0\t0,2\t1\n1\t1\t0\n2\t\t1\n",
        )
        .unwrap();
        for i in 0..10 {
            let path = src.path().join(format!("toy_split_0.6_0.2_{i}.npz"));
            let mut zip = zip::ZipWriter::new(File::create(path).unwrap());
            let opts = zip::write::SimpleFileOptions::default()
                .compression_method(zip::CompressionMethod::Stored);
            for (name, mask) in [
                ("train_mask", [true, false, false]),
                ("val_mask", [false, true, false]),
                ("test_mask", [false, false, true]),
            ] {
                zip.start_file(format!("{name}.npy"), opts).unwrap();
                zip.write_all(&npy_bool(&mask)).unwrap();
            }
            zip.finish().unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let paths = convert_geom_gcn(&ConvertOptions {
            source_dir: src.path().to_path_buf(),
            splits_dir: Some(src.path().to_path_buf()),
            split_prefix: Some("toy".into()),
            sparse_feature_dim: Some(0),
            output_dir: out.path().to_path_buf(),
        })
        .unwrap();
        let g = crate::graph::load_dataset(&paths.edges, &paths.features).unwrap();
        assert_eq!((g.num_nodes(), g.num_features(), g.num_edges()), (3, 3, 2));
        assert_eq!(g.features().row(0), &[1.0, 0.0, 1.0]);
        let splits = crate::graph::load_splits(&paths.splits, &g).unwrap();
        assert_eq!(splits[4].test, vec![2]);
    }
}
