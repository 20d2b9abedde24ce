//! Datasets: on-disk formats, packaged directories, and synthetic graphs.
//!
//! A packaged dataset directory contains a CSR graph dump, feature and label
//! matrices (little-endian `f32` with JSON sidecars), newline-separated mask
//! files, and a manifest carrying counts plus a content digest so corruption
//! is detected on load.

use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{load_edge_list, Graph};

const GRAPH_FILE: &str = "graph.bin";
const MANIFEST_FILE: &str = "manifest.json";
const PAYLOAD_FILES: [&str; 8] = [
    "graph.bin",
    "features.bin",
    "features.json",
    "labels.bin",
    "labels.json",
    "train_mask.txt",
    "valid_mask.txt",
    "test_mask.txt",
];

/// Sidecar header describing a binary matrix file.
#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_nodes: usize,
    num_undirected_edges: usize,
    feature_dim: usize,
    num_classes: usize,
    digest: String,
}

/// Row-major `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<FeatureMatrix> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "feature_matrix",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

/// Write a matrix as little-endian `f32` bytes plus a JSON sidecar header.
pub fn write_matrix_file(bin_path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.values.len() * 4);
    for v in &m.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin_path, bytes).map_err(|e| Error::io(bin_path, e))?;
    let header = MatrixHeader {
        rows: m.rows,
        cols: m.cols,
        dtype: "f32".into(),
    };
    let text = serde_json::to_string(&header)
        .map_err(|e| Error::InvalidInput(format!("header serialization failed: {e}")))?;
    let sc = sidecar_path(bin_path);
    fs::write(&sc, text).map_err(|e| Error::io(&sc, e))?;
    Ok(())
}

/// Read a matrix written by [`write_matrix_file`], validating the sidecar.
pub fn read_matrix_file(bin_path: &Path) -> Result<FeatureMatrix> {
    let sc = sidecar_path(bin_path);
    let header_text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let header: MatrixHeader = serde_json::from_str(&header_text).map_err(|e| Error::Corrupt {
        path: sc.to_path_buf(),
        msg: format!("bad matrix header: {e}"),
    })?;
    if header.dtype != "f32" {
        return Err(Error::Corrupt {
            path: sc.to_path_buf(),
            msg: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let expected = header.rows * header.cols * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt {
            path: bin_path.to_path_buf(),
            msg: format!("{} bytes, header implies {expected}", bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(header.rows, header.cols, values)
}

/// Read newline-separated node ids; blank lines are skipped.
pub fn read_mask_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse::<usize>().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: format!("`{line}` is not a valid node id"),
        })?;
        ids.push(id);
    }
    Ok(ids)
}

pub fn write_mask_file(path: &Path, ids: &[usize]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_graph_file(path: &Path, g: &Graph) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(g.num_nodes() as u64).to_le_bytes());
    bytes.extend_from_slice(&(g.num_edges() as u64).to_le_bytes());
    for &o in g.row_offsets() {
        bytes.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in g.col_indices() {
        bytes.extend_from_slice(&(c as u64).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_graph_file(path: &Path) -> Result<Graph> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Corrupt {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let mut cursor = 0usize;
    let next_u64 = |bytes: &[u8], cursor: &mut usize| -> Result<u64> {
        let end = *cursor + 8;
        if end > bytes.len() {
            return Err(corrupt("truncated graph file"));
        }
        let v = u64::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
        *cursor = end;
        Ok(v)
    };
    let n = next_u64(&bytes, &mut cursor)? as usize;
    let e = next_u64(&bytes, &mut cursor)? as usize;
    let expected = 16 + 8 * (n + 1) + 8 * e;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "{} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut row_offsets = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_offsets.push(next_u64(&bytes, &mut cursor)? as usize);
    }
    let mut col_indices = Vec::with_capacity(e);
    for _ in 0..e {
        col_indices.push(next_u64(&bytes, &mut cursor)? as usize);
    }
    Graph::from_csr(n, row_offsets, col_indices)
}

/// Immutable node-classification dataset: graph, features, integer labels
/// (`-1` marks unlabeled nodes), and train/valid/test node masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: FeatureMatrix,
    pub labels: Vec<i64>,
    pub num_classes: usize,
    pub train_mask: Vec<usize>,
    pub valid_mask: Vec<usize>,
    pub test_mask: Vec<usize>,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols
    }

    /// Labels as class indices; unlabeled nodes map out of range so that any
    /// accidental use in a loss or accuracy computation fails validation.
    pub fn labels_as_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|&l| if l < 0 { self.num_classes } else { l as usize })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.features.rows != n {
            return Err(Error::InvalidInput(format!(
                "feature rows {} != node count {n}",
                self.features.rows
            )));
        }
        if self.labels.len() != n {
            return Err(Error::InvalidInput(format!(
                "label count {} != node count {n}",
                self.labels.len()
            )));
        }
        for &l in &self.labels {
            if l >= self.num_classes as i64 || l < -1 {
                return Err(Error::InvalidInput(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        for (name, mask) in [
            ("train", &self.train_mask),
            ("valid", &self.valid_mask),
            ("test", &self.test_mask),
        ] {
            for &i in mask.iter() {
                if i >= n {
                    return Err(Error::InvalidInput(format!(
                        "{name} mask id {i} out of range for {n} nodes"
                    )));
                }
                if self.labels[i] < 0 {
                    return Err(Error::InvalidInput(format!(
                        "{name} mask id {i} points at an unlabeled node"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Write the packaged directory layout and its manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_graph_file(&dir.join(GRAPH_FILE), &self.graph)?;
        write_matrix_file(&dir.join("features.bin"), &self.features)?;
        let label_matrix = FeatureMatrix::new(
            self.labels.len(),
            1,
            self.labels.iter().map(|&l| l as f32).collect(),
        )?;
        write_matrix_file(&dir.join("labels.bin"), &label_matrix)?;
        write_mask_file(&dir.join("train_mask.txt"), &self.train_mask)?;
        write_mask_file(&dir.join("valid_mask.txt"), &self.valid_mask)?;
        write_mask_file(&dir.join("test_mask.txt"), &self.test_mask)?;
        let manifest = Manifest {
            num_nodes: self.num_nodes(),
            num_undirected_edges: self.graph.undirected_edge_count(),
            feature_dim: self.feature_dim(),
            num_classes: self.num_classes,
            digest: payload_digest(dir)?,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidInput(format!("manifest serialization failed: {e}")))?;
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    /// Load a packaged directory, verifying the content digest and every
    /// count recorded in the manifest.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mp = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: mp.to_path_buf(),
            msg: format!("bad manifest: {e}"),
        })?;
        let digest = payload_digest(dir)?;
        if digest != manifest.digest {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                msg: format!(
                    "content digest mismatch: manifest {} vs computed {digest}",
                    manifest.digest
                ),
            });
        }
        let graph = read_graph_file(&dir.join(GRAPH_FILE))?;
        let features = read_matrix_file(&dir.join("features.bin"))?;
        let label_matrix = read_matrix_file(&dir.join("labels.bin"))?;
        if label_matrix.cols != 1 {
            return Err(Error::Corrupt {
                path: dir.join("labels.bin"),
                msg: format!("labels must have one column, found {}", label_matrix.cols),
            });
        }
        let labels = label_values_to_classes(&label_matrix.values, dir)?;
        let ds = Dataset {
            graph,
            features,
            labels,
            num_classes: manifest.num_classes,
            train_mask: read_mask_file(&dir.join("train_mask.txt"))?,
            valid_mask: read_mask_file(&dir.join("valid_mask.txt"))?,
            test_mask: read_mask_file(&dir.join("test_mask.txt"))?,
        };
        if ds.num_nodes() != manifest.num_nodes
            || ds.graph.undirected_edge_count() != manifest.num_undirected_edges
            || ds.feature_dim() != manifest.feature_dim
        {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                msg: "manifest counts disagree with payload files".into(),
            });
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn label_values_to_classes(values: &[f32], origin: &Path) -> Result<Vec<i64>> {
    values
        .iter()
        .map(|&v| {
            let r = v as f64;
            if !r.is_finite() || r.fract() != 0.0 || r < -1.0 {
                Err(Error::Corrupt {
                    path: origin.to_path_buf(),
                    msg: format!("label value {v} is not an integer class or -1"),
                })
            } else {
                Ok(r as i64)
            }
        })
        .collect()
}

fn payload_digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in PAYLOAD_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Raw input files for assembling a dataset from scratch.
pub struct IngestPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub mask_dir: PathBuf,
}

/// Assemble a [`Dataset`] from loose input files, cross-checking that every
/// piece agrees on the node count.
pub fn ingest(paths: &IngestPaths) -> Result<Dataset> {
    let features = read_matrix_file(&paths.features)?;
    let n = features.rows;
    let label_matrix = read_matrix_file(&paths.labels)?;
    if label_matrix.rows != n || label_matrix.cols != 1 {
        return Err(Error::InvalidInput(format!(
            "labels are {}x{} but features imply {n} nodes with one label each",
            label_matrix.rows, label_matrix.cols
        )));
    }
    let labels = label_values_to_classes(&label_matrix.values, &paths.labels)?;
    let num_classes = labels.iter().copied().max().unwrap_or(-1);
    if num_classes < 1 {
        return Err(Error::InvalidInput(
            "labels define fewer than two classes".into(),
        ));
    }
    let graph = load_edge_list(&paths.edges, n)?;
    let ds = Dataset {
        graph,
        features,
        labels,
        num_classes: (num_classes + 1) as usize,
        train_mask: read_mask_file(&paths.mask_dir.join("train_mask.txt"))?,
        valid_mask: read_mask_file(&paths.mask_dir.join("valid_mask.txt"))?,
        test_mask: read_mask_file(&paths.mask_dir.join("test_mask.txt"))?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parameters of the stochastic block model generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbmConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

/// Generate a planted-partition graph with class-conditional Gaussian
/// features and a deterministic 60/20/20 split.
///
/// Nodes are assigned to classes in contiguous blocks; an edge appears with
/// probability `p_in` inside a class and `p_out` across classes. Features
/// are the one-hot class mean plus `feature_noise`-scaled standard normal
/// noise. All randomness derives from `seed`.
pub fn synth_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.num_nodes < cfg.num_classes {
        return Err(Error::InvalidInput(format!(
            "{} nodes cannot host {} classes",
            cfg.num_nodes, cfg.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.p_in) || !(0.0..=1.0).contains(&cfg.p_out) || cfg.p_out >= cfg.p_in
    {
        return Err(Error::InvalidInput(format!(
            "probabilities must satisfy 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
            cfg.p_in, cfg.p_out
        )));
    }
    if cfg.feature_dim < cfg.num_classes {
        return Err(Error::InvalidInput(format!(
            "feature_dim {} cannot host one-hot means for {} classes",
            cfg.feature_dim, cfg.num_classes
        )));
    }
    if cfg.feature_noise < 0.0 {
        return Err(Error::InvalidInput("feature_noise must be non-negative".into()));
    }
    let n = cfg.num_nodes;
    let class_of: Vec<usize> = (0..n).map(|i| i * cfg.num_classes / n).collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if class_of[i] == class_of[j] {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_undirected_edges(n, &edges)?;

    let normal = StandardNormal;
    let mut values = vec![0.0f32; n * cfg.feature_dim];
    for i in 0..n {
        for j in 0..cfg.feature_dim {
            let mean = if j == class_of[i] { 1.0 } else { 0.0 };
            let z: f64 = normal.sample(&mut rng);
            values[i * cfg.feature_dim + j] = (mean + cfg.feature_noise * z) as f32;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = n * 6 / 10;
    let n_valid = n * 2 / 10;
    let train_mask = order[..n_train].to_vec();
    let valid_mask = order[n_train..n_train + n_valid].to_vec();
    let test_mask = order[n_train + n_valid..].to_vec();
    if train_mask.is_empty() || valid_mask.is_empty() || test_mask.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{n} nodes are too few for a 60/20/20 split"
        )));
    }

    let ds = Dataset {
        graph,
        features: FeatureMatrix::new(n, cfg.feature_dim, values)?,
        labels: class_of.iter().map(|&c| c as i64).collect(),
        num_classes: cfg.num_classes,
        train_mask,
        valid_mask,
        test_mask,
    };
    ds.validate()?;
    Ok(ds)
}
