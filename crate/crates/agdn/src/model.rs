//! The full L-layer network: stacked diffusion layers with inter-layer
//! batch normalization and rectification, input/hidden dropout, optional
//! label-augmented inputs, and a binary checkpoint format.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{layer_forward, HeadParams, LayerConfig, LayerParams, Variant};
use crate::ops::{batch_norm, dropout, relu};
use crate::tensor::{Tape, Tensor};

/// Network architecture and regularization settings.
///
/// Defaults follow the reference hyperparameters for the citation-graph
/// task; desk-scale runs typically override most of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Layer count L.
    pub layers: usize,
    /// Diffusion hops K per layer.
    pub hops: usize,
    /// Attention heads M per layer.
    pub heads: usize,
    pub hidden_dim: usize,
    /// Set from the dataset before building parameters.
    pub feature_dim: usize,
    /// Set from the dataset before building parameters.
    pub num_classes: usize,
    pub dropout: f64,
    pub input_drop: f64,
    pub attn_drop: f64,
    pub use_labels: bool,
    pub leaky_slope: f64,
    /// Apply `attn_drop` to hop-attention weights as well as edge weights.
    pub attn_drop_on_hops: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::GcnHa,
            layers: 3,
            hops: 3,
            heads: 1,
            hidden_dim: 256,
            feature_dim: 0,
            num_classes: 0,
            dropout: 0.5,
            input_drop: 0.1,
            attn_drop: 0.05,
            use_labels: false,
            leaky_slope: 0.2,
            attn_drop_on_hops: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.heads < 1 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        if self.layers > 1 && self.hidden_dim < 1 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("input_drop", self.input_drop),
            ("attn_drop", self.attn_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Width of the network input: features plus one-hot label columns when
    /// label augmentation is enabled.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + if self.use_labels { self.num_classes } else { 0 }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let d_in = if l == 0 { self.input_dim() } else { self.hidden_dim };
                let d_out = if l + 1 == self.layers {
                    self.num_classes
                } else {
                    self.hidden_dim
                };
                (d_in, d_out)
            })
            .collect()
    }

    fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            variant: self.variant,
            hops: self.hops,
            leaky_slope: self.leaky_slope,
            attn_drop: self.attn_drop,
            attn_drop_on_hops: self.attn_drop_on_hops,
        }
    }

    /// Stable digest of the architecture, used to pair checkpoints with the
    /// configuration that produced them.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Per-layer normalization state: trainable scale/shift plus running
/// statistics used in inference mode.
#[derive(Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    fn new(dim: usize) -> BatchNormState {
        let gamma = Tensor::filled(1, dim, 1.0);
        gamma.set_requires_grad(true);
        let beta = Tensor::zeros(1, dim);
        beta.set_requires_grad(true);
        BatchNormState {
            gamma,
            beta,
            running_mean: Tensor::zeros(1, dim),
            running_var: Tensor::filled(1, dim, 1.0),
        }
    }
}

/// All tensors of a model: one [`LayerParams`] per layer and one
/// normalization state per non-final layer.
#[derive(Clone)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    pub norms: Vec<BatchNormState>,
}

impl ModelParams {
    /// Trainable tensors with stable names.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w"), head.w.clone()));
                out.push((format!("layer{l}.head{h}.a_hw"), head.a_hw.clone()));
                if let Some(ae) = &head.a_edge {
                    out.push((format!("layer{l}.head{h}.a_edge"), ae.clone()));
                }
            }
            out.push((format!("layer{l}.w_r"), layer.w_r.clone()));
        }
        for (l, norm) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.gamma"), norm.gamma.clone()));
            out.push((format!("norm{l}.beta"), norm.beta.clone()));
        }
        out
    }

    /// Non-trainable running statistics, included in checkpoints.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, norm) in self.norms.iter().enumerate() {
            out.push((format!("norm{l}.running_mean"), norm.running_mean.clone()));
            out.push((format!("norm{l}.running_var"), norm.running_var.clone()));
        }
        out
    }

    /// Copy with fresh storage, detached from this instance.
    pub fn deep_clone(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|layer| LayerParams {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            w: h.w.deep_clone(),
                            a_hw: h.a_hw.deep_clone(),
                            a_edge: h.a_edge.as_ref().map(Tensor::deep_clone),
                        })
                        .collect(),
                    w_r: layer.w_r.deep_clone(),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| BatchNormState {
                    gamma: n.gamma.deep_clone(),
                    beta: n.beta.deep_clone(),
                    running_mean: n.running_mean.deep_clone(),
                    running_var: n.running_var.deep_clone(),
                })
                .collect(),
        }
    }

    /// Copy values and running statistics from another instance with the
    /// same shapes.
    pub fn copy_from(&self, other: &ModelParams) -> Result<()> {
        let mine = [self.named_params(), self.named_buffers()].concat();
        let theirs = [other.named_params(), other.named_buffers()].concat();
        if mine.len() != theirs.len() {
            return Err(Error::shape("copy_params", "parameter sets differ"));
        }
        for ((name_a, a), (name_b, b)) in mine.iter().zip(&theirs) {
            if name_a != name_b {
                return Err(Error::shape("copy_params", "parameter names differ"));
            }
            a.set_values(&b.values())?;
        }
        Ok(())
    }
}

fn glorot(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let t = Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
    )
    .unwrap();
    t.set_requires_grad(true);
    t
}

/// Deterministic parameter initialization: uniform Glorot for all linear
/// and attention weights, unit scale / zero shift for normalization.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut norms = Vec::new();
    for (l, (d_in, d_out)) in cfg.layer_dims().into_iter().enumerate() {
        let heads = (0..cfg.heads)
            .map(|_| HeadParams {
                w: glorot(&mut rng, d_in, d_out),
                a_hw: glorot(&mut rng, 2 * d_out, 1),
                a_edge: match cfg.variant {
                    Variant::GatHa => Some(glorot(&mut rng, 2 * d_out, 1)),
                    Variant::GcnHa => None,
                },
            })
            .collect();
        layers.push(LayerParams {
            heads,
            w_r: glorot(&mut rng, d_in, d_out),
        });
        if l + 1 < cfg.layers {
            norms.push(BatchNormState::new(d_out));
        }
    }
    Ok(ModelParams { layers, norms })
}

/// Append one-hot label columns to the feature matrix.
///
/// Rows listed as exposed receive their label's one-hot encoding; every
/// other row receives zero columns, so labels can never leak through
/// unexposed rows.
pub fn augment_with_labels(
    features: &Tensor,
    labels: &[i64],
    exposed: &[bool],
    num_classes: usize,
) -> Result<Tensor> {
    let (n, d) = features.shape();
    if labels.len() != n || exposed.len() != n {
        return Err(Error::shape(
            "augment_with_labels",
            format!("{} labels / {} flags for {n} rows", labels.len(), exposed.len()),
        ));
    }
    let fv = features.values();
    let width = d + num_classes;
    let mut values = vec![0.0; n * width];
    for i in 0..n {
        values[i * width..i * width + d].copy_from_slice(&fv[i * d..(i + 1) * d]);
        if exposed[i] {
            let label = labels[i];
            if label < 0 || label >= num_classes as i64 {
                return Err(Error::InvalidInput(format!(
                    "exposed node {i} has no usable label ({label})"
                )));
            }
            values[i * width + d + label as usize] = 1.0;
        }
    }
    Tensor::new(n, width, values)
}

/// Result of a model forward pass.
pub struct ForwardOutput {
    /// Pre-softmax class scores, `N x C`.
    pub logits: Tensor,
    /// Which nodes had their labels exposed to the input (label
    /// augmentation only).
    pub exposed: Option<Vec<bool>>,
}

fn label_exposure<R: Rng>(ds: &Dataset, training: bool, rng: &mut R) -> Vec<bool> {
    let mut exposed = vec![false; ds.num_nodes()];
    if training {
        for &i in &ds.train_mask {
            exposed[i] = rng.random::<f64>() < 0.5;
        }
    } else {
        for &i in &ds.train_mask {
            exposed[i] = true;
        }
    }
    exposed
}

/// Full network forward pass.
///
/// Training mode samples label exposure (when enabled), applies input and
/// hidden dropout, and updates normalization running statistics; inference
/// mode is deterministic and leaves all state untouched. Returns raw logits
/// — the softmax is folded into the loss.
pub fn forward<R: Rng>(
    tape: &Tape,
    ds: &Dataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if cfg.feature_dim != ds.feature_dim() || cfg.num_classes != ds.num_classes {
        return Err(Error::Config(format!(
            "model built for {}d features / {} classes, dataset has {}d / {}",
            cfg.feature_dim,
            cfg.num_classes,
            ds.feature_dim(),
            ds.num_classes
        )));
    }
    if params.layers.len() != cfg.layers {
        return Err(Error::shape(
            "forward",
            format!("{} layer params for {} layers", params.layers.len(), cfg.layers),
        ));
    }
    let features = Tensor::new(ds.num_nodes(), ds.feature_dim(), ds.features.to_f64())?;
    let (mut h, exposed) = if cfg.use_labels {
        let exposed = label_exposure(ds, training, rng);
        let x = augment_with_labels(&features, &ds.labels, &exposed, cfg.num_classes)?;
        (x, Some(exposed))
    } else {
        (features, None)
    };
    if training && cfg.input_drop > 0.0 {
        h = dropout(tape, &h, cfg.input_drop, rng)?;
    }
    let lcfg = cfg.layer_config();
    for (l, layer) in params.layers.iter().enumerate() {
        h = layer_forward(tape, &ds.graph, &h, layer, &lcfg, training, rng)?;
        if l + 1 < cfg.layers {
            let norm = &params.norms[l];
            h = batch_norm(
                tape,
                &h,
                &norm.gamma,
                &norm.beta,
                &norm.running_mean,
                &norm.running_var,
                training,
                0.1,
                1e-5,
            )?;
            h = relu(tape, &h)?;
            if training && cfg.dropout > 0.0 {
                h = dropout(tape, &h, cfg.dropout, rng)?;
            }
        }
    }
    Ok(ForwardOutput { logits: h, exposed })
}

const CHECKPOINT_MAGIC: &str = "agdn-checkpoint v1";

/// Write parameters and running statistics to a single binary file: a text
/// header line carrying the config digest, then one record per tensor as
/// `(name length, name, rows, cols, f32 little-endian payload)`.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(format!("{CHECKPOINT_MAGIC} digest={}\n", cfg.digest()).as_bytes());
    let mut tensors = params.named_params();
    tensors.extend(params.named_buffers());
    for (name, t) in tensors {
        bytes.extend_from_slice(&(name.len() as u64).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_checkpoint`], verifying the config
/// digest and that the records exactly cover the expected tensor set.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| corrupt("header is not valid UTF-8".into()))?;
    let expected_prefix = format!("{CHECKPOINT_MAGIC} digest=");
    let Some(digest) = header.strip_prefix(&expected_prefix) else {
        return Err(corrupt(format!("unrecognized header `{header}`")));
    };
    if digest != cfg.digest() {
        return Err(Error::Config(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let params = init_params(cfg, 0)?;
    let mut expected: std::collections::BTreeMap<String, Tensor> = params
        .named_params()
        .into_iter()
        .chain(params.named_buffers())
        .collect();
    let mut cursor = newline + 1;
    let read_u64 = |bytes: &[u8], cursor: &mut usize| -> Result<u64> {
        let end = *cursor + 8;
        if end > bytes.len() {
            return Err(corrupt("truncated record".into()));
        }
        let v = u64::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
        *cursor = end;
        Ok(v)
    };
    while cursor < bytes.len() {
        let name_len = read_u64(&bytes, &mut cursor)? as usize;
        if cursor + name_len > bytes.len() {
            return Err(corrupt("truncated tensor name".into()));
        }
        let name = std::str::from_utf8(&bytes[cursor..cursor + name_len])
            .map_err(|_| corrupt("tensor name is not valid UTF-8".into()))?
            .to_string();
        cursor += name_len;
        let rows = read_u64(&bytes, &mut cursor)? as usize;
        let cols = read_u64(&bytes, &mut cursor)? as usize;
        let payload = rows * cols * 4;
        if cursor + payload > bytes.len() {
            return Err(corrupt(format!("truncated payload for `{name}`")));
        }
        let values: Vec<f64> = bytes[cursor..cursor + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        cursor += payload;
        let target = expected
            .remove(&name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{name}`")))?;
        if target.shape() != (rows, cols) {
            return Err(corrupt(format!(
                "tensor `{name}` is {rows}x{cols}, expected {:?}",
                target.shape()
            )));
        }
        target.set_values(&values)?;
    }
    if let Some(name) = expected.keys().next() {
        return Err(corrupt(format!("checkpoint is missing tensor `{name}`")));
    }
    Ok(params)
}
