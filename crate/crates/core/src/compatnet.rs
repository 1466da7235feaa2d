//! The judgment network.
//!
//! Architecture: each of the five factors gets its own three-layer MLP
//! (the "intra" branch) that fuses the top and bottom garment features for
//! that factor by concatenation. The five branch outputs are concatenated
//! into the compatibility feature `x`, and a final three-layer MLP (the
//! "inter" head) maps `x` to logits over (good, normal, bad). Relu sits
//! between layers; the last layer of each MLP is linear, so `x` carries
//! signed pre-activations — downstream attribution applies its own relu.
//!
//! The slice of `x` a factor occupies is fixed by construction, and the
//! reason buckets are ranges over those slices: color and print map to
//! their own segments, while material, silhouette, and detail fuse into
//! one contiguous "design" segment. That partition is what lets gradient
//! attribution point at a factor.
//!
//! Forward passes are built on a [`Graph`] so `∂y_j/∂x_i` exists; a batched
//! variant lays samples out as matrix columns and is bitwise identical to
//! the per-sample pass (same accumulation order), just much faster.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Shape, Tensor, VarHandle};
use crate::record::{FactorKind, FeatureDims, Judgment, OutfitRecord, Reason};

pub const JUDGMENT_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature dims {got:?} do not match model dims {expected:?}")]
    DimMismatch { expected: [usize; 5], got: [usize; 5] },
    #[error("batch must contain at least one record")]
    EmptyBatch,
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has trailing data")]
    TrailingData,
    #[error("checkpoint config: {0}")]
    ConfigEntry(String),
}

/// Network dimensions. Defaults follow the standard setup: intra branches
/// `2·d_in → 64 → 64 → 32` and inter head `160 → 64 → 32 → 3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dims: FeatureDims,
    pub intra_hidden: [usize; 2],
    pub intra_out: usize,
    pub inter_hidden: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dims: FeatureDims::default(),
            intra_hidden: [64, 64],
            intra_out: 32,
            inter_hidden: [64, 32],
        }
    }
}

impl ModelConfig {
    /// Length of the compatibility feature `x`.
    pub fn x_dim(&self) -> usize {
        FactorKind::ALL.len() * self.intra_out
    }

    /// Input width of a factor's intra branch (top and bottom concatenated).
    pub fn intra_input_dim(&self, factor: FactorKind) -> usize {
        2 * self.feature_dims.get(factor)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut dims = vec![self.intra_hidden[0], self.intra_hidden[1], self.intra_out];
        dims.extend(self.inter_hidden);
        dims.extend(self.feature_dims.as_array());
        if dims.iter().any(|d| *d == 0) {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(rows, cols)` of the three intra layers for one factor.
    fn intra_layer_dims(&self, factor: FactorKind) -> [(usize, usize); 3] {
        let d_in = self.intra_input_dim(factor);
        let [h1, h2] = self.intra_hidden;
        [(h1, d_in), (h2, h1), (self.intra_out, h2)]
    }

    /// `(rows, cols)` of the three inter layers.
    fn inter_layer_dims(&self) -> [(usize, usize); 3] {
        let [h1, h2] = self.inter_hidden;
        [(h1, self.x_dim()), (h2, h1), (JUDGMENT_CLASSES, h2)]
    }

    /// Index layout of `x`: which slice each factor occupies and which
    /// slice each reason bucket covers.
    pub fn partition(&self) -> FactorPartition {
        let w = self.intra_out;
        let segment = |i: usize| i * w..(i + 1) * w;
        FactorPartition {
            factor_segments: [segment(0), segment(1), segment(2), segment(3), segment(4)],
            // Material, silhouette, and detail are adjacent by construction,
            // so the design bucket is one contiguous range.
            design: segment(2).start..segment(4).end,
        }
    }
}

/// Index sets over the compatibility feature `x`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorPartition {
    factor_segments: [Range<usize>; 5],
    design: Range<usize>,
}

impl FactorPartition {
    pub fn factor_segment(&self, factor: FactorKind) -> Range<usize> {
        self.factor_segments[factor.index()].clone()
    }

    /// The slice of `x` attributed to a reason bucket.
    pub fn reason_segment(&self, reason: Reason) -> Range<usize> {
        match reason {
            Reason::Color => self.factor_segments[FactorKind::Color.index()].clone(),
            Reason::Print => self.factor_segments[FactorKind::Print.index()].clone(),
            Reason::Design => self.design.clone(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.factor_segments.iter().map(|r| r.len()).sum()
    }

    /// Build a custom layout directly from per-factor segments. Segments
    /// must tile the feature vector contiguously in factor order (so the
    /// design range stays a single slice), and the color, print, and
    /// combined design segments must be non-empty.
    pub fn from_segments(factor_segments: [Range<usize>; 5]) -> Result<Self, ModelError> {
        let mut expected = 0;
        for (factor, seg) in FactorKind::ALL.into_iter().zip(&factor_segments) {
            if seg.start != expected || seg.end < seg.start {
                return Err(ModelError::InvalidConfig(format!(
                    "segment {seg:?} for {factor} does not start at offset {expected}"
                )));
            }
            expected = seg.end;
        }
        let design = factor_segments[FactorKind::Material.index()].start..expected;
        let partition = FactorPartition { factor_segments, design };
        for reason in Reason::ALL {
            if partition.reason_segment(reason).is_empty() {
                return Err(ModelError::InvalidConfig(format!(
                    "segment for reason {reason} is empty"
                )));
            }
        }
        Ok(partition)
    }
}

/// One dense layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A three-layer MLP: relu after layers 1 and 2, identity after layer 3.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

/// The full judgment network.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatModel {
    pub config: ModelConfig,
    /// Intra branches in [`FactorKind::ALL`] order.
    pub intra: [MlpParams; 5],
    pub inter: MlpParams,
}

impl CompatModel {
    /// All parameter tensors in declared order: intra branches in factor
    /// order, then the inter head; within an MLP, weight before bias,
    /// layer by layer. Checkpoints and SGD both walk this order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for mlp in self.intra.iter().chain(std::iter::once(&self.inter)) {
            for layer in &mlp.layers {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for mlp in self.intra.iter_mut().chain(std::iter::once(&mut self.inter)) {
            for layer in &mut mlp.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.shape().numel()).sum()
    }
}

/// Initialize a model from a seed, drawing in declared parameter order so
/// the same `(config, seed)` always yields bitwise-identical parameters.
/// Weights are uniform on `±sqrt(6/fan_in)`; biases get a small jitter
/// instead of zeros.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<CompatModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make_mlp = |dims: [(usize, usize); 3]| -> MlpParams {
        let mut layers = Vec::with_capacity(3);
        for (rows, cols) in dims {
            // Variance-preserving scale for relu stacks; anything tamer
            // lets the narrow layers shrink activations until weight decay
            // pins the whole net at the constant predictor.
            let bound = (6.0 / cols as f64).sqrt();
            let weight: Vec<f64> =
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            // Exact zeros would park a unit's pre-activation exactly on
            // the relu kink whenever the previous layer goes dead, and a
            // kink is a place derivatives are better off not probing.
            let bias: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.01..0.01)).collect();
            layers.push(LayerParams {
                weight: Tensor::matrix(rows, cols, weight),
                bias: Tensor::vector(bias),
            });
        }
        MlpParams { layers }
    };
    let intra = FactorKind::ALL.map(|f| make_mlp(config.intra_layer_dims(f)));
    let inter = make_mlp(config.inter_layer_dims());
    Ok(CompatModel { config: *config, intra, inter })
}

/// Graph handles for every parameter, in model layout.
pub struct ModelVars {
    pub intra: [[(VarHandle, VarHandle); 3]; 5],
    pub inter: [(VarHandle, VarHandle); 3],
}

impl ModelVars {
    /// Flattened handles in declared parameter order.
    pub fn all(&self) -> Vec<VarHandle> {
        let mut out = Vec::with_capacity(self.intra.len() * 6 + 6);
        for mlp in self.intra.iter().chain(std::iter::once(&self.inter)) {
            for (w, b) in mlp {
                out.push(*w);
                out.push(*b);
            }
        }
        out
    }
}

/// Insert all model parameters into a graph as differentiable variables.
pub fn insert_params(g: &mut Graph, model: &CompatModel) -> Result<ModelVars, ModelError> {
    let insert_mlp = |g: &mut Graph, mlp: &MlpParams| -> Result<[(VarHandle, VarHandle); 3], ModelError> {
        let mut out = Vec::with_capacity(3);
        for layer in &mlp.layers {
            let w = g.variable(layer.weight.clone())?;
            let b = g.variable(layer.bias.clone())?;
            out.push((w, b));
        }
        Ok([out[0], out[1], out[2]])
    };
    let mut intra = Vec::with_capacity(5);
    for mlp in &model.intra {
        intra.push(insert_mlp(g, mlp)?);
    }
    let inter = insert_mlp(g, &model.inter)?;
    Ok(ModelVars { intra: [intra[0], intra[1], intra[2], intra[3], intra[4]], inter })
}

fn check_dims(model: &CompatModel, top: &crate::record::FactorFeatureSet, bottom: &crate::record::FactorFeatureSet) -> Result<(), ModelError> {
    let expected = model.config.feature_dims.as_array();
    for garment in [top, bottom] {
        if garment.dims() != expected {
            return Err(ModelError::DimMismatch { expected, got: garment.dims() });
        }
    }
    Ok(())
}

pub(crate) fn mlp_forward_vec(
    g: &mut Graph,
    vars: &[(VarHandle, VarHandle); 3],
    input: VarHandle,
) -> Result<VarHandle, ModelError> {
    let mut h = input;
    for (i, (w, b)) in vars.iter().enumerate() {
        let z = g.matvec(*w, h)?;
        let a = g.add(z, *b)?;
        h = if i + 1 < vars.len() { g.relu(a)? } else { a };
    }
    Ok(h)
}

pub(crate) fn mlp_forward_mat(
    g: &mut Graph,
    vars: &[(VarHandle, VarHandle); 3],
    input: VarHandle,
    ones_batch: VarHandle,
) -> Result<VarHandle, ModelError> {
    let mut h = input;
    for (i, (w, b)) in vars.iter().enumerate() {
        let z = g.matmul(*w, h)?;
        let bias_mat = g.outer(*b, ones_batch)?;
        let a = g.add(z, bias_mat)?;
        h = if i + 1 < vars.len() { g.relu(a)? } else { a };
    }
    Ok(h)
}

/// A forward pass over one outfit: the compatibility feature `x`, the
/// judgment logits `y`, and handles to the parameters that produced them.
pub struct ForwardPass {
    pub x: VarHandle,
    pub y: VarHandle,
    pub vars: ModelVars,
}

/// Run the network on one outfit, building the computation on `g` so that
/// gradients of `y` with respect to `x` (and the parameters) exist.
pub fn forward(
    g: &mut Graph,
    model: &CompatModel,
    top: &crate::record::FactorFeatureSet,
    bottom: &crate::record::FactorFeatureSet,
) -> Result<ForwardPass, ModelError> {
    check_dims(model, top, bottom)?;
    let vars = insert_params(g, model)?;
    let mut branch_outputs = Vec::with_capacity(5);
    for factor in FactorKind::ALL {
        let mut fused = Vec::with_capacity(model.config.intra_input_dim(factor));
        fused.extend_from_slice(top.get(factor));
        fused.extend_from_slice(bottom.get(factor));
        let input = g.constant(Tensor::vector(fused))?;
        branch_outputs.push(mlp_forward_vec(g, &vars.intra[factor.index()], input)?);
    }
    let x = g.concat(&branch_outputs)?;
    let y = mlp_forward_vec(g, &vars.inter, x)?;
    Ok(ForwardPass { x, y, vars })
}

pub fn forward_record(
    g: &mut Graph,
    model: &CompatModel,
    record: &OutfitRecord,
) -> Result<ForwardPass, ModelError> {
    forward(g, model, &record.top, &record.bottom)
}

/// A forward pass over a batch: samples are matrix columns, so `x` is
/// `[x_dim x B]` and `y` is `[3 x B]`. Column `b` depends only on record
/// `b`, and every value is bitwise identical to the per-sample pass.
pub struct BatchForwardPass {
    pub x: VarHandle,
    pub y: VarHandle,
    pub vars: ModelVars,
    pub batch_len: usize,
}

pub fn forward_batch(
    g: &mut Graph,
    model: &CompatModel,
    records: &[&OutfitRecord],
) -> Result<BatchForwardPass, ModelError> {
    if records.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for record in records {
        check_dims(model, &record.top, &record.bottom)?;
    }
    let b = records.len();
    let vars = insert_params(g, model)?;
    let ones_batch = g.constant(Tensor::filled(Shape::Vector(b), 1.0))?;
    let mut branch_outputs = Vec::with_capacity(5);
    for factor in FactorKind::ALL {
        let d = model.config.feature_dims.get(factor);
        let mut data = vec![0.0; 2 * d * b];
        for (col, record) in records.iter().enumerate() {
            for (row, v) in record.top.get(factor).iter().enumerate() {
                data[row * b + col] = *v;
            }
            for (row, v) in record.bottom.get(factor).iter().enumerate() {
                data[(d + row) * b + col] = *v;
            }
        }
        let input = g.constant(Tensor::matrix(2 * d, b, data))?;
        branch_outputs.push(mlp_forward_mat(g, &vars.intra[factor.index()], input, ones_batch)?);
    }
    let x = g.concat(&branch_outputs)?;
    let y = mlp_forward_mat(g, &vars.inter, x, ones_batch)?;
    Ok(BatchForwardPass { x, y, vars, batch_len: b })
}

/// Argmax judgment; exact ties resolve to the lowest index in
/// (good, normal, bad) order.
pub fn predict_judgment(logits: &[f64]) -> Judgment {
    assert_eq!(logits.len(), JUDGMENT_CLASSES, "expected 3 logits");
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    Judgment::from_index(best).expect("index in range")
}

/// Numerically stable softmax over a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / total).collect()
}

// ---- checkpoints -------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMPRSNW1";
const CHECKPOINT_VERSION: u32 = 1;

fn config_to_text(config: &ModelConfig) -> String {
    let d = config.feature_dims;
    let mut s = String::new();
    for (key, value) in [
        ("color", d.color),
        ("print", d.print),
        ("material", d.material),
        ("silhouette", d.silhouette),
        ("detail", d.detail),
        ("intra_hidden1", config.intra_hidden[0]),
        ("intra_hidden2", config.intra_hidden[1]),
        ("intra_out", config.intra_out),
        ("inter_hidden1", config.inter_hidden[0]),
        ("inter_hidden2", config.inter_hidden[1]),
    ] {
        let _ = writeln!(s, "{key}={value}");
    }
    s
}

fn config_from_text(text: &str) -> Result<ModelConfig, ModelError> {
    let mut entries = std::collections::BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ModelError::ConfigEntry(format!("malformed line {line:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| ModelError::ConfigEntry(format!("bad value in {line:?}")))?;
        if entries.insert(key.trim().to_string(), value).is_some() {
            return Err(ModelError::ConfigEntry(format!("duplicate key {key:?}")));
        }
    }
    let mut take = |key: &str| {
        entries
            .remove(key)
            .ok_or_else(|| ModelError::ConfigEntry(format!("missing key {key:?}")))
    };
    let config = ModelConfig {
        feature_dims: FeatureDims {
            color: take("color")?,
            print: take("print")?,
            material: take("material")?,
            silhouette: take("silhouette")?,
            detail: take("detail")?,
        },
        intra_hidden: [take("intra_hidden1")?, take("intra_hidden2")?],
        intra_out: take("intra_out")?,
        inter_hidden: [take("inter_hidden1")?, take("inter_hidden2")?],
    };
    if let Some(key) = entries.into_keys().next() {
        return Err(ModelError::ConfigEntry(format!("unknown key {key:?}")));
    }
    config.validate()?;
    Ok(config)
}

/// Write a model to a versioned binary checkpoint: magic, format version,
/// config as key-value text, then every parameter as little-endian f64 in
/// declared order. Round-trips are bit-exact.
pub fn save_checkpoint(model: &CompatModel, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config_text = config_to_text(&model.config);
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    let count: u64 = model.param_count() as u64;
    w.write_all(&count.to_le_bytes())?;
    for tensor in model.param_tensors() {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CompatModel, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion { found: version });
    }
    read_exact_or_truncated(&mut r, &mut word)?;
    let config_len = u32::from_le_bytes(word) as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact_or_truncated(&mut r, &mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| ModelError::ConfigEntry("config is not UTF-8".into()))?;
    let config = config_from_text(&config_text)?;

    let mut dword = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut dword)?;
    let declared = u64::from_le_bytes(dword) as usize;

    // Rebuild the parameter layout from the config, then fill it in order.
    let mut model = init_model(&config, 0)?;
    let expected = model.param_count();
    if declared != expected {
        return Err(ModelError::ConfigEntry(format!(
            "parameter count {declared} does not match config (expected {expected})"
        )));
    }
    for tensor in model.param_tensors_mut() {
        for v in tensor.data_mut() {
            read_exact_or_truncated(&mut r, &mut dword)?;
            *v = f64::from_le_bytes(dword);
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(model),
        _ => Err(ModelError::TrailingData),
    }
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Truncated
        } else {
            ModelError::Io(e)
        }
    })
}
