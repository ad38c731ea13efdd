//! Per-category training and checkpoints.
//!
//! One model is trained per object category from its k normal support grids.
//! Every epoch is full-batch: each support grid gets a freshly drawn mask,
//! the losses and gradients are averaged over the k grids, and a single Adam
//! step is applied. The random stream is consumed in a fixed order
//! (initialization, then per epoch and per grid: mask, then attention
//! dropout layer by layer), so a seed fully determines the run.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    heads_backward, objective_loss_grad, project_encoded_rows, project_inputs, AlignConfig,
    Objective, ProjectionHeads,
};
use crate::error::{Error, Result};
use crate::gat::{
    encoder_backward, encoder_forward_traced, grid_features, sample_mask, Aggregation,
    EncoderConfig, EncoderParams, GatLayerParams,
};
use crate::graph::{build_grid_topology, GridTopology};
use crate::nn::{adam_step, AdamState, DenseMatrix, Real};
use crate::tokenio::PatchGrid;
use crate::{seeded_rng, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub align: AlignConfig,
}

impl TrainConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            lr: 3e-4,
            max_epochs: 2000,
            patience: 100,
            min_delta: 1e-5,
            seed: 0,
            encoder: EncoderConfig::new(input_dim),
            align: AlignConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::config("min_delta must be a non-negative number"));
        }
        self.encoder.validate()?;
        self.align.validate()
    }
}

/// All learnable state plus the configuration it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub heads: ProjectionHeads<T>,
    pub config: TrainConfig,
}

impl<T: Real> ModelParams<T> {
    /// Encoder first, then heads, both from `rng`.
    pub fn init<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(&config.encoder, rng);
        let heads = ProjectionHeads::init(
            config.encoder.input_dim,
            config.encoder.hidden_dim,
            &config.align,
            rng,
        );
        Self {
            encoder,
            heads,
            config: config.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            heads: self.heads.zeros_like(),
            config: self.config.clone(),
        }
    }

    /// Every parameter tensor in checkpoint order: per layer `W`, `a`; the
    /// mask token; `q` weight and bias; `g` first weight, bias, second weight, bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.encoder.layers {
            out.push(layer.weight.data());
            out.push(&layer.attn);
        }
        out.push(&self.encoder.mask_token);
        let h = &self.heads;
        out.extend([
            h.q_weight.data(),
            &h.q_bias[..],
            h.g_w1.data(),
            &h.g_b1[..],
            h.g_w2.data(),
            &h.g_b2[..],
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(layer.weight.data_mut());
            out.push(&mut layer.attn);
        }
        out.push(&mut self.encoder.mask_token);
        let h = &mut self.heads;
        out.push(h.q_weight.data_mut());
        out.push(&mut h.q_bias);
        out.push(h.g_w1.data_mut());
        out.push(&mut h.g_b1);
        out.push(h.g_w2.data_mut());
        out.push(&mut h.g_b2);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let vec = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        ModelParams {
            encoder: EncoderParams {
                layers: self
                    .encoder
                    .layers
                    .iter()
                    .map(|l| GatLayerParams {
                        weight: l.weight.cast(),
                        attn: vec(&l.attn),
                    })
                    .collect(),
                mask_token: vec(&self.encoder.mask_token),
            },
            heads: ProjectionHeads {
                q_weight: self.heads.q_weight.cast(),
                q_bias: vec(&self.heads.q_bias),
                g_w1: self.heads.g_w1.cast(),
                g_b1: vec(&self.heads.g_b1),
                g_w2: self.heads.g_w2.cast(),
                g_b2: vec(&self.heads.g_b2),
            },
            config: self.config.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.encoder.validate()?;
        self.heads.validate()?;
        let enc = &self.config.encoder;
        if self.encoder.layers.len() != enc.num_layers
            || self.encoder.input_dim() != enc.input_dim
            || self.encoder.output_dim() != enc.hidden_dim
            || self.heads.q_weight.cols() != enc.input_dim
            || self.heads.g_w1.cols() != enc.hidden_dim
            || self.heads.latent_dim() != self.config.align.latent_dim
            || self.heads.g_w1.rows() != self.config.align.g_hidden_dim
        {
            return Err(Error::dim(
                "parameter shapes disagree with the stored configuration",
            ));
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Loss on one grid given an explicit masked set. `rng` is `Some` when
/// attention dropout should be active.
pub fn model_loss<T: Real, R: Rng + ?Sized>(
    model: &ModelParams<T>,
    inputs: &DenseMatrix<T>,
    masked: &[usize],
    topo: &GridTopology,
    rng: Option<&mut R>,
) -> Result<T> {
    let trace = encoder_forward_traced(
        inputs,
        masked,
        topo,
        &model.encoder,
        &model.config.encoder,
        rng,
    )?;
    let z = project_inputs(inputs, &model.heads)?;
    let zt = project_encoded_rows(trace.output(), &model.heads)?;
    Ok(objective_loss_grad(&z, &zt.latent, &model.config.align)?.loss)
}

/// Loss on one grid and its gradient with respect to every parameter.
pub fn model_loss_grad<T: Real, R: Rng + ?Sized>(
    model: &ModelParams<T>,
    inputs: &DenseMatrix<T>,
    masked: &[usize],
    topo: &GridTopology,
    rng: Option<&mut R>,
) -> Result<(T, ModelParams<T>)> {
    let enc_cfg = &model.config.encoder;
    let trace = encoder_forward_traced(inputs, masked, topo, &model.encoder, enc_cfg, rng)?;
    let z = project_inputs(inputs, &model.heads)?;
    let projection = project_encoded_rows(trace.output(), &model.heads)?;
    let lg = objective_loss_grad(&z, &projection.latent, &model.config.align)?;
    let (heads, grad_encoded) = heads_backward(
        inputs,
        trace.output(),
        &projection,
        &model.heads,
        &lg.grad_z,
        &lg.grad_z_tilde,
    )?;
    let encoder = encoder_backward(&trace, topo, &model.encoder, enc_cfg, &grad_encoded)?;
    Ok((
        lg.loss,
        ModelParams {
            encoder,
            heads,
            config: model.config.clone(),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest loss.
    pub model: ModelParams<f32>,
    /// Mean support loss of every epoch that ran.
    pub history: Vec<f32>,
    pub best_epoch: usize,
    pub best_loss: f32,
    /// True if the patience criterion ended training before `max_epochs`.
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

pub fn check_support(support: &[PatchGrid], input_dim: usize) -> Result<(usize, usize)> {
    let first = support
        .first()
        .ok_or_else(|| Error::dim("support set is empty"))?;
    let dims = (first.rows(), first.cols(), first.dim());
    for (k, grid) in support.iter().enumerate() {
        if (grid.rows(), grid.cols(), grid.dim()) != dims {
            return Err(Error::dim(format!(
                "support grid {k} is {}x{}x{}, grid 0 is {}x{}x{}",
                grid.rows(),
                grid.cols(),
                grid.dim(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
    }
    if dims.2 != input_dim {
        return Err(Error::dim(format!(
            "support tokens have {} channels, config expects {input_dim}",
            dims.2
        )));
    }
    Ok((dims.0, dims.1))
}

pub fn train_model(support: &[PatchGrid], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_model_with(support, cfg, |_, _| {})
}

/// [`train_model`] with a per-epoch callback receiving `(epoch, loss)`.
pub fn train_model_with(
    support: &[PatchGrid],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (rows, cols) = check_support(support, cfg.encoder.input_dim)?;
    let topo = build_grid_topology(rows, cols)?;
    let inputs: Vec<DenseMatrix<f32>> = support.iter().map(grid_features).collect();
    let n = rows * cols;

    let mut rng: SeededRng = seeded_rng(cfg.seed);
    let mut model = ModelParams::<f32>::init(cfg, &mut rng);
    let mut adam: Vec<AdamState<f32>> = model
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.len(), cfg.lr))
        .collect();

    let inv_k = 1.0 / support.len() as f32;
    let mut history = Vec::new();
    let mut best = (f32::INFINITY, model.clone(), 0usize);
    let mut reference = f32::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut grads = model.zeros_like();
        let mut loss = 0.0f32;
        for x in &inputs {
            let masked = sample_mask(n, cfg.encoder.mask_ratio, &mut rng)?;
            let (l, g) = model_loss_grad(&model, x, &masked, &topo, Some(&mut rng))?;
            loss += l * inv_k;
            grads.add_scaled(&g, inv_k);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical { epoch });
        }
        history.push(loss);
        on_epoch(epoch, loss);

        if loss < best.0 {
            best = (loss, model.clone(), epoch);
        }
        if (loss as f64) < reference as f64 - cfg.min_delta {
            reference = loss;
            stale = 0;
        } else {
            stale += 1;
        }

        for ((param, grad), state) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(adam.iter_mut())
        {
            adam_step(param, grad, state)?;
        }

        if stale >= cfg.patience {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    let (best_loss, model, best_epoch) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_loss,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GADC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model as stored on disk.
///
/// Layout, little-endian:
///
/// ```text
/// magic "GADC", u32 version = 1
/// f64 lr, u32 max_epochs, u32 patience, f64 min_delta, u64 seed
/// u32 num_layers, u32 hidden_dim, u32 input_dim, f64 mask_ratio,
///     f64 dropout_rate, u8 aggregation (0 gat, 1 gcn), f64 leaky_slope
/// u32 latent_dim, f64 gamma, u32 g_hidden_dim, u8 objective (0 sce, 1 mse, 2 cosine)
/// u32 grid_rows, u32 grid_cols, u32 epochs, f32 best_loss
/// u32 tensor_count, then per tensor: u32 rows, u32 cols, rows*cols f32
/// ```
///
/// Tensors follow [`ModelParams::tensors`] order; vectors are stored as `len × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub epochs: usize,
    pub best_loss: f32,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, grid_rows: usize, grid_cols: usize) -> Self {
        Self {
            model: outcome.model.clone(),
            grid_rows,
            grid_cols,
            epochs: outcome.epochs_run(),
            best_loss: outcome.best_loss,
        }
    }
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::dim(format!("{v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn tensor_shapes(model: &ModelParams<f32>) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for layer in &model.encoder.layers {
        shapes.push(layer.weight.shape());
        shapes.push((layer.attn.len(), 1));
    }
    shapes.push((model.encoder.mask_token.len(), 1));
    let h = &model.heads;
    shapes.extend([
        h.q_weight.shape(),
        (h.q_bias.len(), 1),
        h.g_w1.shape(),
        (h.g_b1.len(), 1),
        h.g_w2.shape(),
        (h.g_b2.len(), 1),
    ]);
    shapes
}

pub fn save_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<usize> {
    let cfg = &ckpt.model.config;
    let mut w = ByteWriter(Vec::new());
    w.0.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize)?;
    w.f64(cfg.lr);
    w.u32(cfg.max_epochs)?;
    w.u32(cfg.patience)?;
    w.f64(cfg.min_delta);
    w.u64(cfg.seed);
    let e = &cfg.encoder;
    w.u32(e.num_layers)?;
    w.u32(e.hidden_dim)?;
    w.u32(e.input_dim)?;
    w.f64(e.mask_ratio);
    w.f64(e.dropout_rate);
    w.u8(e.aggregation.code());
    w.f64(e.leaky_slope);
    let a = &cfg.align;
    w.u32(a.latent_dim)?;
    w.f64(a.gamma);
    w.u32(a.g_hidden_dim)?;
    w.u8(a.objective.code());
    w.u32(ckpt.grid_rows)?;
    w.u32(ckpt.grid_cols)?;
    w.u32(ckpt.epochs)?;
    w.f32(ckpt.best_loss);

    let shapes = tensor_shapes(&ckpt.model);
    let tensors = ckpt.model.tensors();
    w.u32(tensors.len())?;
    for (data, (rows, cols)) in tensors.into_iter().zip(shapes) {
        w.u32(rows)?;
        w.u32(cols)?;
        for &v in data {
            w.f32(v);
        }
    }
    sink.write_all(&w.0)?;
    sink.flush()?;
    Ok(w.0.len())
}

pub fn load_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let lr = r.f64()?;
    let max_epochs = r.u32()?;
    let patience = r.u32()?;
    let min_delta = r.f64()?;
    let seed = r.u64()?;
    let encoder = EncoderConfig {
        num_layers: r.u32()?,
        hidden_dim: r.u32()?,
        input_dim: r.u32()?,
        mask_ratio: r.f64()?,
        dropout_rate: r.f64()?,
        aggregation: Aggregation::from_code(r.u8()?)
            .ok_or_else(|| Error::Format("unknown aggregation code".into()))?,
        leaky_slope: r.f64()?,
    };
    let align = AlignConfig {
        latent_dim: r.u32()?,
        gamma: r.f64()?,
        g_hidden_dim: r.u32()?,
        objective: Objective::from_code(r.u8()?)
            .ok_or_else(|| Error::Format("unknown objective code".into()))?,
    };
    let config = TrainConfig {
        lr,
        max_epochs,
        patience,
        min_delta,
        seed,
        encoder,
        align,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
    let grid_rows = r.u32()?;
    let grid_cols = r.u32()?;
    let epochs = r.u32()?;
    let best_loss = r.f32()?;

    // Shapes are dictated by the configuration; the stored ones must agree.
    let mut model = ModelParams::<f32>::init(&config, &mut seeded_rng(0));
    let shapes = tensor_shapes(&model);
    let count = r.u32()?;
    if count != shapes.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, configuration implies {}",
            shapes.len()
        )));
    }
    for (slot, (dst, want)) in model.tensors_mut().into_iter().zip(shapes).enumerate() {
        let got = (r.u32()?, r.u32()?);
        if got != want {
            return Err(Error::Format(format!(
                "tensor {slot} is {got:?}, expected {want:?}"
            )));
        }
        let bytes = r.take(4 * dst.len())?;
        for (d, b) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    if !model.is_finite() {
        return Err(Error::Format(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        grid_rows,
        grid_cols,
        epochs,
        best_loss,
    })
}

pub fn save_checkpoint_file(ckpt: &Checkpoint, path: impl AsRef<std::path::Path>) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    save_checkpoint(ckpt, std::io::BufWriter::new(file))
}

pub fn load_checkpoint_file(path: impl AsRef<std::path::Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(file))
}
