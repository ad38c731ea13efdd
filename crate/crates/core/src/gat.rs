//! Masked graph-attention encoder over the patch grid.
//!
//! One layer maps node features `H (N×F)` to `H' (N×F')`:
//!
//! ```text
//! P      = H Wᵀ
//! e_ij   = LeakyReLU(a_srcᵀ P_i + a_dstᵀ P_j)     j ∈ N(i)
//! α_i·   = softmax_j(e_i·)
//! H'_i   = ELU(Σ_j α_ij P_j)
//! ```
//!
//! `a = [a_src ‖ a_dst]` is the single attention vector of length `2F'`.
//! During training the α are passed through inverted dropout and a random
//! subset of input tokens is replaced by a learnable mask token before the
//! first layer. The GCN variant swaps α for the fixed symmetric weights
//! `1 / sqrt(|N(i)| |N(j)|)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GridTopology;
use crate::nn::{
    dot, elu_grad_from_output, leaky_relu, leaky_relu_grad, sample_dropout_scales,
    softmax_backward, softmax_in_place, xavier_uniform_init, DenseMatrix, Real,
};
use crate::tokenio::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Gat,
    Gcn,
}

impl Aggregation {
    pub fn code(self) -> u8 {
        match self {
            Aggregation::Gat => 0,
            Aggregation::Gcn => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Gat => "gat",
            Aggregation::Gcn => "gcn",
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Aggregation::Gat),
            1 => Some(Aggregation::Gcn),
            _ => None,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Aggregation::Gat),
            "gcn" => Ok(Aggregation::Gcn),
            other => Err(Error::config(format!("unknown aggregation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub mask_ratio: f64,
    pub dropout_rate: f64,
    pub aggregation: Aggregation,
    pub leaky_slope: f64,
}

impl EncoderConfig {
    /// Default encoder (3 layers of width 256, μ = 0.2, δ = 0.3) for tokens of width `input_dim`.
    pub fn new(input_dim: usize) -> Self {
        Self {
            num_layers: 3,
            hidden_dim: 256,
            input_dim,
            mask_ratio: 0.2,
            dropout_rate: 0.3,
            aggregation: Aggregation::Gat,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("num_layers must be at least 1"));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 {
            return Err(Error::config("hidden_dim and input_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams<T> {
    /// `F' × F`.
    pub weight: DenseMatrix<T>,
    /// `[a_src ‖ a_dst]`, length `2F'`.
    pub attn: Vec<T>,
}

impl<T: Real> GatLayerParams<T> {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = xavier_uniform_init(out_dim, in_dim, rng);
        let attn = xavier_uniform_init::<T, R>(1, 2 * out_dim, rng).into_vec();
        Self { weight, attn }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            attn: vec![T::zero(); self.attn.len()],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn check(&self) -> Result<()> {
        if self.attn.len() != 2 * self.out_dim() {
            return Err(Error::dim(format!(
                "attention vector has length {}, expected {}",
                self.attn.len(),
                2 * self.out_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<GatLayerParams<T>>,
    pub mask_token: Vec<T>,
}

impl<T: Real> EncoderParams<T> {
    /// Xavier-initialized layers (`D→F`, then `F→F`) and a zero mask token.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut in_dim = cfg.input_dim;
        for _ in 0..cfg.num_layers {
            layers.push(GatLayerParams::init(in_dim, cfg.hidden_dim, rng));
            in_dim = cfg.hidden_dim;
        }
        Self {
            layers,
            mask_token: vec![T::zero(); cfg.input_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(GatLayerParams::zeros_like).collect(),
            mask_token: vec![T::zero(); self.mask_token.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mask_token.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, GatLayerParams::out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (r, layer) in self.layers.iter().enumerate() {
            layer.check()?;
            if layer.in_dim() != dim {
                return Err(Error::dim(format!(
                    "layer {r} expects {} inputs, previous width is {dim}",
                    layer.in_dim()
                )));
            }
            dim = layer.out_dim();
        }
        if self.layers.is_empty() {
            return Err(Error::dim("encoder has no layers"));
        }
        Ok(())
    }
}

/// Copies the grid's tokens into an `N × D` matrix.
pub fn grid_features<T: Real>(grid: &PatchGrid) -> DenseMatrix<T> {
    let data = grid.data().iter().map(|&v| T::lit(v as f64)).collect();
    DenseMatrix::from_vec(grid.len(), grid.dim(), data).expect("grid shape")
}

/// Number of nodes masked for ratio `mu` over `n` nodes.
pub fn masked_count(n: usize, mu: f64) -> usize {
    if mu == 0.0 {
        0
    } else {
        ((mu * n as f64).round() as usize).clamp(1, n)
    }
}

/// Draws the masked node set (ascending) uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, mu: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::config(format!(
            "mask ratio must lie in [0, 1), got {mu}"
        )));
    }
    let k = masked_count(n, mu);
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Replaces the tokens of the given nodes with `mask_token`.
pub fn mask_rows<T: Real>(features: &mut DenseMatrix<T>, masked: &[usize], mask_token: &[T]) {
    for &i in masked {
        features.row_mut(i).copy_from_slice(mask_token);
    }
}

pub fn apply_feature_mask<T: Real, R: Rng + ?Sized>(
    grid: &PatchGrid,
    mask_token: &[T],
    ratio: f64,
    rng: &mut R,
) -> Result<(DenseMatrix<T>, Vec<usize>)> {
    if mask_token.len() != grid.dim() {
        return Err(Error::dim(format!(
            "mask token has {} entries, grid tokens have {}",
            mask_token.len(),
            grid.dim()
        )));
    }
    let masked = sample_mask(grid.len(), ratio, rng)?;
    let mut features = grid_features(grid);
    mask_rows(&mut features, &masked, mask_token);
    Ok((features, masked))
}

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub proj: DenseMatrix<T>,
    /// Pre-LeakyReLU logits per edge (empty for GCN).
    pub logits: Vec<T>,
    /// Per-edge coefficients before dropout: softmax α for GAT, fixed
    /// normalization for GCN. Aligned with the topology's flat neighbor array.
    pub coeffs: Vec<T>,
    /// Per-edge dropout multipliers, when dropout was active.
    pub dropout: Option<Vec<T>>,
    pub pre: DenseMatrix<T>,
    pub out: DenseMatrix<T>,
}

fn check_layer_input<T: Real>(
    features: &DenseMatrix<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
) -> Result<()> {
    params.check()?;
    if features.rows() != topo.num_nodes() {
        return Err(Error::dim(format!(
            "{} feature rows for a {}-node topology",
            features.rows(),
            topo.num_nodes()
        )));
    }
    if features.cols() != params.in_dim() {
        return Err(Error::dim(format!(
            "layer expects {} input features, got {}",
            params.in_dim(),
            features.cols()
        )));
    }
    Ok(())
}

/// Pre-dropout attention coefficients of one GAT layer, per edge.
pub fn attention_coefficients<T: Real>(
    features: &DenseMatrix<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
    leaky_slope: f64,
) -> Result<Vec<T>> {
    check_layer_input(features, topo, params)?;
    let proj = features.matmul_transposed(&params.weight)?;
    let (logits, coeffs) = attention(&proj, topo, &params.attn, T::lit(leaky_slope));
    debug_assert_eq!(logits.len(), coeffs.len());
    Ok(coeffs)
}

fn attention<T: Real>(
    proj: &DenseMatrix<T>,
    topo: &GridTopology,
    attn: &[T],
    slope: T,
) -> (Vec<T>, Vec<T>) {
    let f_out = proj.cols();
    let (a_src, a_dst) = attn.split_at(f_out);
    let n = proj.rows();
    let src: Vec<T> = (0..n).map(|i| dot(proj.row(i), a_src)).collect();
    let dst: Vec<T> = (0..n).map(|j| dot(proj.row(j), a_dst)).collect();

    let mut logits = Vec::with_capacity(topo.num_edges());
    let mut coeffs = Vec::with_capacity(topo.num_edges());
    for i in 0..n {
        let start = coeffs.len();
        for &j in topo.neighbors_of(i) {
            let z = src[i] + dst[j];
            logits.push(z);
            coeffs.push(leaky_relu(z, slope));
        }
        softmax_in_place(&mut coeffs[start..]);
    }
    (logits, coeffs)
}

fn gcn_coefficients<T: Real>(topo: &GridTopology) -> Vec<T> {
    let mut coeffs = Vec::with_capacity(topo.num_edges());
    for i in 0..topo.num_nodes() {
        let di = topo.degree(i) as f64;
        for &j in topo.neighbors_of(i) {
            coeffs.push(T::lit(1.0 / (di * topo.degree(j) as f64).sqrt()));
        }
    }
    coeffs
}

/// Forward pass of one layer, keeping the intermediates for backward.
/// `rng` is `Some` in training mode (attention dropout active for GAT).
pub fn layer_forward_traced<T: Real, R: Rng + ?Sized>(
    features: &DenseMatrix<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
    aggregation: Aggregation,
    leaky_slope: f64,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<LayerTrace<T>> {
    check_layer_input(features, topo, params)?;
    let proj = features.matmul_transposed(&params.weight)?;
    let (logits, coeffs) = match aggregation {
        Aggregation::Gat => attention(&proj, topo, &params.attn, T::lit(leaky_slope)),
        Aggregation::Gcn => (Vec::new(), gcn_coefficients(topo)),
    };
    let dropout = match (aggregation, rng) {
        (Aggregation::Gat, Some(rng)) if dropout_rate > 0.0 => {
            Some(sample_dropout_scales(coeffs.len(), dropout_rate, rng)?)
        }
        _ => None,
    };

    let f_out = proj.cols();
    let mut pre = DenseMatrix::zeros(proj.rows(), f_out);
    let mut edge = 0;
    for i in 0..topo.num_nodes() {
        let acc = pre.row_mut(i);
        for &j in topo.neighbors_of(i) {
            let mut w = coeffs[edge];
            if let Some(scales) = &dropout {
                w *= scales[edge];
            }
            edge += 1;
            if w == T::zero() {
                continue;
            }
            for (a, &p) in acc.iter_mut().zip(proj.row(j)) {
                *a += w * p;
            }
        }
    }
    let mut out = pre.clone();
    T::elu_in_place(out.data_mut());
    Ok(LayerTrace {
        proj,
        logits,
        coeffs,
        dropout,
        pre,
        out,
    })
}

/// One attentional layer. `rng` is `Some` in training mode.
pub fn gat_layer_forward<T: Real, R: Rng + ?Sized>(
    features: &DenseMatrix<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
    dropout_rate: f64,
    leaky_slope: f64,
    rng: Option<&mut R>,
) -> Result<DenseMatrix<T>> {
    layer_forward_traced(
        features,
        topo,
        params,
        Aggregation::Gat,
        leaky_slope,
        dropout_rate,
        rng,
    )
    .map(|t| t.out)
}

/// One GCN layer with symmetric degree normalization; `params.attn` is unused.
pub fn gcn_layer_forward<T: Real>(
    features: &DenseMatrix<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
) -> Result<DenseMatrix<T>> {
    layer_forward_traced::<T, crate::SeededRng>(
        features,
        topo,
        params,
        Aggregation::Gcn,
        0.2,
        0.0,
        None,
    )
    .map(|t| t.out)
}

/// Backward pass of one layer: returns `(d input, d params)`. `input` is the
/// matrix the traced forward pass was run on.
pub fn layer_backward<T: Real>(
    input: &DenseMatrix<T>,
    trace: &LayerTrace<T>,
    topo: &GridTopology,
    params: &GatLayerParams<T>,
    aggregation: Aggregation,
    leaky_slope: f64,
    grad_out: &DenseMatrix<T>,
) -> Result<(DenseMatrix<T>, GatLayerParams<T>)> {
    if grad_out.shape() != trace.out.shape() {
        return Err(Error::dim("layer_backward: gradient shape mismatch"));
    }
    let n = topo.num_nodes();
    let f_out = trace.proj.cols();

    let mut grad_pre = grad_out.clone();
    for ((g, &p), &o) in grad_pre
        .data_mut()
        .iter_mut()
        .zip(trace.pre.data())
        .zip(trace.out.data())
    {
        *g *= elu_grad_from_output(p, o);
    }

    let mut grad_proj = DenseMatrix::zeros(n, f_out);
    let mut grad_coeff = vec![T::zero(); topo.num_edges()];
    let mut edge = 0;
    for i in 0..n {
        let gi = grad_pre.row(i);
        for &j in topo.neighbors_of(i) {
            let mut w = trace.coeffs[edge];
            let scale = trace.dropout.as_ref().map(|s| s[edge]);
            if let Some(s) = scale {
                w *= s;
            }
            let dot = dot(gi, trace.proj.row(j));
            grad_coeff[edge] = scale.map_or(dot, |s| dot * s);
            if w != T::zero() {
                for (d, &g) in grad_proj.row_mut(j).iter_mut().zip(gi) {
                    *d += w * g;
                }
            }
            edge += 1;
        }
    }

    let mut grads = params.zeros_like();
    if aggregation == Aggregation::Gat {
        let slope = T::lit(leaky_slope);
        let mut grad_src = vec![T::zero(); n];
        let mut grad_dst = vec![T::zero(); n];
        for i in 0..n {
            let range = topo.offsets()[i]..topo.offsets()[i + 1];
            let de = softmax_backward(&trace.coeffs[range.clone()], &grad_coeff[range.clone()]);
            for ((&j, d), &z) in topo
                .neighbors_of(i)
                .iter()
                .zip(de)
                .zip(&trace.logits[range])
            {
                let dz = d * leaky_relu_grad(z, slope);
                grad_src[i] += dz;
                grad_dst[j] += dz;
            }
        }
        let (a_src, a_dst) = params.attn.split_at(f_out);
        let (ga_src, ga_dst) = grads.attn.split_at_mut(f_out);
        for i in 0..n {
            let (gs, gd) = (grad_src[i], grad_dst[i]);
            let p = trace.proj.row(i);
            for k in 0..f_out {
                ga_src[k] += gs * p[k];
                ga_dst[k] += gd * p[k];
            }
            let row = grad_proj.row_mut(i);
            for k in 0..f_out {
                row[k] += gs * a_src[k] + gd * a_dst[k];
            }
        }
    }

    grads.weight = grad_proj.transposed_matmul(input)?;
    let grad_input = grad_proj.matmul(&params.weight)?;
    Ok((grad_input, grads))
}

/// Forward pass of the whole encoder with an explicit masked set.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    pub masked: Vec<usize>,
    /// Input features after masking, fed to the first layer.
    pub input: DenseMatrix<T>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Real> EncoderTrace<T> {
    pub fn output(&self) -> &DenseMatrix<T> {
        &self.layers.last().expect("non-empty encoder").out
    }
}

/// Runs the stacked layers on `inputs` after masking the rows in `masked`.
pub fn encoder_forward_traced<T: Real, R: Rng + ?Sized>(
    inputs: &DenseMatrix<T>,
    masked: &[usize],
    topo: &GridTopology,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    mut rng: Option<&mut R>,
) -> Result<EncoderTrace<T>> {
    params.validate()?;
    if inputs.cols() != params.input_dim() {
        return Err(Error::dim(format!(
            "encoder expects {}-dim tokens, got {}",
            params.input_dim(),
            inputs.cols()
        )));
    }
    let mut h = inputs.clone();
    mask_rows(&mut h, masked, &params.mask_token);
    let mut layers: Vec<LayerTrace<T>> = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = layers.last().map_or(&h, |t| &t.out);
        let trace = layer_forward_traced(
            input,
            topo,
            layer,
            cfg.aggregation,
            cfg.leaky_slope,
            cfg.dropout_rate,
            rng.as_deref_mut(),
        )?;
        layers.push(trace);
    }
    Ok(EncoderTrace {
        masked: masked.to_vec(),
        input: h,
        layers,
    })
}

/// Encoder forward. In training mode (`rng` is `Some`) a fresh mask is drawn
/// first and attention dropout is active; in inference mode neither happens
/// and the masked set is empty.
pub fn encoder_forward<T: Real, R: Rng + ?Sized>(
    grid: &PatchGrid,
    topo: &GridTopology,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    mut rng: Option<&mut R>,
) -> Result<(DenseMatrix<T>, Vec<usize>)> {
    if grid.dim() != cfg.input_dim {
        return Err(Error::dim(format!(
            "grid tokens have {} channels, encoder configured for {}",
            grid.dim(),
            cfg.input_dim
        )));
    }
    let masked = match rng.as_deref_mut() {
        Some(rng) => sample_mask(grid.len(), cfg.mask_ratio, rng)?,
        None => Vec::new(),
    };
    let trace = encoder_forward_traced(&grid_features(grid), &masked, topo, params, cfg, rng)?;
    let masked = trace.masked.clone();
    let out = trace.layers.into_iter().last().expect("non-empty").out;
    Ok((out, masked))
}

/// Gradients of all encoder parameters given `d H^R`.
pub fn encoder_backward<T: Real>(
    trace: &EncoderTrace<T>,
    topo: &GridTopology,
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    grad_out: &DenseMatrix<T>,
) -> Result<EncoderParams<T>> {
    let mut grads = params.zeros_like();
    let mut grad = grad_out.clone();
    for (r, (trace_r, layer)) in trace.layers.iter().zip(&params.layers).enumerate().rev() {
        let input = if r == 0 {
            &trace.input
        } else {
            &trace.layers[r - 1].out
        };
        let (grad_in, layer_grads) = layer_backward(
            input,
            trace_r,
            topo,
            layer,
            cfg.aggregation,
            cfg.leaky_slope,
            &grad,
        )?;
        grads.layers[r] = layer_grads;
        grad = grad_in;
    }
    for &i in &trace.masked {
        for (g, &d) in grads.mask_token.iter_mut().zip(grad.row(i)) {
            *g += d;
        }
    }
    Ok(grads)
}
