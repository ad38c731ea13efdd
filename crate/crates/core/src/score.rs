//! Inference: patch scores, image score and the pixel anomaly map.

use serde::{Deserialize, Serialize};

use crate::align::{node_residual, project_encoded_rows, project_inputs};
use crate::error::{Error, Result};
use crate::gat::encoder_forward;
use crate::graph::{build_grid_topology, GridTopology};
use crate::tokenio::PatchGrid;
use crate::train::ModelParams;
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean of the `max(1, round(ε·N))` highest patch scores.
    TopK,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::TopK => "topk",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "topk" | "top-k" | "mean" => Ok(Pooling::TopK),
            "max" => Ok(Pooling::Max),
            other => Err(Error::config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub top_ratio: f64,
    pub pooling: Pooling,
    /// Gaussian σ in patch units, applied to the coarse map.
    pub blur_sigma: f64,
    pub output_rows: usize,
    pub output_cols: usize,
}

impl ScoreConfig {
    /// ε = 0.025, top-k pooling, σ = 1, pixel map at the grid resolution.
    pub fn for_grid(rows: usize, cols: usize) -> Self {
        Self {
            top_ratio: 0.025,
            pooling: Pooling::TopK,
            blur_sigma: 1.0,
            output_rows: rows,
            output_cols: cols,
        }
    }

    pub fn validate(&self, grid_rows: usize, grid_cols: usize) -> Result<()> {
        if !(self.top_ratio > 0.0 && self.top_ratio <= 1.0) {
            return Err(Error::config(format!(
                "top_ratio must lie in (0, 1], got {}",
                self.top_ratio
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::config(format!(
                "blur_sigma must be non-negative, got {}",
                self.blur_sigma
            )));
        }
        if self.output_rows < grid_rows || self.output_cols < grid_cols {
            return Err(Error::config(format!(
                "output map {}x{} is smaller than the {grid_rows}x{grid_cols} grid",
                self.output_rows, self.output_cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub patch_scores: Vec<f32>,
    pub image_score: f32,
    pub pixel_map: Vec<f32>,
    pub map_rows: usize,
    pub map_cols: usize,
}

/// Per-node residuals of an inference-mode forward pass.
pub fn patch_scores(
    query: &PatchGrid,
    model: &ModelParams<f32>,
    topo: &GridTopology,
) -> Result<Vec<f32>> {
    let enc = &model.config.encoder;
    if query.dim() != enc.input_dim {
        return Err(Error::dim(format!(
            "query tokens have {} channels, model was trained on {}",
            query.dim(),
            enc.input_dim
        )));
    }
    if (query.rows(), query.cols()) != (topo.rows(), topo.cols()) {
        return Err(Error::dim(format!(
            "query grid {}x{} does not match topology {}x{}",
            query.rows(),
            query.cols(),
            topo.rows(),
            topo.cols()
        )));
    }
    let (encoded, _) = encoder_forward::<f32, SeededRng>(query, topo, &model.encoder, enc, None)?;
    let inputs = crate::gat::grid_features::<f32>(query);
    let z = project_inputs(&inputs, &model.heads)?;
    let z_tilde = project_encoded_rows(&encoded, &model.heads)?.latent;
    Ok((0..query.len())
        .map(|i| node_residual(z.row(i), z_tilde.row(i), &model.config.align))
        .collect())
}

/// Number of patches averaged by top-k pooling.
pub fn top_k_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

pub fn image_score(scores: &[f32], cfg: &ScoreConfig) -> Result<f32> {
    if scores.is_empty() {
        return Err(Error::dim("cannot pool an empty score array"));
    }
    match cfg.pooling {
        Pooling::Max => Ok(scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max)),
        Pooling::TopK => {
            let k = top_k_count(scores.len(), cfg.top_ratio);
            let mut order: Vec<usize> = (0..scores.len()).collect();
            // descending score, lower index first on ties
            let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, cmp);
                order.truncate(k);
            }
            order.sort_unstable_by(cmp);
            let sum: f64 = order.iter().map(|&i| scores[i] as f64).sum();
            Ok((sum / k as f64) as f32)
        }
    }
}

fn reflect(index: isize, len: usize) -> usize {
    // half-sample symmetric: ... c b a | a b c ... | c b a ...
    let period = 2 * len as isize;
    let m = index.rem_euclid(period) as usize;
    if m >= len {
        period as usize - 1 - m
    } else {
        m
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn clamp_to_range(values: &mut [f32], lo: f32, hi: f32) {
    for v in values {
        *v = v.clamp(lo, hi);
    }
}

fn range(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Separable Gaussian blur with radius `ceil(3σ)`, unit-sum kernel and
/// symmetric reflection at the borders. `σ = 0` is the identity.
pub fn gaussian_blur_grid(map: &[f32], rows: usize, cols: usize, sigma: f64) -> Vec<f32> {
    assert_eq!(map.len(), rows * cols);
    if sigma <= 0.0 || map.is_empty() {
        return map.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;

    let mut horizontal = vec![0.0f64; map.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let cc = reflect(c as isize + t as isize - radius, cols);
                acc += w * map[r * cols + cc] as f64;
            }
            horizontal[r * cols + c] = acc;
        }
    }
    let mut out = vec![0.0f32; map.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let rr = reflect(r as isize + t as isize - radius, rows);
                acc += w * horizontal[rr * cols + c];
            }
            out[r * cols + c] = acc as f32;
        }
    }
    let (lo, hi) = range(map);
    clamp_to_range(&mut out, lo, hi);
    out
}

/// Bilinear resampling with half-pixel centers:
/// `src = (dst + 0.5) · in / out − 0.5`, clamped to the input extent.
pub fn bilinear_upsample(
    map: &[f32],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f32> {
    assert_eq!(map.len(), rows * cols);
    let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src =
            ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let col_taps: Vec<_> = (0..out_cols).map(|c| axis(c, cols, out_cols)).collect();
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let (r0, r1, fr) = axis(r, rows, out_rows);
        for &(c0, c1, fc) in &col_taps {
            let at = |rr: usize, cc: usize| map[rr * cols + cc] as f64;
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push((top * (1.0 - fr) + bottom * fr) as f32);
        }
    }
    let (lo, hi) = range(map);
    clamp_to_range(&mut out, lo, hi);
    out
}

/// Coarse map → Gaussian blur → bilinear upsampling to the output size.
pub fn pixel_map(
    patch_scores: &[f32],
    rows: usize,
    cols: usize,
    cfg: &ScoreConfig,
) -> Result<Vec<f32>> {
    if patch_scores.len() != rows * cols {
        return Err(Error::dim(format!(
            "{} patch scores for a {rows}x{cols} grid",
            patch_scores.len()
        )));
    }
    cfg.validate(rows, cols)?;
    let blurred = gaussian_blur_grid(patch_scores, rows, cols, cfg.blur_sigma);
    Ok(bilinear_upsample(
        &blurred,
        rows,
        cols,
        cfg.output_rows,
        cfg.output_cols,
    ))
}

/// Full scoring of one query grid with a prebuilt topology.
pub fn score_with_topology(
    query: &PatchGrid,
    model: &ModelParams<f32>,
    topo: &GridTopology,
    cfg: &ScoreConfig,
) -> Result<AnomalyResult> {
    cfg.validate(query.rows(), query.cols())?;
    let patch_scores = patch_scores(query, model, topo)?;
    let image_score = image_score(&patch_scores, cfg)?;
    let pixel_map = pixel_map(&patch_scores, query.rows(), query.cols(), cfg)?;
    Ok(AnomalyResult {
        patch_scores,
        image_score,
        pixel_map,
        map_rows: cfg.output_rows,
        map_cols: cfg.output_cols,
    })
}

pub fn score_grid(
    query: &PatchGrid,
    model: &ModelParams<f32>,
    cfg: &ScoreConfig,
) -> Result<AnomalyResult> {
    let topo = build_grid_topology(query.rows(), query.cols())?;
    score_with_topology(query, model, &topo, cfg)
}
