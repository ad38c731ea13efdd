//! Synthetic token grids with known ground truth.
//!
//! A "category" is a smooth low-rank field: a fixed mean token plus a sum of
//! `texture_rank` separable cosine modes, each with its own integer spatial
//! frequencies, phases and a random amplitude per channel. The category
//! (field and anomaly direction) is fixed by `seed`; `instance` picks the
//! i.i.d. Gaussian noise drawn on top, so different instances are different
//! "images" of the same object.
//!
//! `noise_sigma` is a token-space scale: each channel gets noise of standard
//! deviation `noise_sigma / sqrt(dim)`, so the expected noise norm per token
//! is about `noise_sigma`, the same units as the anomaly shift. Anomalies
//! shift the tokens of a rectangular block along one fixed unit direction by
//! `anomaly_magnitude · noise_sigma`.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::Mask;
use crate::tokenio::PatchGrid;
use crate::SeededRng;

pub const MEAN_NORM: f64 = 4.0;
pub const TEXTURE_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub texture_rank: usize,
    /// Norm of the category's mean token.
    pub mean_norm: f64,
    /// Standard deviation of each mode's per-channel amplitude.
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub anomaly_block: Block,
    /// Shift length in units of `noise_sigma`.
    pub anomaly_magnitude: f64,
    pub seed: u64,
    pub instance: u64,
}

impl SynthSpec {
    /// 32×32×64 grid, rank-4 texture, unit noise, a 4×4 block shifted by 3σ.
    pub fn new(seed: u64) -> Self {
        Self {
            rows: 32,
            cols: 32,
            dim: 64,
            texture_rank: 4,
            mean_norm: MEAN_NORM,
            texture_amplitude: TEXTURE_AMPLITUDE,
            noise_sigma: 1.0,
            anomaly_block: Block {
                row: 14,
                col: 14,
                height: 4,
                width: 4,
            },
            anomaly_magnitude: 3.0,
            seed,
            instance: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 || self.dim < 1 {
            return Err(Error::dim(format!(
                "synthetic grid must be at least 2x2x1, got {}x{}x{}",
                self.rows, self.cols, self.dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_amplitude >= 0.0 && self.mean_norm >= 0.0) {
            return Err(Error::config(
                "noise_sigma, texture_amplitude and mean_norm must be non-negative",
            ));
        }
        if self.anomaly_magnitude.is_nan() || self.anomaly_magnitude < 0.0 {
            return Err(Error::config("anomaly_magnitude must be non-negative"));
        }
        Ok(())
    }

    fn check_block(&self) -> Result<()> {
        let b = self.anomaly_block;
        if b.height == 0
            || b.width == 0
            || b.row + b.height > self.rows
            || b.col + b.width > self.cols
        {
            return Err(Error::dim(format!(
                "anomaly block {b:?} does not fit a {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// The category-level part of a spec: modes and anomaly direction.
#[derive(Debug, Clone)]
pub struct Texture {
    /// `(row frequency, col frequency, row phase, col phase)` per mode.
    pub modes: Vec<(usize, usize, f64, f64)>,
    /// `rank × dim` amplitudes.
    pub amplitudes: Vec<f64>,
    /// Unit vector of length `dim`.
    pub direction: Vec<f64>,
    pub mean: Vec<f64>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

pub fn noise_std_per_channel(spec: &SynthSpec) -> f64 {
    spec.noise_sigma / (spec.dim as f64).sqrt()
}

fn texture_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

fn noise_rng(seed: u64, instance: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(instance.wrapping_add(1));
    rng
}

/// Stream for choosing anomaly placements when generating a benchmark, kept
/// apart from the texture (stream 0) and per-instance noise streams.
pub fn placement_rng(seed: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

pub fn texture(spec: &SynthSpec) -> Texture {
    let mut rng = texture_rng(spec.seed);
    // distinct integer frequency pairs, lowest band that holds `rank` pairs
    let mut band = 1;
    while band * band < spec.texture_rank {
        band += 1;
    }
    let mut pairs: Vec<(usize, usize)> = (1..=band)
        .flat_map(|u| (1..=band).map(move |v| (u, v)))
        .collect();
    pairs.shuffle(&mut rng);
    let modes = pairs
        .into_iter()
        .take(spec.texture_rank)
        .map(|(u, v)| (u, v, rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)))
        .collect();
    let amplitudes = (0..spec.texture_rank * spec.dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.texture_amplitude
        })
        .collect();
    let direction = unit_vector(spec.dim, &mut rng);
    let mean = unit_vector(spec.dim, &mut rng)
        .into_iter()
        .map(|v| v * spec.mean_norm)
        .collect();
    Texture {
        modes,
        amplitudes,
        direction,
        mean,
    }
}

/// Per-channel standard deviation of the generated tokens over a grid whose
/// sides hold whole periods of every mode: `sqrt(Σ_m A_mc² / 4 + σ²/dim)`.
pub fn analytic_channel_std(spec: &SynthSpec) -> Vec<f64> {
    let tex = texture(spec);
    (0..spec.dim)
        .map(|c| {
            let field: f64 = (0..spec.texture_rank)
                .map(|m| tex.amplitudes[m * spec.dim + c].powi(2) / 4.0)
                .sum();
            (field + noise_std_per_channel(spec).powi(2)).sqrt()
        })
        .collect()
}

fn render(spec: &SynthSpec, tex: &Texture) -> Vec<f64> {
    let (rows, cols, dim) = (spec.rows, spec.cols, spec.dim);
    let mut out: Vec<f64> = tex
        .mean
        .iter()
        .copied()
        .cycle()
        .take(rows * cols * dim)
        .collect();
    for (m, &(u, v, phi, psi)) in tex.modes.iter().enumerate() {
        let amps = &tex.amplitudes[m * dim..(m + 1) * dim];
        for r in 0..rows {
            let wr = (TAU * u as f64 * r as f64 / rows as f64 + phi).cos();
            for c in 0..cols {
                let wc = (TAU * v as f64 * c as f64 / cols as f64 + psi).cos();
                let base = (r * cols + c) * dim;
                for (o, a) in out[base..base + dim].iter_mut().zip(amps) {
                    *o += a * wr * wc;
                }
            }
        }
    }
    let mut rng = noise_rng(spec.seed, spec.instance);
    let sigma = noise_std_per_channel(spec);
    for o in &mut out {
        let z: f64 = StandardNormal.sample(&mut rng);
        *o += sigma * z;
    }
    out
}

fn to_grid(spec: &SynthSpec, values: Vec<f64>) -> Result<PatchGrid> {
    PatchGrid::new(
        spec.rows,
        spec.cols,
        spec.dim,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn generate_normal(spec: &SynthSpec) -> Result<PatchGrid> {
    spec.validate()?;
    let tex = texture(spec);
    to_grid(spec, render(spec, &tex))
}

/// The normal grid with the block shifted, plus the block as a patch mask.
pub fn generate_anomalous(spec: &SynthSpec) -> Result<(PatchGrid, Mask)> {
    spec.validate()?;
    spec.check_block()?;
    let tex = texture(spec);
    let mut values = render(spec, &tex);
    let shift = spec.anomaly_magnitude * spec.noise_sigma;
    let block = spec.anomaly_block;
    let mut mask = vec![false; spec.rows * spec.cols];
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            if !block.contains(r, c) {
                continue;
            }
            let node = r * spec.cols + c;
            mask[node] = true;
            if shift == 0.0 {
                continue;
            }
            let token = &mut values[node * spec.dim..(node + 1) * spec.dim];
            for (t, d) in token.iter_mut().zip(&tex.direction) {
                *t += shift * d;
            }
        }
    }
    Ok((
        to_grid(spec, values)?,
        Mask::new(spec.rows, spec.cols, mask)?,
    ))
}

/// A block of the given size at a position drawn uniformly from `rng`.
pub fn random_block<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Block> {
    if height == 0 || width == 0 || height > rows || width > cols {
        return Err(Error::dim(format!(
            "a {height}x{width} block does not fit a {rows}x{cols} grid"
        )));
    }
    Ok(Block {
        row: rng.random_range(0..=rows - height),
        col: rng.random_range(0..=cols - width),
        height,
        width,
    })
}
