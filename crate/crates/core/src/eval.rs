//! Detection and localization metrics.
//!
//! * image level: AUROC (tie-aware Mann–Whitney) and average precision;
//! * pixel level: AUROC over all pixels and PRO, the per-region overlap
//!   integrated over false-positive rates up to a limit (0.3 by default).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::Mask;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_PRO_THRESHOLDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("score {i} is not finite")));
        }
        Ok(Self { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// Indices sorted by ascending score.
    fn ascending(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        order
    }
}

/// Tie-aware AUROC: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` computed from mid-ranks.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (pos, neg) = (data.positives(), data.negatives());
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let order = data.ascending();
    let mut rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && data.scores[order[end + 1]] == data.scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based; the tie group shares the mean of start+1..=end+1
        let mid_rank = (start + end + 2) as f64 / 2.0;
        let group_pos = order[start..=end]
            .iter()
            .filter(|&&i| data.labels[i])
            .count();
        rank_sum += mid_rank * group_pos as f64;
        start = end + 1;
    }
    let u = rank_sum - (pos as f64) * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (Rₙ − Rₙ₋₁) · Pₙ` over descending distinct thresholds.
pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    let pos = data.positives();
    if pos == 0 {
        return Err(Error::DegenerateLabels(
            "average precision needs a positive".into(),
        ));
    }
    let mut order = data.ascending();
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let threshold = data.scores[order[start]];
        let mut end = start;
        while end < order.len() && data.scores[order[end]] == threshold {
            if data.labels[order[end]] {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        start = end;
    }
    Ok(ap)
}

/// 8-connected component labels in first-seen raster order: 0 is
/// background, components are `1..=count`.
pub fn connected_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut labels = vec![0u32; rows * cols];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / cols, p % cols);
            for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    let q = nr * cols + nc;
                    if mask.data[q] && labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// A pixel anomaly map with its ground truth and precomputed components.
#[derive(Debug, Clone)]
pub struct MaskedMap {
    pub pixel_map: Vec<f32>,
    pub mask: Mask,
    pub components: Vec<u32>,
    pub num_components: usize,
}

impl MaskedMap {
    pub fn new(pixel_map: Vec<f32>, mask: Mask) -> Result<Self> {
        if pixel_map.len() != mask.rows * mask.cols {
            return Err(Error::dim(format!(
                "map has {} pixels, mask is {}x{}",
                pixel_map.len(),
                mask.rows,
                mask.cols
            )));
        }
        if let Some(i) = pixel_map.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("pixel {i} is not finite")));
        }
        let (components, num_components) = connected_components(&mask);
        Ok(Self {
            pixel_map,
            mask,
            components,
            num_components,
        })
    }
}

/// The `count` evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn threshold_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|k| {
            if k + 1 == count {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (count - 1) as f64
            }
        })
        .collect()
}

/// Trapezoidal area under a monotone curve from x = 0 up to `limit`,
/// interpolating linearly at the limit.
pub fn area_up_to(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// PRO curve points `(FPR, mean component overlap)`, starting at the
/// `(0, 0)` anchor and then for thresholds from the highest to the lowest.
/// A pixel is positive at threshold `t` when its score is `>= t`.
pub fn pro_curve(maps: &[MaskedMap], thresholds: usize) -> Result<Vec<(f64, f64)>> {
    if thresholds < 1 {
        return Err(Error::config("PRO needs at least one threshold"));
    }
    let components: usize = maps.iter().map(|m| m.num_components).sum();
    if components == 0 {
        return Err(Error::DegenerateLabels(
            "no defect pixels in any mask".into(),
        ));
    }
    let normals: usize = maps
        .iter()
        .map(|m| m.mask.data.len() - m.mask.count())
        .sum();
    if normals == 0 {
        return Err(Error::DegenerateLabels(
            "no anomaly-free pixels to measure FPR".into(),
        ));
    }
    let (lo, hi) = maps
        .iter()
        .flat_map(|m| m.pixel_map.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let grid = threshold_grid(lo, hi, thresholds);

    // Highest threshold index each pixel clears; every pixel clears index 0.
    let top_index = |v: f32| grid.partition_point(|&t| t <= v as f64) - 1;
    let mut normal_hist = vec![0usize; thresholds];
    let mut comp_hist = vec![0usize; components * thresholds];
    let mut comp_size = vec![0usize; components];
    let mut base = 0;
    for m in maps {
        for (p, &v) in m.pixel_map.iter().enumerate() {
            let k = top_index(v);
            match m.components[p] {
                0 => normal_hist[k] += 1,
                label => {
                    let c = base + label as usize - 1;
                    comp_hist[c * thresholds + k] += 1;
                    comp_size[c] += 1;
                }
            }
        }
        base += m.num_components;
    }

    let mut points = Vec::with_capacity(thresholds + 1);
    points.push((0.0, 0.0));
    let mut false_pos = 0usize;
    let mut covered = vec![0usize; components];
    for k in (0..thresholds).rev() {
        false_pos += normal_hist[k];
        let mut overlap = 0.0;
        for c in 0..components {
            covered[c] += comp_hist[c * thresholds + k];
            overlap += covered[c] as f64 / comp_size[c] as f64;
        }
        points.push((
            false_pos as f64 / normals as f64,
            overlap / components as f64,
        ));
    }
    Ok(points)
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn pro(maps: &[MaskedMap], fpr_limit: f64, thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::config(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    let curve = pro_curve(maps, thresholds)?;
    Ok(area_up_to(&curve, fpr_limit) / fpr_limit)
}

/// Every pixel of every map as one labeled set.
pub fn pixel_scores(maps: &[MaskedMap]) -> Result<LabeledScores> {
    let scores = maps
        .iter()
        .flat_map(|m| m.pixel_map.iter().map(|&v| v as f64))
        .collect();
    let labels = maps
        .iter()
        .flat_map(|m| m.mask.data.iter().copied())
        .collect();
    LabeledScores::new(scores, labels)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "image_auroc,image_ap,pixel_auroc,pro";

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{}",
            cell(self.image_auroc),
            cell(self.image_ap),
            cell(self.pixel_auroc),
            cell(self.pro)
        )
    }
}

pub fn image_metrics(data: &LabeledScores) -> Result<MetricsReport> {
    Ok(MetricsReport {
        image_auroc: Some(auroc(data)?),
        image_ap: Some(average_precision(data)?),
        ..MetricsReport::default()
    })
}

pub fn pixel_metrics(
    maps: &[MaskedMap],
    fpr_limit: f64,
    thresholds: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        pixel_auroc: Some(auroc(&pixel_scores(maps)?)?),
        pro: Some(pro(maps, fpr_limit, thresholds)?),
        ..MetricsReport::default()
    })
}
