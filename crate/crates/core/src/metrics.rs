//! Evaluation measures: Dice, precision, recall, S-measure, E-measure, MAE.
//!
//! Overlap measures use the prediction binarised at a threshold (0.5 by
//! default, `P ≥ t` is foreground). S-measure, E-measure and MAE use the
//! continuous map.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pixel counts of a binary prediction against a binary target.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        bail!(Shape, "confusion: {} vs {} pixels", pred.len(), gt.len());
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => bail!(Validation, "confusion: non-binary value ({p}, {g})"),
        }
    }
    Ok(c)
}

/// `(TP/(TP+FP), TP/(TP+FN))`. When prediction and target are both empty
/// both are 1; any other zero denominator gives 0.
pub fn precision_recall(c: &Confusion) -> (f64, f64) {
    if c.tp + c.fp == 0 && c.tp + c.fn_ == 0 {
        return (1.0, 1.0);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Dice `2|P∩G| / (|P|+|G|)`; both empty gives 1.
pub fn dsc(c: &Confusion) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / den as f64
    }
}

pub fn binarize(p: &[f64], threshold: f64) -> Vec<u8> {
    p.iter().map(|&v| (v >= threshold) as u8).collect()
}

/// Mean absolute error.
pub fn mae(p: &[f64], g: &[f64]) -> Result<f64> {
    if p.len() != g.len() || p.is_empty() {
        bail!(Shape, "mae: {} vs {} pixels", p.len(), g.len());
    }
    Ok(p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

const EPS: f64 = f64::EPSILON;

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0);
    for x in v {
        s += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Object score over the pixels selected by `sel`.
fn object_score(values: &[f64], sel: impl Fn(usize) -> bool) -> f64 {
    let picked: Vec<f64> = (0..values.len()).filter(|&i| sel(i)).map(|i| values[i]).collect();
    if picked.is_empty() {
        return 0.0;
    }
    let (x, n) = mean(picked.iter().copied());
    let sigma = if n > 1 {
        math::sqrt(picked.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &[f64], g: &[f64]) -> f64 {
    let fg = object_score(p, |i| g[i] > 0.5);
    let inv: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let bg = object_score(&inv, |i| g[i] <= 0.5);
    let (u, _) = mean(g.iter().copied());
    u * fg + (1.0 - u) * bg
}

/// Structural similarity of one region, as used by the region term.
fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, _) = mean(p.iter().copied());
    let (y, _) = mean(g.iter().copied());
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in p.iter().zip(g) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let d = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid as 1-based split coordinates `(col, row)`: the left
/// part holds columns `0..col`, the top part rows `0..row`.
fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.iter().filter(|v| **v > 0.5).count() as f64;
    if total == 0.0 {
        return (math::round_half_up(w as f64 / 2.0) as usize, math::round_half_up(h as f64 / 2.0) as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] > 0.5 {
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    (
        math::round_half_up(sx / total) as usize + 1,
        math::round_half_up(sy / total) as usize + 1,
    )
}

fn crop(v: &[f64], w: usize, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        out.extend_from_slice(&v[y * w + cols.start..y * w + cols.end]);
    }
    out
}

fn s_region(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let weights = [w1, w2, w3, 1.0 - w1 - w2 - w3];
    let mut score = 0.0;
    for ((rows, cols), wt) in quads.into_iter().zip(weights) {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let pq = crop(p, w, rows.clone(), cols.clone());
        let gq = crop(g, w, rows, cols);
        score += wt * region_ssim(&pq, &gq);
    }
    score
}

/// Structure measure `α·S_object + (1−α)·S_region` of a continuous map
/// against a binary target. Empty targets score `1 − mean(P)`, full
/// targets `mean(P)`.
pub fn s_measure(p: &[f64], g: &[f64], height: usize, width: usize, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Validation, "s_measure alpha {alpha} outside [0, 1]");
    }
    if p.len() != g.len() || p.len() != height * width || p.is_empty() {
        bail!(Shape, "s_measure: {} / {} pixels for {height}x{width}", p.len(), g.len());
    }
    let (y, _) = mean(g.iter().copied());
    let (x, _) = mean(p.iter().copied());
    let q = if y == 0.0 {
        1.0 - x
    } else if y == 1.0 {
        x
    } else {
        alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g, height, width)
    };
    Ok(q.max(0.0))
}

/// Offset in the alignment denominator (machine epsilon, as in the
/// reference implementation).
pub const E_MEASURE_DELTA: f64 = f64::EPSILON;

/// Enhanced-alignment measure: mean of `(ξ+1)²/4` with
/// `ξ = 2·φ_G·φ_P / (φ_G² + φ_P² + δ)` over mean-centred maps. An empty
/// target aligns `1 − P`, a full target aligns `P`.
pub fn e_measure(p: &[f64], g: &[f64]) -> Result<f64> {
    if p.len() != g.len() || p.is_empty() {
        bail!(Shape, "e_measure: {} vs {} pixels", p.len(), g.len());
    }
    let n = p.len() as f64;
    let fg = g.iter().filter(|v| **v > 0.5).count();
    let total = if fg == 0 {
        p.iter().map(|v| 1.0 - v).sum::<f64>()
    } else if fg == p.len() {
        p.iter().sum::<f64>()
    } else {
        let (mp, _) = mean(p.iter().copied());
        let (mg, _) = mean(g.iter().copied());
        p.iter()
            .zip(g)
            .map(|(a, b)| {
                let (ap, ag) = (a - mp, b - mg);
                let xi = 2.0 * ag * ap / (ag * ag + ap * ap + E_MEASURE_DELTA);
                (xi + 1.0) * (xi + 1.0) / 4.0
            })
            .sum::<f64>()
    };
    Ok(total / n)
}

/// One row of a [`MetricReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub dsc: f64,
    pub prec: f64,
    pub recall: f64,
    pub sm: f64,
    pub ephi: f64,
    pub mae: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 6] {
        [self.dsc, self.prec, self.recall, self.sm, self.ephi, self.mae]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Arithmetic means in `rows` order (`id = "mean"`).
    pub mean: MetricRow,
}

/// Default S-measure weight.
pub const S_ALPHA: f64 = 0.5;

/// All six measures for one image.
pub fn evaluate_image(
    id: &str,
    p: &[f64],
    g: &[u8],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<MetricRow> {
    if p.len() != g.len() || p.len() != height * width {
        bail!(Shape, "image `{id}`: prediction {} px, mask {} px, size {height}x{width}", p.len(), g.len());
    }
    let c = confusion(&binarize(p, threshold), g)?;
    let (prec, recall) = precision_recall(&c);
    let gf: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    Ok(MetricRow {
        id: id.into(),
        dsc: dsc(&c),
        prec,
        recall,
        sm: s_measure(p, &gf, height, width, S_ALPHA)?,
        ephi: e_measure(p, &gf)?,
        mae: mae(p, &gf)?,
    })
}

/// Probability map for one image, tagged with its record id.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

/// Evaluate predictions against `(id, mask, height, width)` targets paired
/// by position; ids must match.
pub fn evaluate_dataset<'a>(
    predictions: &[Prediction],
    targets: impl IntoIterator<Item = (&'a str, &'a [u8])>,
    threshold: f64,
) -> Result<MetricReport> {
    let targets: Vec<_> = targets.into_iter().collect();
    if predictions.len() != targets.len() {
        bail!(
            Validation,
            "{} predictions for {} records",
            predictions.len(),
            targets.len()
        );
    }
    if predictions.is_empty() {
        bail!(Validation, "cannot evaluate an empty dataset");
    }
    let mut rows = Vec::with_capacity(predictions.len());
    for (p, (id, g)) in predictions.iter().zip(targets) {
        if p.id != id {
            bail!(Validation, "prediction id `{}` does not match record id `{id}`", p.id);
        }
        rows.push(evaluate_image(id, &p.probs, g, p.height, p.width, threshold)?);
    }
    let mean = mean_row(&rows);
    Ok(MetricReport { rows, mean })
}

fn mean_row(rows: &[MetricRow]) -> MetricRow {
    let mut acc = [0.0; 6];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    MetricRow {
        id: "mean".into(),
        dsc: acc[0] / n,
        prec: acc[1] / n,
        recall: acc[2] / n,
        sm: acc[3] / n,
        ephi: acc[4] / n,
        mae: acc[5] / n,
    }
}
