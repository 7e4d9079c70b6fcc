//! Segmentation and boundary losses.
//!
//! Every map is a row-major `H×W` slice. Each loss has a `*_grad` twin that
//! also returns `∂loss/∂P`, which the trainer feeds to the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the
/// logarithmic losses.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_WINDOW: usize = 31;
pub const DEFAULT_LAMBDA: f64 = 5.0;

/// Per-pixel weights `ε ≥ 0` emphasising pixels near the mask boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Mirror an out-of-range index back inside `0..n` (edge not repeated).
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// `ε = λ·|mean_{k×k}(G) − G|` with reflective padding.
pub fn make_weight_map(g: &[f64], height: usize, width: usize, k: usize, lambda: f64) -> Result<WeightMap> {
    if k % 2 == 0 {
        bail!(Validation, "weight window must be odd, got {k}");
    }
    if g.len() != height * width {
        bail!(Shape, "ground truth has {} pixels, expected {}", g.len(), height * width);
    }
    if lambda < 0.0 {
        bail!(Validation, "weight scale must be non-negative, got {lambda}");
    }
    let r = (k / 2) as isize;
    let (ph, pw) = (height + 2 * r as usize, width + 2 * r as usize);
    // summed-area table over the padded map
    let mut sat = vec![0.0; (ph + 1) * (pw + 1)];
    for y in 0..ph {
        let sy = reflect(y as isize - r, height);
        let mut row = 0.0;
        for x in 0..pw {
            let sx = reflect(x as isize - r, width);
            row += g[sy * width + sx];
            sat[(y + 1) * (pw + 1) + x + 1] = sat[y * (pw + 1) + x + 1] + row;
        }
    }
    let area = (k * k) as f64;
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            // window rows y..y+k, cols x..x+k in padded coordinates
            let (y0, x0, y1, x1) = (y, x, y + k, x + k);
            let s = sat[y1 * (pw + 1) + x1] - sat[y0 * (pw + 1) + x1] - sat[y1 * (pw + 1) + x0]
                + sat[y0 * (pw + 1) + x0];
            values.push(lambda * (s / area - g[y * width + x]).abs());
        }
    }
    Ok(WeightMap { height, width, values })
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Shape, "{what}: {a} pixels vs {b}");
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// Pixel cross-entropy and its derivative w.r.t. the unclamped probability.
#[inline]
fn bce_term(p: f64, g: f64) -> (f64, f64) {
    let (pc, inside) = clamp_prob(p);
    let v = -g * math::ln(pc) - (1.0 - g) * math::ln(1.0 - pc);
    let d = if inside { -g / pc + (1.0 - g) / (1.0 - pc) } else { 0.0 };
    (v, d)
}

/// Weighted binary cross-entropy:
/// `Σ[−G log P − (1−G) log(1−P)]·(1+ε) / Σε`, with the denominator
/// replaced by `Σ(1+ε)` when `Σε = 0`.
pub fn wbce(p: &[f64], g: &[f64], eps: &WeightMap) -> Result<f64> {
    Ok(wbce_grad(p, g, eps)?.0)
}

pub fn wbce_grad(p: &[f64], g: &[f64], eps: &WeightMap) -> Result<(f64, Vec<f64>)> {
    check_len("wbce prediction/target", p.len(), g.len())?;
    check_len("wbce prediction/weights", p.len(), eps.values.len())?;
    let sum_eps: f64 = eps.values.iter().sum();
    let denom = if sum_eps > 0.0 {
        sum_eps
    } else {
        eps.values.iter().map(|e| 1.0 + e).sum()
    };
    let mut num = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for ((&pv, &gv), &e) in p.iter().zip(g).zip(&eps.values) {
        let (v, d) = bce_term(pv, gv);
        num += v * (1.0 + e);
        grad.push(d * (1.0 + e) / denom);
    }
    Ok((num / denom, grad))
}

/// Weighted soft IoU: `1 − Σ(P·G)(1+ε) / Σ(P+G−P·G)(1+ε)`; an empty union
/// gives 0.
pub fn wiou(p: &[f64], g: &[f64], eps: &WeightMap) -> Result<f64> {
    Ok(wiou_grad(p, g, eps)?.0)
}

pub fn wiou_grad(p: &[f64], g: &[f64], eps: &WeightMap) -> Result<(f64, Vec<f64>)> {
    check_len("wiou prediction/target", p.len(), g.len())?;
    check_len("wiou prediction/weights", p.len(), eps.values.len())?;
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&pv, &gv), &e) in p.iter().zip(g).zip(&eps.values) {
        inter += pv * gv * (1.0 + e);
        union += (pv + gv - pv * gv) * (1.0 + e);
    }
    if union <= 0.0 {
        return Ok((0.0, vec![0.0; p.len()]));
    }
    let grad = g
        .iter()
        .zip(&eps.values)
        .map(|(&gv, &e)| {
            let di = gv * (1.0 + e);
            let du = (1.0 - gv) * (1.0 + e);
            -(di * union - inter * du) / (union * union)
        })
        .collect();
    Ok((1.0 - inter / union, grad))
}

/// Mean pixel cross-entropy of the boundary map.
pub fn boundary_bce(p: &[f64], g: &[f64]) -> Result<f64> {
    Ok(boundary_bce_grad(p, g)?.0)
}

pub fn boundary_bce_grad(p: &[f64], g: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("boundary bce prediction/target", p.len(), g.len())?;
    let n = p.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &gv) in p.iter().zip(g) {
        let (v, d) = bce_term(pv, gv);
        sum += v;
        grad.push(d / n);
    }
    Ok((sum / n, grad))
}

/// Index of each supervised segmentation output in [`LossBreakdown`].
pub const SEG_OUTPUTS: [&str; 4] = ["S2", "S3", "S4", "Ss"];

/// Components of the total objective for one record (or a batch mean).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Weighted BCE of `S₂, S₃, S₄, S_s`.
    pub wbce: [f64; 4],
    /// Weighted IoU of `S₂, S₃, S₄, S_s`.
    pub wiou: [f64; 4],
    pub boundary: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Sum of the nine components.
    pub fn component_sum(&self) -> f64 {
        self.wbce.iter().sum::<f64>() + self.wiou.iter().sum::<f64>() + self.boundary
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<alloc::string::String> {
        for (i, name) in SEG_OUTPUTS.iter().enumerate() {
            if !self.wbce[i].is_finite() {
                return Some(alloc::format!("wbce[{name}]"));
            }
            if !self.wiou[i].is_finite() {
                return Some(alloc::format!("wiou[{name}]"));
            }
        }
        if !self.boundary.is_finite() {
            return Some("boundary_bce[Sb]".into());
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            wbce: self.wbce.map(|v| v * k),
            wiou: self.wiou.map(|v| v * k),
            boundary: self.boundary * k,
            total: self.total * k,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        for i in 0..4 {
            self.wbce[i] += other.wbce[i];
            self.wiou[i] += other.wiou[i];
        }
        self.boundary += other.boundary;
        self.total += other.total;
    }
}

/// Borrowed side-output maps of one record, each `H×W` at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct OutputMaps<'a> {
    pub s_b: &'a [f64],
    pub s_s: &'a [f64],
    pub s4: &'a [f64],
    pub s3: &'a [f64],
    pub s2: &'a [f64],
}

/// `∂total/∂map` for each side output.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub s_b: Vec<f64>,
    pub s_s: Vec<f64>,
    pub s4: Vec<f64>,
    pub s3: Vec<f64>,
    pub s2: Vec<f64>,
}

/// Total objective: `Σ_{S₂,S₃,S₄,S_s}(wiou + wbce) + boundary_bce(S_b)`.
pub fn total_loss(out: &OutputMaps<'_>, g: &[f64], g_b: &[f64], eps: &WeightMap) -> Result<LossBreakdown> {
    Ok(total_loss_grad(out, g, g_b, eps)?.0)
}

pub fn total_loss_grad(
    out: &OutputMaps<'_>,
    g: &[f64],
    g_b: &[f64],
    eps: &WeightMap,
) -> Result<(LossBreakdown, OutputGrads)> {
    let mut b = LossBreakdown::default();
    let maps = [out.s2, out.s3, out.s4, out.s_s];
    let mut grads: [Vec<f64>; 4] = Default::default();
    for (i, p) in maps.iter().enumerate() {
        let (lb, gb) = wbce_grad(p, g, eps)?;
        let (li, gi) = wiou_grad(p, g, eps)?;
        b.wbce[i] = lb;
        b.wiou[i] = li;
        grads[i] = gb.iter().zip(&gi).map(|(a, c)| a + c).collect();
    }
    let (lbd, gbd) = boundary_bce_grad(out.s_b, g_b)?;
    b.boundary = lbd;
    b.total = b.component_sum();
    let [s2, s3, s4, s_s] = grads;
    Ok((
        b,
        OutputGrads {
            s_b: gbd,
            s_s,
            s4,
            s3,
            s2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn ones(n: usize, v: f64) -> WeightMap {
        let side = (n as f64).sqrt() as usize;
        WeightMap {
            height: side,
            width: n / side,
            values: vec![v; n],
        }
    }

    /// Brute-force box mean with reflective indexing.
    fn pooled_oracle(g: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        s += g[reflect(y + dy, h) * w + reflect(x + dx, w)];
                    }
                }
                out[y as usize * w + x as usize] = s / (k * k) as f64;
            }
        }
        out
    }

    #[test]
    fn weight_map_of_constant_mask_is_zero() {
        for v in [0.0, 1.0] {
            let m = make_weight_map(&[v; 100], 10, 10, 5, 5.0).unwrap();
            assert!(m.values.iter().all(|e| *e == 0.0));
        }
    }

    #[test]
    fn weight_map_half_plane_matches_pooling_oracle() {
        let g: Vec<f64> = (0..64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect();
        let m = make_weight_map(&g, 8, 8, 3, 5.0).unwrap();
        let pooled = pooled_oracle(&g, 8, 8, 3);
        for i in 0..64 {
            assert!((m.values[i] - 5.0 * (pooled[i] - g[i]).abs()).abs() < 1e-12);
        }
        // edge-adjacent pixels: local mean 2/3 (inside) and 1/3 (outside)
        assert!((m.values[3] - 5.0 / 3.0).abs() < 1e-12);
        assert!((m.values[4] - 5.0 / 3.0).abs() < 1e-12);
        // far from the edge
        assert_eq!(m.values[0], 0.0);
        assert_eq!(m.values[7], 0.0);
    }

    #[test]
    fn weight_map_large_window_on_small_image() {
        let g: Vec<f64> = (0..256).map(|i| if (i / 16) % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let m = make_weight_map(&g, 16, 16, 31, 5.0).unwrap();
        let pooled = pooled_oracle(&g, 16, 16, 31);
        for i in 0..256 {
            assert!((m.values[i] - 5.0 * (pooled[i] - g[i]).abs()).abs() < 1e-12);
            assert!((0.0..=5.0).contains(&m.values[i]));
        }
    }

    #[test]
    fn even_window_is_rejected() {
        assert!(make_weight_map(&[0.0; 4], 2, 2, 4, 5.0).is_err());
    }

    #[test]
    fn wbce_closed_forms() {
        let n = 16;
        let g: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let l = wbce(&vec![0.5; n], &g, &ones(n, 1.0)).unwrap();
        assert!((l - 2.0 * LN_2).abs() < 1e-12);
        // ε ≡ c: loss = (1+c)/c · mean cross-entropy
        let p: Vec<f64> = (0..n).map(|i| 0.1 + 0.05 * i as f64).collect();
        let mean_ce: f64 = p
            .iter()
            .zip(&g)
            .map(|(p, g)| -g * p.ln() - (1.0 - g) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64;
        for c in [0.5, 2.0, 7.0] {
            let l = wbce(&p, &g, &ones(n, c)).unwrap();
            assert!((l - (1.0 + c) / c * mean_ce).abs() < 1e-12);
        }
    }

    #[test]
    fn wbce_perfect_prediction_and_zero_weight_guard() {
        let g = [1.0, 0.0, 1.0, 0.0];
        assert!(wbce(&g, &g, &ones(4, 0.3)).unwrap() <= 1e-6);
        // Σε = 0 falls back to Σ(1+ε): plain mean cross-entropy
        let l = wbce(&[0.5; 4], &g, &ones(4, 0.0)).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn wbce_is_symmetric_under_complement() {
        let p = [0.2, 0.7, 0.95, 0.4];
        let g = [1.0, 0.0, 1.0, 1.0];
        let e = WeightMap {
            height: 2,
            width: 2,
            values: vec![0.1, 2.0, 0.0, 1.5],
        };
        let pc: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let gc: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        assert_eq!(wbce(&p, &g, &e).unwrap(), wbce(&pc, &gc, &e).unwrap());
    }

    #[test]
    fn wiou_closed_forms() {
        let g = [1.0, 0.0, 0.0, 0.0];
        let e = ones(4, 0.0);
        assert_eq!(wiou(&[1.0, 1.0, 0.0, 0.0], &g, &e).unwrap(), 0.5);
        assert_eq!(wiou(&g, &g, &ones(4, 3.0)).unwrap(), 0.0);
        let comp = [0.0, 1.0, 1.0, 1.0];
        assert_eq!(wiou(&comp, &g, &ones(4, 2.0)).unwrap(), 1.0);
        assert_eq!(wiou(&[0.0; 4], &[0.0; 4], &e).unwrap(), 0.0);
    }

    #[test]
    fn boundary_bce_closed_forms() {
        let gb = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert!((boundary_bce(&[0.5; 6], &gb).unwrap() - LN_2).abs() < 1e-12);
        assert!(boundary_bce(&gb, &gb).unwrap() <= 1e-6);
        let l = boundary_bce(&[1.0 - 1e-7; 6], &[0.0; 6]).unwrap();
        assert!((l - 16.118).abs() < 1e-3, "{l}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(boundary_bce(&[0.5; 3], &[0.0; 4]).is_err());
        assert!(wbce(&[0.5; 4], &[0.0; 4], &ones(9, 1.0)).is_err());
    }

    #[test]
    fn total_is_sum_of_components() {
        let g: Vec<f64> = (0..64).map(|i| ((i % 8) > 2 && (i / 8) > 3) as u8 as f64).collect();
        let gb: Vec<f64> = (0..64).map(|i| (i % 5 == 0) as u8 as f64).collect();
        let eps = make_weight_map(&g, 8, 8, 3, 5.0).unwrap();
        let maps: Vec<Vec<f64>> = (0..5)
            .map(|k| (0..64).map(|i| ((i * 7 + k * 13) % 17) as f64 / 17.0 + 0.01).collect())
            .collect();
        let out = OutputMaps {
            s_b: &maps[0],
            s_s: &maps[1],
            s4: &maps[2],
            s3: &maps[3],
            s2: &maps[4],
        };
        let b = total_loss(&out, &g, &gb, &eps).unwrap();
        assert!((b.total - b.component_sum()).abs() <= 1e-9);
        assert!(b.wbce.iter().chain(&b.wiou).all(|v| *v >= 0.0));
    }

    #[test]
    fn uniform_half_outputs_match_component_closed_forms() {
        let g: Vec<f64> = (0..64).map(|i| ((i % 8) < 3) as u8 as f64).collect();
        let gb = vec![0.0; 64];
        let eps = ones(64, 1.0);
        let half = vec![0.5; 64];
        let out = OutputMaps {
            s_b: &half,
            s_s: &half,
            s4: &half,
            s3: &half,
            s2: &half,
        };
        // wiou at P ≡ 0.5, ε ≡ 1: 1 − 0.5|G| / (0.5·N + 0.5|G|)
        let fg = g.iter().sum::<f64>();
        let wiou_half = 1.0 - 0.5 * fg / (0.5 * 64.0 + 0.5 * fg);
        let b = total_loss(&out, &g, &gb, &eps).unwrap();
        let want = 4.0 * (2.0 * LN_2 + wiou_half) + LN_2;
        assert!((b.total - want).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), p: &[f64]) {
        let (_, grad) = f(p);
        let h = 1e-4;
        for i in 0..p.len() {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[i] += h;
            b[i] -= h;
            let num = (f(&a).0 - f(&b).0) / (2.0 * h);
            let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-12);
            assert!(rel <= 1e-5, "pixel {i}: analytic {} numeric {num}", grad[i]);
        }
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        // deterministic pseudo-random 4×4 instances
        let mut s = 12345u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..5 {
            let p: Vec<f64> = (0..16).map(|_| 0.05 + 0.9 * next()).collect();
            let g: Vec<f64> = (0..16).map(|_| (next() > 0.5) as u8 as f64).collect();
            let eps = make_weight_map(&g, 4, 4, 3, 5.0).unwrap();
            fd_check(|p| wbce_grad(p, &g, &eps).unwrap(), &p);
            fd_check(|p| wiou_grad(p, &g, &eps).unwrap(), &p);
            fd_check(|p| boundary_bce_grad(p, &g).unwrap(), &p);
        }
    }
}
