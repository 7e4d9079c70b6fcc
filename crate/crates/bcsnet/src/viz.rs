//! Side-by-side panel image: input, GT, S₂, S_b, S_s and the level-2
//! spatial attention as a heat map, each under a short label.

use bcsnet_core::data::{BoundaryMask, DatasetRecord};
use bcsnet_core::model::DecoderOutputs;

pub const PANELS: usize = 6;
pub const GUTTER: usize = 4;
pub const LABELS: [&str; PANELS] = ["INPUT", "GT", "S2", "SB", "SS", "AS"];
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
const LABEL_PAD: usize = 2;
pub const LABEL_HEIGHT: usize = GLYPH_H + 2 * LABEL_PAD;
const BACKGROUND: [u8; 3] = [32, 32, 32];
const INK: [u8; 3] = [235, 235, 235];

/// 3×5 glyphs, one row per entry, most significant of 3 bits on the left.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        _ => [0; GLYPH_H],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub panel_height: usize,
    pub panel_width: usize,
}

impl Layout {
    /// `6·W + 5·GUTTER`.
    pub fn width(&self) -> usize {
        PANELS * self.panel_width + (PANELS - 1) * GUTTER
    }

    pub fn height(&self) -> usize {
        LABEL_HEIGHT + self.panel_height
    }

    /// Left edge of panel `i`.
    pub fn panel_x(&self, i: usize) -> usize {
        i * (self.panel_width + GUTTER)
    }
}

/// Piecewise-linear blue → cyan → yellow → red.
pub fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |centre: f64| ((1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn gray(v: f64) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

struct Canvas {
    width: usize,
    raw: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.raw[i..i + 3].copy_from_slice(&rgb);
    }

    fn text(&mut self, x0: usize, y0: usize, s: &str, max_w: usize) {
        for (k, c) in s.chars().enumerate() {
            let gx = x0 + k * (GLYPH_W + 1);
            if gx + GLYPH_W > x0 + max_w {
                break;
            }
            for (row, bits) in glyph(c).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.put(gx + col, y0 + row, INK);
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour upsample of an `h×w` plane to `H×W`.
fn upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y * h / out_h).min(h - 1);
        for x in 0..out_w {
            out.push(src[sy * w + (x * w / out_w).min(w - 1)]);
        }
    }
    out
}

/// Render the six panels for the first image of `outputs` as interleaved
/// RGB. Without AGGC there is no attention map and that panel stays dark.
pub fn render(record: &DatasetRecord, outputs: &DecoderOutputs) -> (Layout, Vec<u8>) {
    let (h, w) = (record.height(), record.width());
    let layout = Layout {
        panel_height: h,
        panel_width: w,
    };
    let mut canvas = Canvas {
        width: layout.width(),
        raw: BACKGROUND.repeat(layout.width() * layout.height()),
    };
    let mask = record.mask.0.to_f64();
    let attention = outputs.attention2.as_ref().map(|a| {
        let s = a.shape();
        upsample(a.batch_slice(0), s.h, s.w, h, w)
    });
    let planes: [Option<&[f64]>; PANELS] = [
        Some(record.slice.channel(0)),
        Some(&mask),
        Some(outputs.s2.batch_slice(0)),
        Some(outputs.s_b.batch_slice(0)),
        Some(outputs.s_s.batch_slice(0)),
        attention.as_deref(),
    ];
    for (i, plane) in planes.iter().enumerate() {
        let x0 = layout.panel_x(i);
        canvas.text(x0 + 1, LABEL_PAD, LABELS[i], w.saturating_sub(1));
        let Some(plane) = plane else { continue };
        let colour = if i == PANELS - 1 { heat } else { gray };
        for y in 0..h {
            for x in 0..w {
                canvas.put(x0 + x, LABEL_HEIGHT + y, colour(plane[y * w + x]));
            }
        }
    }
    (layout, canvas.raw)
}

/// Mean of `s_b` on boundary pixels and off them.
pub fn boundary_contrast(s_b: &[f64], boundary: &BoundaryMask) -> (f64, f64) {
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &b) in s_b.iter().zip(boundary.0.pixels()) {
        if b == 1 {
            on += v;
            n_on += 1;
        } else {
            off += v;
            n_off += 1;
        }
    }
    (on / n_on.max(1) as f64, off / n_off.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcsnet_core::model::BcsNet;
    use bcsnet_core::synth::synth_blobs;

    #[test]
    fn layout_arithmetic() {
        let l = Layout {
            panel_height: 64,
            panel_width: 48,
        };
        assert_eq!(l.width(), 6 * 48 + 5 * GUTTER);
        assert_eq!(l.height(), 64 + LABEL_HEIGHT);
        assert_eq!(l.panel_x(5) + 48, l.width());
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 128]);
        assert_eq!(heat(1.0), [128, 0, 0]);
        assert_eq!(heat(0.5), [128, 255, 128]);
    }

    #[test]
    fn panels_carry_the_maps() {
        let cfg = crate::config::TrainConfig {
            image_size: [32, 32],
            encoder_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
            decoder_width: 8,
            boundary_width: 4,
            ..Default::default()
        };
        let (net, store) = BcsNet::new(cfg.model_config(), 1).unwrap();
        let rec = &synth_blobs(1, 32, 32, 1).unwrap()[0];
        let out = net.infer(&store, &rec.slice.to_tensor()).unwrap();
        let (l, raw) = render(rec, &out);
        assert_eq!(raw.len(), 3 * l.width() * l.height());
        let px = |x: usize, y: usize| &raw[3 * (y * l.width() + x)..3 * (y * l.width() + x) + 3];
        // input panel: gray of the slice
        assert_eq!(px(5, LABEL_HEIGHT + 7), gray(rec.slice.channel(0)[7 * 32 + 5]));
        // GT panel: 0 or 255
        let g = px(l.panel_x(1) + 3, LABEL_HEIGHT + 9)[0];
        assert_eq!(g, 255 * rec.mask.0.pixels()[9 * 32 + 3]);
        // gutter untouched
        assert_eq!(px(l.panel_x(1) - 1, LABEL_HEIGHT + 3), BACKGROUND);
        // label ink present above each panel
        for i in 0..PANELS {
            let inked = (0..LABEL_HEIGHT).any(|y| (0..32).any(|x| px(l.panel_x(i) + x, y) == INK));
            assert!(inked, "panel {i} label");
        }
    }

    #[test]
    fn contrast_means() {
        let b = BoundaryMask(bcsnet_core::data::BinaryMap::new(1, 4, vec![1, 0, 1, 0]).unwrap());
        assert_eq!(boundary_contrast(&[1.0, 0.0, 0.5, 0.5], &b), (0.75, 0.25));
    }
}
