//! Boundary-context-semantic reconstruction decoder.
//!
//! Three blocks at levels 4, 3 and 2 progressively rebuild the infection
//! map. Each block takes the previous decoder features and the encoder
//! features of its level refined by the AGGC module (spatial attention,
//! then boundary attention, then global context), concatenates them, gates
//! the result with the semantic guidance map and convolves. Two auxiliary
//! heads feed every block: the boundary attention (BA) unit on `f¹` and the
//! semantic guidance (SG) unit fusing `f²..f⁴` at `f³`'s resolution.
//!
//! Side outputs are produced as logits at their native resolution, resized
//! bilinearly to the input size, then passed through the sigmoid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{EncoderConfig, LEVELS};
use crate::error::{bail, Result};
use crate::graph::Var;
use crate::math;
use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Channel width of the decoder features `F⁴, F³, F²`.
    pub width: usize,
    /// Hidden width of the boundary attention unit.
    pub boundary_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 32,
            boundary_width: 16,
        }
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Feed the raw encoder features `fⁱ` in place of the AGGC output.
    pub disable_aggc: bool,
    /// Drop the `F̄ ⊙ S_s` gating term.
    pub disable_sg: bool,
}

/// Boundary attention unit: `σ(conv1×1(conv3×3(conv1×1(f¹))))`.
#[derive(Clone, Debug)]
pub struct BoundaryAttention {
    pub reduce: Conv2d,
    pub spread: Conv2d,
    pub head: Conv2d,
}

/// Boundary map at `f¹` resolution and at the input resolution.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryMaps {
    pub native: Var,
    pub full: Var,
}

impl BoundaryAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BoundaryAttention {
            reduce: Conv2d::new(store, "decoder.ba.reduce", in_channels, hidden, 1, true, rng)?,
            spread: Conv2d::new(store, "decoder.ba.spread", hidden, hidden, 3, true, rng)?,
            head: Conv2d::new(store, "decoder.ba.head", hidden, 1, 1, true, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, f1: Var, out_hw: (usize, usize)) -> Result<BoundaryMaps> {
        let x = self.reduce.forward(ctx, f1)?;
        let x = self.spread.forward(ctx, x)?;
        let logits = self.head.forward(ctx, x)?;
        let native = ctx.graph.sigmoid(logits);
        let up = ctx.graph.resize(logits, out_hw.0, out_hw.1);
        let full = ctx.graph.sigmoid(up);
        Ok(BoundaryMaps { native, full })
    }
}

/// Semantic guidance unit:
/// `σ(conv(down₂(proj(f²)) + proj(f³) + up₂(proj(f⁴))))` at `f³` resolution.
#[derive(Clone, Debug)]
pub struct SemanticGuidance {
    pub proj2: Conv2d,
    pub proj3: Conv2d,
    pub proj4: Conv2d,
    pub fuse: Conv2d,
}

/// Semantic guidance map at `f³` resolution and at the input resolution.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceMaps {
    pub native: Var,
    pub full: Var,
}

impl SemanticGuidance {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: [usize; LEVELS], rng: &mut R) -> Result<Self> {
        let common = channels[2];
        Ok(SemanticGuidance {
            proj2: Conv2d::new(store, "decoder.sg.proj2", channels[1], common, 1, true, rng)?,
            proj3: Conv2d::new(store, "decoder.sg.proj3", channels[2], common, 1, true, rng)?,
            proj4: Conv2d::new(store, "decoder.sg.proj4", channels[3], common, 1, true, rng)?,
            fuse: Conv2d::new(store, "decoder.sg.fuse", common, 1, 3, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        f2: Var,
        f3: Var,
        f4: Var,
        out_hw: (usize, usize),
    ) -> Result<GuidanceMaps> {
        let (s2, s3, s4) = (ctx.graph.shape(f2), ctx.graph.shape(f3), ctx.graph.shape(f4));
        if s2.h != 2 * s3.h || s2.w != 2 * s3.w || s3.h != 2 * s4.h || s3.w != 2 * s4.w {
            bail!(
                Validation,
                "semantic guidance expects levels 2, 3, 4 at halving resolutions, got {s2}, {s3}, {s4}"
            );
        }
        let p2 = self.proj2.forward(ctx, f2)?;
        let p2 = ctx.graph.avg_pool2(p2);
        let p3 = self.proj3.forward(ctx, f3)?;
        let p4 = self.proj4.forward(ctx, f4)?;
        let p4 = ctx.graph.resize(p4, s3.h, s3.w);
        let sum = ctx.graph.add(p2, p3)?;
        let sum = ctx.graph.add(sum, p4)?;
        let logits = self.fuse.forward(ctx, sum)?;
        let native = ctx.graph.sigmoid(logits);
        let up = ctx.graph.resize(logits, out_hw.0, out_hw.1);
        let full = ctx.graph.sigmoid(up);
        Ok(GuidanceMaps { native, full })
    }
}

/// Spatial attention: `A_s = σ(conv3×3([mean_c(f), max_c(f)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        Ok(SpatialAttention {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, 3, true, rng)?,
        })
    }

    /// Returns `(f_s, A_s)` with `f_s = A_s ⊙ f + f`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var) -> Result<(Var, Var)> {
        let avg = ctx.graph.channel_mean(f);
        let max = ctx.graph.channel_max(f);
        let desc = ctx.graph.concat(avg, max)?;
        let logits = self.conv.forward(ctx, desc)?;
        let attn = ctx.graph.sigmoid(logits);
        let gated = ctx.graph.mul(f, attn)?;
        let out = ctx.graph.add(gated, f)?;
        Ok((out, attn))
    }
}

/// `f_b = S_b ⊙ f_s + f_s`, with `S_b` resized bilinearly to `f_s`.
pub fn boundary_enhance(ctx: &mut Ctx<'_>, f_s: Var, s_b: Var) -> Result<Var> {
    let s = ctx.graph.shape(f_s);
    let sb = ctx.graph.resize(s_b, s.h, s.w);
    let gated = ctx.graph.mul(f_s, sb)?;
    ctx.graph.add(gated, f_s)
}

/// `f_aggc = ς·(G ⊙ f_b) + f_b` where `G` is the global context map of the
/// channel-normalised `f_b`.
pub fn global_context(ctx: &mut Ctx<'_>, f_b: Var, gain: Var) -> Result<Var> {
    if !ctx.value(f_b).all_finite() {
        bail!(NonFinite, "global context input");
    }
    let normed = ctx.graph.l2_normalize_channels(f_b);
    let g = ctx.graph.global_context(normed);
    let gated = ctx.graph.mul(g, f_b)?;
    let scaled = ctx.graph.scale(gated, gain)?;
    ctx.graph.add(scaled, f_b)
}

/// Dense relation map `ω` and context features `G` for one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContextMap {
    /// `(h·w)×(h·w)`, row-stochastic.
    pub omega: Vec<f64>,
    pub positions: usize,
    /// `1×C×h×w`.
    pub g: Tensor,
}

/// Reference evaluation of the global context step on a `1×C×h×w` map,
/// materialising `ω`. Returns `(f_aggc, ctx)`. Quadratic memory in `h·w`;
/// meant for inspection and tests, the network uses the streamed kernel.
pub fn global_context_reference(f_b: &Tensor, gain: f64) -> Result<(Tensor, GlobalContextMap)> {
    let s = f_b.shape();
    if s.n != 1 {
        bail!(Shape, "global_context_reference takes a single map, got {s}");
    }
    if !f_b.all_finite() {
        bail!(NonFinite, "global context input");
    }
    let (c, p) = (s.c, s.plane());
    let x = f_b.data();
    // channel-axis unit normalisation
    let mut xn = x.to_vec();
    for j in 0..p {
        let norm = math::sqrt((0..c).map(|k| x[k * p + j] * x[k * p + j]).sum());
        for k in 0..c {
            xn[k * p + j] = if norm > 0.0 { x[k * p + j] / norm } else { 0.0 };
        }
    }
    let mut omega = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            // ((XᵀX)ᵀ)_ij = x_j · x_i
            omega[i * p + j] = (0..c).map(|k| xn[k * p + j] * xn[k * p + i]).sum();
        }
        let row = &mut omega[i * p..(i + 1) * p];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| math::exp(v - m)).sum();
        row.iter_mut().for_each(|v| *v = math::exp(*v - m) / z);
    }
    let mut g = Tensor::zeros(s);
    for k in 0..c {
        for j in 0..p {
            let v: f64 = (0..p).map(|i| xn[k * p + i] * omega[i * p + j]).sum();
            g.data_mut()[k * p + j] = v;
        }
    }
    let out = Tensor::from_fn(s, |_, k, y, xx| {
        let i = k * p + y * s.w + xx;
        gain * g.data()[i] * x[i] + x[i]
    });
    Ok((
        out,
        GlobalContextMap {
            omega,
            positions: p,
            g,
        },
    ))
}

/// Attention-guided global context module for one level.
#[derive(Clone, Debug)]
pub struct Aggc {
    pub attention: SpatialAttention,
    /// Learnable context gain `ς`, initialised to zero.
    pub gain: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AggcOutput {
    pub features: Var,
    pub spatial_attention: Var,
}

impl Aggc {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        Ok(Aggc {
            attention: SpatialAttention::new(store, &format!("{name}.attention"), rng)?,
            gain: store.add(&format!("{name}.context_gain"), ParamKind::Trainable, Tensor::scalar(0.0))?,
        })
    }

    /// Spatial attention, then boundary attention, then global context.
    pub fn forward(&self, ctx: &mut Ctx<'_>, f: Var, s_b: Var) -> Result<AggcOutput> {
        let (f_s, attn) = self.attention.forward(ctx, f)?;
        let f_b = boundary_enhance(ctx, f_s, s_b)?;
        let gain = ctx.param(self.gain);
        let features = global_context(ctx, f_b, gain)?;
        Ok(AggcOutput {
            features,
            spatial_attention: attn,
        })
    }
}

/// One boundary-context-semantic reconstruction block.
#[derive(Clone, Debug)]
pub struct BcsrBlock {
    pub level: usize,
    pub aggc: Aggc,
    pub fuse: Conv2d,
    pub norm: BatchNorm2d,
    pub side: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct BcsrOutput {
    /// Decoder features `Fⁱ`.
    pub features: Var,
    /// `F̄ + F̄ ⊙ S_s` (or `F̄` with guidance disabled), before `conv(·)`.
    pub gated: Var,
    /// Side output at the input resolution.
    pub side: Var,
    pub spatial_attention: Option<Var>,
}

impl BcsrBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        level: usize,
        prev_channels: usize,
        enc_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("decoder.bcsr{level}");
        Ok(BcsrBlock {
            level,
            aggc: Aggc::new(store, &format!("{name}.aggc"), rng)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse.conv"), prev_channels + enc_channels, width, 3, true, rng)?,
            norm: BatchNorm2d::new(store, &format!("{name}.fuse.bn"), width)?,
            side: Conv2d::new(store, &format!("{name}.side"), width, 1, 1, true, rng)?,
        })
    }

    /// `Fⁱ = relu(conv(F̄ + F̄ ⊙ S_s))`, `F̄ = [F_prev, aggc(fⁱ)]`,
    /// `Sᵢ = σ(conv1×1(Fⁱ))`.
    ///
    /// `prev` is resized to `fⁱ`'s resolution when needed. `s_s` is taken
    /// at `f³` resolution and halved at level 4 / doubled at level 2.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        prev: Var,
        f_i: Var,
        s_b: Var,
        s_s: Var,
        ablation: Ablation,
        out_hw: (usize, usize),
    ) -> Result<BcsrOutput> {
        let fs = ctx.graph.shape(f_i);
        let prev = ctx.graph.resize(prev, fs.h, fs.w);
        let (enc, attn) = if ablation.disable_aggc {
            (f_i, None)
        } else {
            let a = self.aggc.forward(ctx, f_i, s_b)?;
            (a.features, Some(a.spatial_attention))
        };
        let cat = ctx.graph.concat(prev, enc)?;
        let gated = if ablation.disable_sg {
            cat
        } else {
            let ss = ctx.graph.shape(s_s);
            let guide = if ss.h == 2 * fs.h && ss.w == 2 * fs.w {
                ctx.graph.avg_pool2(s_s)
            } else {
                ctx.graph.resize(s_s, fs.h, fs.w)
            };
            if ctx.graph.shape(guide).h != fs.h || ctx.graph.shape(guide).w != fs.w {
                bail!(Validation, "guidance map does not reach level {} resolution", self.level);
            }
            let prod = ctx.graph.mul(cat, guide)?;
            ctx.graph.add(cat, prod)?
        };
        let x = self.fuse.forward(ctx, gated)?;
        let x = self.norm.forward(ctx, x)?;
        let features = ctx.graph.relu(x);
        let logits = self.side.forward(ctx, features)?;
        let up = ctx.graph.resize(logits, out_hw.0, out_hw.1);
        let side = ctx.graph.sigmoid(up);
        Ok(BcsrOutput {
            features,
            gated,
            side,
            spatial_attention: attn,
        })
    }
}

/// Side outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SideOutputs {
    pub s_b: Var,
    pub s_s: Var,
    pub s4: Var,
    pub s3: Var,
    pub s2: Var,
}

impl SideOutputs {
    /// In the order `(S_b, S_s, S₄, S₃, S₂)`.
    pub fn all(&self) -> [Var; 5] {
        [self.s_b, self.s_s, self.s4, self.s3, self.s2]
    }
}

#[derive(Clone, Debug)]
pub struct DecodeTrace {
    pub outputs: SideOutputs,
    /// Spatial attention maps of the blocks at levels 4, 3, 2 (absent when
    /// AGGC is disabled).
    pub spatial_attention: [Option<Var>; 3],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub ablation: Ablation,
    pub boundary: BoundaryAttention,
    pub guidance: SemanticGuidance,
    /// Blocks for levels 4, 3, 2, applied in that order.
    pub blocks: [BcsrBlock; 3],
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        config: DecoderConfig,
        ablation: Ablation,
        encoder: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.width == 0 || config.boundary_width == 0 {
            bail!(Validation, "decoder widths must be positive");
        }
        let ch = encoder.channels;
        let boundary = BoundaryAttention::new(store, ch[0], config.boundary_width, rng)?;
        let guidance = SemanticGuidance::new(store, ch, rng)?;
        let b4 = BcsrBlock::new(store, 4, ch[3], ch[3], config.width, rng)?;
        let b3 = BcsrBlock::new(store, 3, config.width, ch[2], config.width, rng)?;
        let b2 = BcsrBlock::new(store, 2, config.width, ch[1], config.width, rng)?;
        Ok(Decoder {
            config,
            ablation,
            boundary,
            guidance,
            blocks: [b4, b3, b2],
        })
    }

    /// Decode a pyramid `[f¹, f², f³, f⁴]` into the five side outputs at
    /// `out_hw`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, features: [Var; LEVELS], out_hw: (usize, usize)) -> Result<DecodeTrace> {
        let [f1, f2, f3, f4] = features;
        let ba = self.boundary.forward(ctx, f1, out_hw)?;
        let sg = self.guidance.forward(ctx, f2, f3, f4, out_hw)?;
        let mut prev = f4;
        let mut sides = [ba.full; 3];
        let mut attn = [None; 3];
        for (k, (block, f)) in self.blocks.iter().zip([f4, f3, f2]).enumerate() {
            let out = block.forward(ctx, prev, f, ba.native, sg.native, self.ablation, out_hw)?;
            prev = out.features;
            sides[k] = out.side;
            attn[k] = out.spatial_attention;
        }
        Ok(DecodeTrace {
            outputs: SideOutputs {
                s_b: ba.full,
                s_s: sg.full,
                s4: sides[0],
                s3: sides[1],
                s2: sides[2],
            },
            spatial_attention: attn,
        })
    }
}

/// Zero every tensor whose name contains `pattern`.
pub fn zero_params(store: &mut ParamStore, pattern: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.contains(pattern))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

/// Convenience for shape checks in tests and callers.
pub fn map_shape(n: usize, hw: (usize, usize)) -> Shape {
    Shape::new(n, 1, hw.0, hw.1)
}
