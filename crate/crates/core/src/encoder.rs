//! Convolutional encoder producing the four-level feature pyramid
//! `f¹..f⁴` at strides 2, 4, 8 and 16.
//!
//! Each stage runs `blocks_per_stage` × (3×3 conv, batch norm, ReLU) and
//! then a 2×2 max-pool, so stage `i` emits `C_i × H/2^i × W/2^i`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::check_model_size;
use crate::error::{bail, Result};
use crate::graph::Var;
use crate::nn::{ConvBnRelu, Ctx};
use crate::params::ParamStore;

/// Channels of the input slice (grayscale replicated three times).
pub const IN_CHANNELS: usize = 3;
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output widths `C₁..C₄` of the four stages.
    pub channels: [usize; LEVELS],
    /// `(H, W)`, each a multiple of 16.
    pub input_size: (usize, usize),
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 128],
            input_size: (64, 64),
            blocks_per_stage: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_model_size(self.input_size.0, self.input_size.1)?;
        if self.channels.iter().any(|&c| c == 0) {
            bail!(Validation, "encoder channels must be positive, got {:?}", self.channels);
        }
        if self.blocks_per_stage == 0 {
            bail!(Validation, "blocks_per_stage must be at least 1");
        }
        Ok(())
    }

    /// Spatial size of level `level` (1-based).
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        (self.input_size.0 >> level, self.input_size.1 >> level)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Vec<ConvBnRelu>>,
}

impl Encoder {
    /// Register encoder weights in `store` under `encoder.*`.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = IN_CHANNELS;
        for (s, &cout) in config.channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let name = format!("encoder.stage{}.block{}", s + 1, b);
                blocks.push(ConvBnRelu::new(store, &name, cin, cout, rng)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Encoder { config, stages })
    }

    /// Run the pyramid on an `N×3×H×W` batch.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<[Var; LEVELS]> {
        let s = ctx.graph.shape(image);
        let (h, w) = self.config.input_size;
        if s.c != IN_CHANNELS || s.h != h || s.w != w {
            bail!(
                Validation,
                "encoder expects N x {IN_CHANNELS} x {h} x {w} input, got {s}"
            );
        }
        let mut x = image;
        let mut out = [image; LEVELS];
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(ctx, x)?;
            }
            x = ctx.graph.max_pool2(x);
            out[i] = x;
        }
        Ok(out)
    }
}

/// Fresh encoder parameters from a seed.
pub fn init_encoder(config: EncoderConfig, seed: u64) -> Result<(Encoder, ParamStore)> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((enc, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{Shape, Tensor};

    fn run(config: EncoderConfig, input: Tensor, seed: u64) -> [Tensor; 4] {
        let (enc, store) = init_encoder(config, seed).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(input);
        let f = enc.forward(&mut ctx, x).unwrap();
        f.map(|v| ctx.value(v).clone())
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (_, a) = init_encoder(EncoderConfig::default(), 5).unwrap();
        let (_, b) = init_encoder(EncoderConfig::default(), 5).unwrap();
        let (_, c) = init_encoder(EncoderConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for ((_, p), (_, q)) in a.iter().zip(c.iter()) {
            assert_eq!(p.value.shape(), q.value.shape());
        }
    }

    #[test]
    fn first_kernel_maps_three_channels_to_sixteen() {
        let (_, store) = init_encoder(EncoderConfig::default(), 0).unwrap();
        let id = store.find("encoder.stage1.block0.conv.weight").unwrap();
        assert_eq!(store.value(id).shape(), Shape::new(16, 3, 3, 3));
    }

    #[test]
    fn pyramid_shapes_at_desk_scale() {
        let f = run(EncoderConfig::default(), Tensor::full(Shape::new(2, 3, 64, 64), 0.3), 1);
        let want = [(16, 32), (32, 16), (64, 8), (128, 4)];
        for (t, (c, s)) in f.iter().zip(want) {
            assert_eq!(t.shape(), Shape::new(2, c, s, s));
            assert!(t.all_finite());
        }
    }

    #[test]
    fn pyramid_first_level_at_352() {
        let cfg = EncoderConfig {
            input_size: (352, 352),
            blocks_per_stage: 1,
            ..EncoderConfig::default()
        };
        let f = run(cfg, Tensor::full(Shape::new(1, 3, 352, 352), 0.5), 2);
        assert_eq!(f[0].shape(), Shape::new(1, 16, 176, 176));
        assert_eq!(f[3].shape(), Shape::new(1, 128, 22, 22));
    }

    #[test]
    fn zero_input_gives_identical_batch_elements() {
        let (enc, store) = init_encoder(EncoderConfig::default(), 3).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.input(Tensor::zeros(Shape::new(3, 3, 64, 64)));
        let f = enc.forward(&mut ctx, x).unwrap();
        for v in f {
            let t = ctx.value(v);
            assert_eq!(t.batch_slice(0), t.batch_slice(1));
            assert_eq!(t.batch_slice(0), t.batch_slice(2));
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let (enc, store) = init_encoder(EncoderConfig::default(), 0).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.input(Tensor::zeros(Shape::new(1, 3, 32, 32)));
        assert!(matches!(enc.forward(&mut ctx, x), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn batch_forward_equals_per_element_forward() {
        let cfg = EncoderConfig {
            input_size: (32, 32),
            ..EncoderConfig::default()
        };
        let input = Tensor::from_fn(Shape::new(3, 3, 32, 32), |n, _, y, x| {
            libm::sin((n * 7 + y * 3 + x) as f64 * 0.1) * 0.5 + 0.5
        });
        let whole = run(cfg.clone(), input.clone(), 4);
        for n in 0..3 {
            let single = run(cfg.clone(), input.select(n), 4);
            for (a, b) in whole.iter().zip(&single) {
                let d = a.select(n).max_abs_diff(b);
                assert!(d <= 1e-6, "batch element {n}: {d}");
            }
        }
    }
}
