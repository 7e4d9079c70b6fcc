//! Full network: encoder pyramid plus the BCSR decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Ablation, DecodeTrace, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, IN_CHANNELS};
use crate::error::{bail, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
}

#[derive(Clone, Debug)]
pub struct BcsNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Evaluated side outputs, each `N×1×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutputs {
    pub s_b: Tensor,
    pub s_s: Tensor,
    pub s4: Tensor,
    pub s3: Tensor,
    pub s2: Tensor,
    /// Level-2 spatial attention `A_s` at its native resolution, when AGGC
    /// is enabled.
    pub attention2: Option<Tensor>,
}

impl DecoderOutputs {
    /// `(S_b, S_s, S₄, S₃, S₂)`.
    pub fn all(&self) -> [&Tensor; 5] {
        [&self.s_b, &self.s_s, &self.s4, &self.s3, &self.s2]
    }
}

impl BcsNet {
    /// Build the network and a freshly initialised parameter store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(BcsNet, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let decoder = Decoder::new(
            config.decoder.clone(),
            config.ablation,
            &config.encoder,
            &mut store,
            &mut rng,
        )?;
        Ok((BcsNet { config, encoder, decoder }, store))
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.config.encoder.input_size
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<DecodeTrace> {
        let features = self.encoder.forward(ctx, image)?;
        self.decoder.forward(ctx, features, self.input_size())
    }

    /// Eval-mode decode of an `N×3×H×W` batch.
    pub fn infer(&self, store: &ParamStore, image: &Tensor) -> Result<DecoderOutputs> {
        let s = image.shape();
        let (h, w) = self.input_size();
        if s.c != IN_CHANNELS || s.h != h || s.w != w {
            bail!(Validation, "expected image of size {h}x{w} with {IN_CHANNELS} channels, got {s}");
        }
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.input(image.clone());
        let trace = self.forward(&mut ctx, x)?;
        let o = trace.outputs;
        Ok(DecoderOutputs {
            s_b: ctx.value(o.s_b).clone(),
            s_s: ctx.value(o.s_s).clone(),
            s4: ctx.value(o.s4).clone(),
            s3: ctx.value(o.s3).clone(),
            s2: ctx.value(o.s2).clone(),
            attention2: trace.spatial_attention[2].map(|v| ctx.value(v).clone()),
        })
    }
}
