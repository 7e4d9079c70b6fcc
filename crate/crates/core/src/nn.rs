//! Layer building blocks and the forward-pass context.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

/// Pending running-statistics update produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: the tape, the parameters it reads, and side effects
/// to apply after the step.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    cache: BTreeMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            mode,
            cache: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Parameter leaf, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache.get(&id) {
            return *v;
        }
        let v = self.graph.param(id, self.store.value(id).clone());
        self.cache.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_parts(self) -> (Graph, Vec<BnUpdate>) {
        (self.graph, self.bn_updates)
    }
}

/// Apply running-statistics updates with the standard momentum.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// Same-padded stride-1 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let w = fan_in_uniform(
            Shape::new(out_channels, in_channels, kernel, kernel),
            fan_in,
            rng,
        );
        let weight = store.add(&format!("{name}.weight"), ParamKind::Trainable, w)?;
        let bias = if bias {
            let b = fan_in_uniform(Shape::new(1, out_channels, 1, 1), fan_in, rng);
            Some(store.add(&format!("{name}.bias"), ParamKind::Trainable, b)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b)
    }
}

/// Per-channel batch normalisation with learnable scale and offset.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let cs = Shape::new(1, channels, 1, 1);
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(cs, 1.0))?,
            beta: store.add(&format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(cs))?,
            running_mean: store.add(&format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(cs))?,
            running_var: store.add(&format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(cs, 1.0))?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: stats.mean,
                    var: stats.var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.graph.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    store.value(self.running_mean).data(),
                    store.value(self.running_var).data(),
                    BN_EPS,
                )
            }
        }
    }
}

/// 3×3 convolution followed by normalisation and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, 3, true, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.relu(y))
    }
}
