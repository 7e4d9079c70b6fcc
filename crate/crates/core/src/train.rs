//! Training loop, per-epoch statistics and batched prediction.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_tensors, DatasetRecord};
use crate::error::{bail, Error, Result};
use crate::graph::Var;
use crate::losses::{make_weight_map, total_loss_grad, LossBreakdown, OutputMaps, DEFAULT_LAMBDA, DEFAULT_WINDOW};
use crate::metrics::{evaluate_dataset, MetricReport, Prediction};
use crate::model::BcsNet;
use crate::nn::{apply_bn_updates, Ctx, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Box window of the ε weight map.
    pub window: usize,
    pub lambda: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            window: DEFAULT_WINDOW,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Validation, "batch_size must be at least 1");
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            bail!(Validation, "learning_rate must be positive, got {}", self.adam.learning_rate);
        }
        for (name, b) in [("adam_beta1", self.adam.beta1), ("adam_beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(Validation, "{name} must lie in [0, 1), got {b}");
            }
        }
        Ok(())
    }
}

/// Mean loss over the records of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub epochs: Vec<EpochStats>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }
}

/// Per-record loss terms and the seeds they give the five output maps.
pub(crate) fn batch_loss(
    ctx: &Ctx<'_>,
    outputs: [Var; 5],
    records: &[&DatasetRecord],
    window: usize,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<(Var, Tensor)>)> {
    let shape = ctx.graph.shape(outputs[0]);
    let (h, w) = (shape.h, shape.w);
    let plane = h * w;
    let n = records.len();
    let vals = outputs.map(|v| ctx.value(v).data());
    let mut seeds: Vec<Tensor> = (0..5).map(|_| Tensor::zeros(Shape::new(n, 1, h, w))).collect();
    let mut mean = LossBreakdown::default();
    let inv = 1.0 / n as f64;
    for (i, rec) in records.iter().enumerate() {
        let g = rec.mask.0.to_f64();
        let gb = rec.boundary.0.to_f64();
        let eps = make_weight_map(&g, h, w, window, lambda)?;
        let r = i * plane..(i + 1) * plane;
        let maps = OutputMaps {
            s_b: &vals[0][r.clone()],
            s_s: &vals[1][r.clone()],
            s4: &vals[2][r.clone()],
            s3: &vals[3][r.clone()],
            s2: &vals[4][r.clone()],
        };
        let (loss, grads) = total_loss_grad(&maps, &g, &gb, &eps)?;
        if let Some(part) = loss.first_non_finite() {
            return Err(Error::NonFinite(format!("loss component {part} on record `{}`", rec.id)));
        }
        mean.accumulate(&loss.scaled(inv));
        for (seed, gr) in seeds.iter_mut().zip([&grads.s_b, &grads.s_s, &grads.s4, &grads.s3, &grads.s2]) {
            for (d, s) in seed.data_mut()[r.clone()].iter_mut().zip(gr.iter()) {
                *d = s * inv;
            }
        }
    }
    Ok((mean, outputs.into_iter().zip(seeds).collect()))
}

pub struct Trainer {
    pub net: BcsNet,
    pub store: ParamStore,
    pub hyper: TrainHyper,
    optimizer: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: BcsNet, store: ParamStore, hyper: TrainHyper) -> Result<Self> {
        hyper.validate()?;
        let optimizer = Adam::new(hyper.adam, &store);
        Ok(Trainer {
            net,
            store,
            hyper,
            optimizer,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Forward, backward and one optimizer update on a batch. Returns the
    /// mean per-record loss before the update.
    pub fn train_step(&mut self, batch: &[&DatasetRecord]) -> Result<LossBreakdown> {
        let (image, _, _) = batch_tensors(batch)?;
        let (loss, grads, updates) = {
            let mut ctx = Ctx::new(&self.store, Mode::Train);
            let x = ctx.input(image);
            let trace = self.net.forward(&mut ctx, x)?;
            let (loss, seeds) = batch_loss(&ctx, trace.outputs.all(), batch, self.hyper.window, self.hyper.lambda)?;
            let grads = ctx.graph.backward(&seeds)?;
            let (_, updates) = ctx.into_parts();
            (loss, grads, updates)
        };
        for (id, g) in grads.params() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", self.store.name(id))));
            }
        }
        self.optimizer.step(&mut self.store, &grads);
        apply_bn_updates(&mut self.store, &updates);
        Ok(loss)
    }

    /// One pass over `records` in an order fixed by the seed and epoch.
    pub fn run_epoch(&mut self, records: &[DatasetRecord]) -> Result<EpochStats> {
        if records.is_empty() {
            bail!(Validation, "cannot train on an empty dataset");
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..records.len()).collect();
        let seed = self.hyper.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(self.hyper.batch_size) {
            let batch: Vec<&DatasetRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let loss = self.train_step(&batch)?;
            sum.accumulate(&loss.scaled(batch.len() as f64));
        }
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            loss: sum.scaled(1.0 / records.len() as f64),
        })
    }

    /// Run `epochs` more epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        records: &[DatasetRecord],
        epochs: usize,
        mut on_epoch: impl FnMut(&Trainer, &EpochStats) -> Result<()>,
    ) -> Result<LossCurve> {
        if records.is_empty() {
            bail!(Validation, "cannot train on an empty dataset");
        }
        let mut curve = LossCurve::default();
        for _ in 0..epochs {
            let stats = self.run_epoch(records)?;
            curve.epochs.push(stats);
            on_epoch(self, &stats)?;
        }
        Ok(curve)
    }
}

/// Eval-mode `S₂` maps for `records`, `batch_size` at a time.
pub fn predict(net: &BcsNet, store: &ParamStore, records: &[DatasetRecord], batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let (image, _, _) = batch_tensors(&refs)?;
        let o = net.infer(store, &image)?;
        for (i, rec) in chunk.iter().enumerate() {
            out.push(Prediction {
                id: rec.id.clone(),
                height: rec.height(),
                width: rec.width(),
                probs: o.s2.batch_slice(i).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Predict and score `records` at threshold 0.5.
pub fn evaluate(net: &BcsNet, store: &ParamStore, records: &[DatasetRecord], batch_size: usize) -> Result<MetricReport> {
    let preds = predict(net, store, records, batch_size)?;
    evaluate_dataset(
        &preds,
        records.iter().map(|r| (r.id.as_str(), r.mask.0.pixels())),
        0.5,
    )
}

/// Eval-mode loss of `records` without updating anything.
pub fn eval_loss(net: &BcsNet, store: &ParamStore, records: &[DatasetRecord], hyper: &TrainHyper) -> Result<LossBreakdown> {
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    let (image, _, _) = batch_tensors(&refs)?;
    let mut ctx = Ctx::new(store, Mode::Eval);
    let x = ctx.input(image);
    let trace = net.forward(&mut ctx, x)?;
    Ok(batch_loss(&ctx, trace.outputs.all(), &refs, hyper.window, hyper.lambda)?.0)
}
