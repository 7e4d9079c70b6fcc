//! Central finite differences of the total loss against the tape
//! gradients, on sampled scalar parameters.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_tensors, DatasetRecord};
use crate::error::{bail, Result};
use crate::model::BcsNet;
use crate::nn::{Ctx, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::train::{batch_loss, TrainHyper};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-4;
pub const MAX_SIDE: usize = 32;
pub const MAX_CHANNELS: usize = 8;

/// Name fragments of the groups that must each contribute a sample.
pub const GROUPS: [&str; 6] = ["encoder.", "decoder.ba.", "decoder.sg.", ".aggc.", ".fuse.", ".side."];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step actually used. Smaller than requested when the first
    /// difference straddled a ReLU or max-pool switch.
    pub step: f64,
}

/// Retry factor for entries that fail at the requested step.
pub const REFINE_FACTOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    /// Entries that needed the smaller step.
    pub fn refined(&self) -> usize {
        self.entries.iter().filter(|e| e.step < self.step).count()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Names of parameters over tolerance, in sample order.
    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !(e.rel_error <= self.tolerance))
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn loss_and_grads(
    net: &BcsNet,
    store: &ParamStore,
    records: &[&DatasetRecord],
    hyper: &TrainHyper,
    want_grads: bool,
) -> Result<(f64, Option<crate::graph::Gradients>)> {
    let (image, _, _) = batch_tensors(records)?;
    let mut ctx = Ctx::new(store, Mode::Train);
    let x = ctx.input(image);
    let trace = net.forward(&mut ctx, x)?;
    let (loss, seeds) = batch_loss(&ctx, trace.outputs.all(), records, hyper.window, hyper.lambda)?;
    let grads = if want_grads { Some(ctx.graph.backward(&seeds)?) } else { None };
    Ok((loss.total, grads))
}

/// Pick `n` distinct `(param, element)` pairs: every context gain, one
/// element from each group, then uniform draws over trainable tensors.
fn sample(store: &ParamStore, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(ParamId, usize)>> {
    let trainable: Vec<ParamId> = store.trainable().collect();
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    let push = |picks: &mut Vec<(ParamId, usize)>, p: (ParamId, usize)| {
        if !picks.contains(&p) {
            picks.push(p);
        }
    };
    for &id in &trainable {
        if store.name(id).ends_with("context_gain") {
            push(&mut picks, (id, 0));
        }
    }
    for group in GROUPS {
        let ids: Vec<ParamId> = trainable
            .iter()
            .copied()
            .filter(|&id| store.name(id).contains(group))
            .collect();
        if ids.is_empty() {
            continue;
        }
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..store.value(id).data().len());
        push(&mut picks, (id, k));
    }
    let total: usize = trainable.iter().map(|&id| store.value(id).data().len()).sum();
    let target = n.max(picks.len()).min(total);
    while picks.len() < target {
        let id = trainable[rng.random_range(0..trainable.len())];
        let k = rng.random_range(0..store.value(id).data().len());
        push(&mut picks, (id, k));
    }
    Ok(picks)
}

/// Compare analytic and central-difference gradients of the train-mode
/// total loss on `records` for `n_params` sampled scalars.
///
/// Context gains start at zero, which hides the context branch from every
/// other parameter, so they are set to small random nonzero values first.
pub fn gradcheck(
    net: &BcsNet,
    store: &ParamStore,
    records: &[DatasetRecord],
    n_params: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let (h, w) = net.input_size();
    if h > MAX_SIDE || w > MAX_SIDE {
        bail!(Validation, "gradcheck needs input at most {MAX_SIDE}x{MAX_SIDE}, got {h}x{w}");
    }
    let cfg = &net.config;
    let widest = cfg
        .encoder
        .channels
        .iter()
        .chain([&cfg.decoder.width, &cfg.decoder.boundary_width])
        .max()
        .copied()
        .unwrap_or(0);
    if widest > MAX_CHANNELS {
        bail!(Validation, "gradcheck needs at most {MAX_CHANNELS} channels, got {widest}");
    }
    if records.is_empty() {
        bail!(Validation, "gradcheck needs at least one record");
    }
    if !(step > 0.0) {
        bail!(Validation, "finite-difference step must be positive, got {step}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = store.clone();
    let gains: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable && p.name.ends_with("context_gain"))
        .map(|(id, _)| id)
        .collect();
    for id in gains {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        store.value_mut(id).data_mut()[0] = sign * rng.random_range(0.1..0.5);
    }
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    let hyper = TrainHyper::default();
    let (_, grads) = loss_and_grads(net, &store, &refs, &hyper, true)?;
    let grads = grads.expect("requested");
    let mut analytic_of = alloc::collections::BTreeMap::new();
    for (id, g) in grads.params() {
        analytic_of.insert(id, g.data().to_vec());
    }
    let picks = sample(&store, n_params, &mut rng)?;
    let mut entries = Vec::with_capacity(picks.len());
    let mut max_rel: f64 = 0.0;
    let central = |store: &mut ParamStore, id: ParamId, k: usize, h: f64| -> Result<f64> {
        let original = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = original + h;
        let (up, _) = loss_and_grads(net, store, &refs, &hyper, false)?;
        store.value_mut(id).data_mut()[k] = original - h;
        let (down, _) = loss_and_grads(net, store, &refs, &hyper, false)?;
        store.value_mut(id).data_mut()[k] = original;
        Ok((up - down) / (2.0 * h))
    };
    for (id, k) in picks {
        let analytic = analytic_of.get(&id).map_or(0.0, |g: &Vec<f64>| g[k]);
        let mut used = step;
        let mut numeric = central(&mut store, id, k, used)?;
        let mut rel = relative_error(analytic, numeric);
        if !(rel <= tolerance) {
            used = step * REFINE_FACTOR;
            numeric = central(&mut store, id, k, used)?;
            rel = relative_error(analytic, numeric);
        }
        max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
        entries.push(GradcheckEntry {
            name: alloc::format!("{}[{k}]", store.name(id)),
            index: k,
            analytic,
            numeric,
            rel_error: rel,
            step: used,
        });
    }
    Ok(GradcheckReport {
        entries,
        tolerance,
        step,
        max_rel_error: max_rel,
    })
}
