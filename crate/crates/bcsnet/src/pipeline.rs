//! File-level operations behind the subcommands.

use std::path::{Path, PathBuf};

use bcsnet_core::data::{resize_record, BinaryMap, DatasetRecord};
use bcsnet_core::gradcheck::{self, GradcheckReport};
use bcsnet_core::metrics::{binarize, MetricReport};
use bcsnet_core::model::BcsNet;
use bcsnet_core::synth::synth_blobs;
use bcsnet_core::train::{self, EpochStats, LossCurve, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSource, TrainConfig};
use crate::error::{Error, Result};
use crate::{io, report, viz};

/// Binarisation threshold for predicted masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Records for `config`, resized to the model input size when read from
/// disk.
pub fn resolve_dataset(config: &TrainConfig) -> Result<Vec<DatasetRecord>> {
    let [h, w] = config.image_size;
    match config.source()? {
        DatasetSource::Synthetic(n) => Ok(synth_blobs(n, h, w, config.seed)?),
        DatasetSource::Dir(root) => io::load_dataset(&root)?
            .iter()
            .map(|r| resize_record(r, h, w).map_err(Error::from))
            .collect(),
    }
}

/// Intermediate checkpoints go next to the final one as
/// `<stem>.epoch<N>.<ext>`.
pub fn interval_path(final_path: &Path, epoch: usize) -> PathBuf {
    let stem = final_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match final_path.extension() {
        Some(ext) => format!("{stem}.epoch{epoch}.{}", ext.to_string_lossy()),
        None => format!("{stem}.epoch{epoch}"),
    };
    final_path.with_file_name(name)
}

/// Train from scratch, writing the final checkpoint (and interval ones)
/// to the configured paths. `on_epoch` sees every epoch's mean loss.
pub fn train(config: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<(Checkpoint, LossCurve)> {
    config.validate()?;
    let records = resolve_dataset(config)?;
    let (net, store) = BcsNet::new(config.model_config(), config.seed)?;
    let mut trainer = Trainer::new(net, store, config.hyper())?;
    let mut io_error = None;
    let curve = trainer.fit(&records, config.epochs, |t, stats| {
        on_epoch(stats);
        if config.save_every > 0 && stats.epoch % config.save_every == 0 && stats.epoch < config.epochs {
            let ck = Checkpoint::new(config.clone(), stats.epoch as u64, t.store.clone());
            if let Err(e) = ck.save(&interval_path(&config.checkpoint, stats.epoch)) {
                io_error = Some(e);
                return Err(bcsnet_core::Error::Validation("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let curve = curve?;
    let ck = Checkpoint::new(config.clone(), trainer.epoch() as u64, trainer.store);
    ck.save(&config.checkpoint)?;
    if let Some(p) = &config.loss_curve {
        report::save_curve(&curve, p)?;
    }
    Ok((ck, curve))
}

/// `<out-stem>_mask.png` next to `out`.
pub fn default_mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_mask.png"))
}

pub struct PredictOutput {
    pub probs: Vec<f64>,
    pub mask: BinaryMap,
}

/// Write `S₂` as an 8-bit PNG to `out` and its thresholded mask to
/// `mask_out`.
pub fn predict(ckpt: &Checkpoint, image: &Path, out: &Path, mask_out: &Path) -> Result<PredictOutput> {
    let (net, store) = ckpt.model()?;
    let slice = io::load_slice(image)?;
    let (h, w) = (slice.height(), slice.width());
    let o = net.infer(&store, &slice.to_tensor())?;
    let probs = o.s2.batch_slice(0).to_vec();
    let mask = BinaryMap::new(h, w, binarize(&probs, MASK_THRESHOLD))?;
    io::save_gray(&probs, h, w, out)?;
    io::save_binary(mask.pixels(), h, w, mask_out)?;
    Ok(PredictOutput { probs, mask })
}

/// Score every record under `root` and write the CSV report.
pub fn evaluate(ckpt: &Checkpoint, root: &Path, out_csv: &Path) -> Result<MetricReport> {
    let (net, store) = ckpt.model()?;
    let [h, w] = ckpt.config.image_size;
    let records = io::load_dataset(root)?
        .iter()
        .map(|r| resize_record(r, h, w))
        .collect::<bcsnet_core::Result<Vec<_>>>()?;
    let rep = train::evaluate(&net, &store, &records, ckpt.config.batch_size)?;
    report::save_metrics(&rep, out_csv)?;
    Ok(rep)
}

/// Finite-difference check of the configured (tiny) model on its dataset.
pub fn gradcheck(config: &TrainConfig, n_params: usize) -> Result<GradcheckReport> {
    config.validate()?;
    let records = resolve_dataset(config)?;
    let (net, store) = BcsNet::new(config.model_config(), config.seed)?;
    Ok(gradcheck::gradcheck(
        &net,
        &store,
        &records,
        n_params,
        config.seed,
        gradcheck::DEFAULT_STEP,
        gradcheck::DEFAULT_TOLERANCE,
    )?)
}

pub fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<Vec<DatasetRecord>> {
    let recs = synth_blobs(n, size, size, seed)?;
    io::write_dataset(&recs, out)?;
    Ok(recs)
}

/// Six-panel figure for one image and mask.
pub fn visualize(ckpt: &Checkpoint, image: &Path, mask: &Path, out: &Path) -> Result<viz::Layout> {
    let (net, store) = ckpt.model()?;
    let record = io::load_record(image, mask)?;
    let o = net.infer(&store, &record.slice.to_tensor())?;
    let (layout, raw) = viz::render(&record, &o);
    io::save_rgb(raw, layout.height(), layout.width(), out)?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_paths() {
        assert_eq!(interval_path(Path::new("/a/m.ckpt"), 5), Path::new("/a/m.epoch5.ckpt"));
        assert_eq!(interval_path(Path::new("m"), 5), Path::new("m.epoch5"));
        assert_eq!(default_mask_path(Path::new("/o/p.png")), Path::new("/o/p_mask.png"));
    }
}
