//! Command-line interface.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "bcsnet", version, about = "Lung-infection segmentation on CT slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on `<data>/images` + `<data>/masks`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the S2 probability map and its thresholded mask.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out-stem>_mask.png`.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the six-panel figure for one image.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_err(e: std::io::Error) -> Error {
    Error::io(std::path::Path::new("<stdout>"), e)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let mut write_err = None;
            let (ck, curve) = pipeline::train(&cfg, |s| {
                if let Err(e) = writeln!(out, "epoch {} loss {:.6}", s.epoch, s.loss.total) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(out_err(e));
            }
            writeln!(
                out,
                "wrote {} after {} epochs ({} recorded)",
                cfg.checkpoint.display(),
                ck.epoch,
                curve.len()
            )
            .map_err(out_err)
        }
        Command::Eval { ckpt, data, out: csv } => {
            let ck = Checkpoint::load(&ckpt)?;
            let rep = pipeline::evaluate(&ck, &data, &csv)?;
            let m = &rep.mean;
            writeln!(
                out,
                "mean dsc {:.4} prec {:.4} recall {:.4} sm {:.4} ephi {:.4} mae {:.4} over {} images",
                m.dsc,
                m.prec,
                m.recall,
                m.sm,
                m.ephi,
                m.mae,
                rep.rows.len()
            )
            .map_err(out_err)
        }
        Command::Predict {
            ckpt,
            image,
            out: png,
            mask_out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mask_path = mask_out.unwrap_or_else(|| pipeline::default_mask_path(&png));
            let p = pipeline::predict(&ck, &image, &png, &mask_path)?;
            writeln!(
                out,
                "wrote {} and {} ({} foreground pixels)",
                png.display(),
                mask_path.display(),
                p.mask.count()
            )
            .map_err(out_err)
        }
        Command::Gradcheck { config, n } => {
            let cfg = TrainConfig::load(&config)?;
            let rep = pipeline::gradcheck(&cfg, n)?;
            for e in &rep.entries {
                writeln!(
                    out,
                    "{} analytic {:.6e} numeric {:.6e} rel {:.2e} step {:e}",
                    e.name, e.analytic, e.numeric, e.rel_error, e.step
                )
                .map_err(out_err)?;
            }
            writeln!(
                out,
                "max rel error {:.3e} over {} params ({} at reduced step)",
                rep.max_rel_error,
                rep.entries.len(),
                rep.refined()
            )
            .map_err(out_err)?;
            if rep.passed() {
                Ok(())
            } else {
                Err(Error::Gradcheck {
                    max_rel_error: rep.max_rel_error,
                    params: rep.failures().join(","),
                })
            }
        }
        Command::Synth { n, size, out: dir, seed } => {
            let recs = pipeline::synth(n, size, seed, &dir)?;
            writeln!(out, "wrote {} records to {}", recs.len(), dir.display()).map_err(out_err)
        }
        Command::Viz {
            ckpt,
            image,
            mask,
            out: png,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let l = pipeline::visualize(&ck, &image, &mask, &png)?;
            writeln!(out, "wrote {} ({}x{})", png.display(), l.width(), l.height()).map_err(out_err)
        }
    }
}
