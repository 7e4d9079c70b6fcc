//! Single-file checkpoint: named tensors plus the config they came from.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! magic      8 bytes  "BCSNCKPT"
//! version    u32 length + UTF-8
//! config     u32 length + UTF-8 TOML
//! epoch      u64
//! count      u32
//! count × { name: u32 length + UTF-8, kind: u8 (0 trainable, 1 buffer),
//!           dims: 4 × u32 (N, C, H, W), data: N·C·H·W × f64 }
//! ```

use std::path::Path;

use bcsnet_core::model::BcsNet;
use bcsnet_core::params::{ParamKind, ParamStore};
use bcsnet_core::{Shape, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BCSNCKPT";
pub const FORMAT_VERSION: &str = "bcsnet-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: String,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, epoch: u64, params: ParamStore) -> Self {
        Checkpoint {
            version: FORMAT_VERSION.into(),
            config,
            epoch,
            params,
        }
    }

    /// Rebuild the network and load the stored tensors into it.
    pub fn model(&self) -> bcsnet_core::Result<(BcsNet, ParamStore)> {
        let (net, mut store) = BcsNet::new(self.config.model_config(), self.config.seed)?;
        store.load_from(&self.params)?;
        Ok((net, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, &self.version);
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            put_str(&mut out, &p.name);
            out.push(match p.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            for d in p.value.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::ckpt(origin, "not a bcsnet checkpoint (bad magic)"));
        }
        let version = r.string()?;
        if version != FORMAT_VERSION {
            return Err(Error::ckpt(origin, format!("unsupported version `{version}`, expected `{FORMAT_VERSION}`")));
        }
        let config_text = r.string()?;
        let config = TrainConfig::from_toml(&config_text, origin)?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::ckpt(origin, format!("tensor `{name}`: unknown kind {k}"))),
            };
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|&n| n <= (bytes.len() - r.pos) / 8) else {
                return Err(Error::ckpt(origin, format!("tensor `{name}` {shape} runs past end of file")));
            };
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(&name, kind, Tensor::from_vec(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::ckpt(origin, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            config,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::ckpt(self.origin, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::ckpt(self.origin, format!("invalid UTF-8 at byte {at}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            image_size: [32, 32],
            encoder_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
            decoder_width: 8,
            boundary_width: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = tiny();
        let (_, mut store) = BcsNet::new(cfg.model_config(), 3).unwrap();
        // awkward values survive too
        let id = store.trainable().next().unwrap();
        store.value_mut(id).data_mut()[0] = -0.0;
        store.value_mut(id).data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let ck = Checkpoint::new(cfg, 17, store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 17);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        back.model().unwrap();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny();
        let (_, store) = BcsNet::new(cfg.model_config(), 0).unwrap();
        let bytes = Checkpoint::new(cfg, 0, store).to_bytes();
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut bad_version = bytes.clone();
        bad_version[12 + 7] = b'X';
        let err = Checkpoint::from_bytes(&bad_version, p).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn model_rejects_mismatched_tensors() {
        let cfg = tiny();
        let (_, store) = BcsNet::new(cfg.model_config(), 0).unwrap();
        let mut other = tiny();
        other.decoder_width = 4;
        assert!(Checkpoint::new(other, 0, store).model().is_err());
    }
}
