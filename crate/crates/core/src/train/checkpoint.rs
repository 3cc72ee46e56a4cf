//! Binary checkpoint: magic `CMVAE1`, architecture, little-endian f64
//! tensors in declared order, then training state and the config.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, CmvaeParams};

use super::config::TrainConfig;

const MAGIC: &[u8; 6] = b"CMVAE1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: CmvaeParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_recall: f64,
    /// SHA-256 of the generator state when this checkpoint was taken.
    pub rng_digest: [u8; 32],
}

pub fn rng_digest(rng: &ChaCha8Rng) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos.saturating_add(n) as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Data(format!("{}: size field {v} out of range", self.path.display())))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = &self.params.arch;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u64(&mut buf, arch.latent_dim as u64);
        put_u64(&mut buf, arch.hidden.len() as u64);
        for &h in &arch.hidden {
            put_u64(&mut buf, h as u64);
        }
        for f in [arch.music_dim, arch.visual_dim, arch.textual_dim] {
            put_u64(&mut buf, f as u64);
        }
        for (m, _) in self.params.tensors() {
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u64(&mut buf, self.epoch as u64);
        buf.extend_from_slice(&self.best_val_recall.to_le_bytes());
        buf.extend_from_slice(&self.rng_digest);
        let cfg = self.config.to_kv();
        put_u64(&mut buf, cfg.len() as u64);
        buf.extend_from_slice(cfg.as_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CMVAE1".into(),
            });
        }
        let latent_dim = r.usize()?;
        let n_hidden = r.usize()?;
        if n_hidden > 64 {
            return Err(Error::Data(format!("{}: implausible hidden layer count {n_hidden}", path.display())));
        }
        let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            latent_dim,
            hidden,
            music_dim: r.usize()?,
            visual_dim: r.usize()?,
            textual_dim: r.usize()?,
        };
        let needed: usize = [arch.music_dim, arch.visual_dim, arch.textual_dim]
            .iter()
            .map(|&f| {
                let sizes = |w: Vec<usize>| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
                sizes(arch.encoder_widths(f)) + sizes(arch.decoder_widths(f))
            })
            .sum();
        if needed.saturating_mul(8) > bytes.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: needed.saturating_mul(8) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut params = CmvaeParams::init(arch, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Data(format!("{}: bad architecture: {e}", path.display())))?;
        for (m, _) in params.tensors_mut() {
            for v in m.data_mut() {
                *v = r.f64()?;
            }
        }
        let epoch = r.usize()?;
        let best_val_recall = r.f64()?;
        let rng_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let cfg_len = r.usize()?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Data(format!("{}: config block is not UTF-8", path.display())))?;
        let config = TrainConfig::from_kv(cfg_text)?;
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{}: {} trailing bytes", path.display(), bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            params,
            config,
            epoch,
            best_val_recall,
            rng_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Profile;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            latent_dim: 3,
            hidden: vec![6, 5],
            music_dim: 4,
            visual_dim: 5,
            textual_dim: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Checkpoint {
            params: CmvaeParams::init(arch, &mut rng).unwrap(),
            config: TrainConfig::profile(Profile::Desk),
            epoch: 7,
            best_val_recall: 0.123_456_789,
            rng_digest: rng_digest(&rng),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = Path::new("x.ckpt");
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"CMVAE9xxxxxxxx", p), Err(Error::BadMagic { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], p), Err(Error::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Data(_))));
    }

    #[test]
    fn digest_tracks_generator_position() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng_digest(&rng);
        let _: u32 = rng.random();
        assert_ne!(before, rng_digest(&rng));
    }
}
