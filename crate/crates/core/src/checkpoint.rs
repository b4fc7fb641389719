//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPMN"  u32 version
//! u64 len, config text (canonical `key = value` form)
//! u64 count, then per corpus token: u32 len, UTF-8 bytes
//! u64 count, then per parameter in name order:
//!     u32 name len, name, u32 rank, rank × u64 extents, f64 values
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::data::Vocab;
use crate::error::{DpmnError, Result};
use crate::model::Dpmn;

pub const MAGIC: &[u8; 4] = b"DPMN";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// A trained model together with everything needed to run it on new text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `model.encoder.vocab_size` is the actual vocabulary size.
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_text();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        let tokens = self.vocab.corpus_tokens();
        out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
        for t in tokens {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(DpmnError::Integrity("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(DpmnError::Integrity("missing DPMN magic bytes".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(DpmnError::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DpmnError::Integrity(format!("unsupported format version {version}")));
        }
        let config_len = r.len()?;
        let config_text = r.utf8(config_len)?;
        let config = TrainConfig::parse(&config_text)?;

        let n_tokens = r.len()?;
        let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            let len = r.u32()? as usize;
            tokens.push(r.utf8(len)?);
        }
        let vocab = Vocab::from_tokens(tokens)?;

        let n_params = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| DpmnError::Integrity(format!("`{name}` extents overflow")))?;
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != body.len() {
            return Err(DpmnError::Integrity(format!(
                "{} trailing bytes after the last record",
                body.len() - r.pos
            )));
        }
        if config.model.encoder.vocab_size != vocab.len() {
            return Err(DpmnError::Integrity(format!(
                "config vocabulary size {} but {} tokens stored",
                config.model.encoder.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint { config, vocab, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| DpmnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| DpmnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model, checking the parameters against the config.
    pub fn model(&self) -> Result<Dpmn> {
        Dpmn::from_params(self.config.model.clone(), self.params.clone())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DpmnError::Integrity(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| DpmnError::Integrity(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DpmnError::Integrity("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::gradcheck::tiny_config;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_tokens((0..13).map(|i| format!("w{i}"))).unwrap();
        let mut config = TrainConfig::default();
        config.model = tiny_config();
        let model = Dpmn::new(config.model.clone(), 9).unwrap();
        Checkpoint {
            config,
            vocab,
            params: model.into_params(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.model().is_ok());
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for pos in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(DpmnError::Integrity(_))), "{pos}");
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DpmnError::Integrity(_))
        ));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dpmn");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing")),
            Err(DpmnError::Io { .. })
        ));
    }
}
