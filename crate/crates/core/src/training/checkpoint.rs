//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "A3NC" | version u32 | config sha256 [32]
//! meta_len u64 | meta JSON
//! count u64 | count × (name_len u32 | name | dtype u8 | rank u32 | dims u64×rank | values)
//! ```
//!
//! The only dtype is `0` (f64).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::training::EpochRecord;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"A3NC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`; JSON numbers cannot carry it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Format(format!("checkpoint rng state has an invalid {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Fully resolved config text; its digest is in the header.
    pub config_toml: String,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub vocab: Vocabulary,
    pub dictionary: Vec<String>,
    pub best_val_loss: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&hex::decode(self.config.digest()).expect("digest is hex"));
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::contract(format!("tensor {} data does not match its shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let digest = hex::encode(r.take(32)?);
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let config = Config::from_toml_str(&meta.config_toml, "checkpoint config")?;
        if config.digest() != digest {
            return Err(Error::Format("checkpoint header digest does not match its embedded config".into()));
        }
        let count = r.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
            }
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("tensor {name} has unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} is truncated")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedArray { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", r.remaining())));
        }
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format("length field overflows".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let config = Config::desk();
        Checkpoint {
            meta: CheckpointMeta {
                config_toml: config.to_toml_string(),
                epoch: 3,
                optimizer_step: 12,
                rng: RngState::capture(&rand_chacha::ChaCha8Rng::seed_from_u64(1)),
                vocab: Vocabulary::build(["heart is normal"], 1, &[]),
                dictionary: vec!["heart".into()],
                best_val_loss: Some(1.5),
                history: Vec::new(),
            },
            config,
            tensors: vec![
                NamedArray {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0],
                },
                NamedArray {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![std::f64::consts::PI],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let bits = |c: &Checkpoint| c.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..13 {
            rng.gen::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        let a: Vec<u64> = (0..5).map(|_| rng.gen()).collect();
        let b: Vec<u64> = (0..5).map(|_| resumed.gen()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
