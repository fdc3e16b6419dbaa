//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GZSLCKPT" | version u32 | count u32
//! count × { name_len u32 | name utf-8 | rank u32 | dims u64×rank | values f64×numel }
//! config_len u64 | config text | epoch u64 | rng seed [u8; 32] | rng word position u128
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GZSLCKPT";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    /// Run configuration as `key = value` text.
    pub config: String,
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn new(params: &ModelParams<Tensor>, config: String, epoch: u64, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            params: params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            config,
            epoch,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("parameter name is not utf-8".into()))?;
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::CorruptCheckpoint(format!("rank {rank} of `{name}`")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated values of `{name}`")))?;
            let raw = r.take(numel * 8, "values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data)
                .map_err(|_| Error::CorruptCheckpoint(format!("invalid shape for `{name}`")))?;
            params.push((name, t));
        }
        let clen = r.u64("config length")? as usize;
        if clen > r.remaining() {
            return Err(Error::CorruptCheckpoint("truncated config".into()));
        }
        let config = String::from_utf8(r.take(clen, "config")?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("config is not utf-8".into()))?;
        let epoch = r.u64("epoch")?;
        let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.remaining() != 0 {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { params, config, epoch, rng_seed, rng_word_pos })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parameters arranged for a model with the given shapes. Every stored
    /// name must be expected, every expected name present, and every shape
    /// must match.
    pub fn restore(&self, shapes: &ModelParams<Vec<usize>>) -> Result<ModelParams<Tensor>> {
        let mut stored: HashMap<&str, &Tensor> = HashMap::with_capacity(self.params.len());
        for (n, t) in &self.params {
            if stored.insert(n.as_str(), t).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate parameter `{n}`")));
            }
        }
        let expected: Vec<(String, &Vec<usize>)> = shapes.named();
        for (n, _) in &self.params {
            if !expected.iter().any(|(e, _)| e == n) {
                return Err(Error::UnknownParameter(n.clone()));
            }
        }
        let mut values = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = stored.get(name.as_str()).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            values.push((*t).clone());
        }
        Ok(shapes.with_values(&values))
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if n > self.remaining() {
            return Err(Error::CorruptCheckpoint(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
