//! Binary checkpoint format.
//!
//! ```text
//! "MTSS" | version u32 | payload length u64 | payload | sha256(all preceding bytes)
//! ```
//!
//! The payload is a sequence of tagged sections (`TRNK`, `HEAD`, `ALPH`,
//! `OPTM`, `RNGS`, `COST`), each a 4-byte tag, a u64 length and a body.
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optimizer::{OptimizerConfig, OptimizerState};
use crate::autodiff::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTSS";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (this build reads version {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    /// Optimizer state per task id, in task order.
    pub optimizers: Vec<(String, OptimizerState)>,
    pub seed: u64,
    /// Per task id: packets started so far (the batch stream position) and
    /// the parameter version.
    pub counters: Vec<(String, u64, u64)>,
    pub applies: u64,
    pub cost: f64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn entries<'a>(&mut self, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
        let items: Vec<_> = items.collect();
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.str(name);
            self.tensor(t);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend(body.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!("unexpected end at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn entries(&mut self, into: &mut ParamStore) -> Result<(), CheckpointError> {
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let t = self.tensor()?;
            into.insert(name, t);
        }
        Ok(())
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>, CheckpointError> {
        let found = self.take(4)?;
        if found != tag {
            return Err(CheckpointError::Malformed(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.u64()? as usize;
        Ok(Reader {
            bytes: self.take(len)?,
            pos: 0,
        })
    }
    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos != self.bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Writer(Vec::new());
        for (tag, prefix) in [(b"TRNK", "trunk."), (b"HEAD", "head."), (b"ALPH", "lasso.")] {
            let mut w = Writer(Vec::new());
            w.entries(self.params.with_prefix(prefix));
            payload.section(tag, w);
        }
        let mut w = Writer(Vec::new());
        w.u32(self.optimizers.len() as u32);
        for (task, opt) in &self.optimizers {
            w.str(task);
            w.f64(opt.config.rho);
            w.f64(opt.config.lr);
            w.f64(opt.config.eps);
            w.u64(opt.steps);
            w.entries(opt.mean_square.iter().map(|(k, v)| (k.as_str(), v)));
        }
        payload.section(b"OPTM", w);
        let mut w = Writer(Vec::new());
        w.u64(self.seed);
        w.u32(self.counters.len() as u32);
        for (task, counter, version) in &self.counters {
            w.str(task);
            w.u64(*counter);
            w.u64(*version);
        }
        w.u64(self.applies);
        payload.section(b"RNGS", w);
        let mut w = Writer(Vec::new());
        w.f64(self.cost);
        payload.section(b"COST", w);

        let mut out = Writer(Vec::with_capacity(payload.0.len() + 48));
        out.0.extend_from_slice(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.u64(payload.0.len() as u64);
        out.0.extend(payload.0);
        let digest = Sha256::digest(&out.0);
        out.0.extend_from_slice(&digest);
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Checksum("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = 16usize.saturating_add(len).saturating_add(DIGEST_LEN);
        if bytes.len() != expected {
            return Err(CheckpointError::Checksum(format!(
                "file is {} bytes, header declares {expected} (truncated or padded)",
                bytes.len()
            )));
        }
        let (body, digest) = bytes.split_at(16 + len);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum("digest mismatch".into()));
        }
        let mut r = Reader {
            bytes: &body[16..],
            pos: 0,
        };
        let mut params = ParamStore::new();
        for tag in [b"TRNK", b"HEAD", b"ALPH"] {
            let mut s = r.section(tag)?;
            s.entries(&mut params)?;
            s.finish()?;
        }
        let mut s = r.section(b"OPTM")?;
        let mut optimizers = Vec::new();
        for _ in 0..s.u32()? {
            let task = s.str()?;
            let config = OptimizerConfig {
                rho: s.f64()?,
                lr: s.f64()?,
                eps: s.f64()?,
            };
            let steps = s.u64()?;
            let mut ms = ParamStore::new();
            s.entries(&mut ms)?;
            let mean_square = ms.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            optimizers.push((
                task,
                OptimizerState {
                    config,
                    mean_square,
                    steps,
                },
            ));
        }
        s.finish()?;
        let mut s = r.section(b"RNGS")?;
        let seed = s.u64()?;
        let mut counters = Vec::new();
        for _ in 0..s.u32()? {
            counters.push((s.str()?, s.u64()?, s.u64()?));
        }
        let applies = s.u64()?;
        s.finish()?;
        let mut s = r.section(b"COST")?;
        let cost = s.f64()?;
        s.finish()?;
        r.finish()?;
        Ok(Checkpoint {
            params,
            optimizers,
            seed,
            counters,
            applies,
            cost,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("trunk.stem.w", Tensor::new(vec![2, 1, 1, 1], vec![0.1, -3.5e-300]).unwrap());
        params.insert("head.rp.fc2.b", Tensor::from_vec(vec![1.0, f64::MIN_POSITIVE, -0.0]));
        params.insert("lasso.pretrain.rp", Tensor::from_vec(vec![0.6, 0.8]));
        let mut opt = OptimizerState::new(OptimizerConfig::default());
        opt.mean_square = BTreeMap::from([("trunk.stem.w".to_string(), Tensor::from_vec(vec![1e-3, 2e-3]))]);
        opt.steps = 7;
        Checkpoint {
            params,
            optimizers: vec![("rp".into(), opt)],
            seed: 42,
            counters: vec![("rp".into(), 9, 7)],
            applies: 7,
            cost: 24.5,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.get("head.rp.fc2.b").unwrap().data()[2].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mtss");
        c.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), c);
    }

    #[test]
    fn truncation_fails_checksum() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 40, 17] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Checksum(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::UnsupportedVersion(0))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
    }
}
