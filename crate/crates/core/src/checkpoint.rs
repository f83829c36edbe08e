//! Versioned binary checkpoints.
//!
//! Layout, in order: magic `MDTCKPT1`; fingerprint; step; config text;
//! parameters; optimizer kind, step and moment trees; EMA tree; the four
//! training RNG states; batch-iterator state; normalization statistics; and a
//! trailing checksum. Header integers and extents are big-endian, tensor
//! payloads little-endian. Strings are a `u32` length plus UTF-8 bytes. A
//! tree is a `u32` count of named tensors, each a string name, a dtype tag,
//! a rank byte, `u64` extents and the raw values. The checksum is the first
//! eight bytes of SHA-256 over everything before it.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{BatchState, Normalization};
use crate::error::{Error, Result};
use crate::numerics::{DType, ParameterTree, RngState, Tensor};
use crate::training::{OptimizerKind, OptimizerState, TrainRngs, TrainState};

pub const MAGIC: &[u8; 8] = b"MDTCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub fingerprint: String,
    /// Resolved run configuration as config-file text.
    pub config_text: String,
    pub state: TrainState,
    pub norm: Normalization,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor_f32(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u8(DType::F32.tag());
        self.u8(t.shape().len() as u8);
        for &e in t.shape() {
            self.u64(e as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensor_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.str(name);
        self.u8(DType::F64.tag());
        self.u8(shape.len() as u8);
        for &e in shape {
            self.u64(e as u64);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tree(&mut self, t: &ParameterTree<f32>) {
        self.u32(t.len() as u32);
        for (name, v) in t.iter() {
            self.tensor_f32(name, v);
        }
    }
    fn opt_tree(&mut self, t: &Option<ParameterTree<f32>>) {
        match t {
            Some(t) => {
                self.u8(1);
                self.tree(t);
            }
            None => self.u8(0),
        }
    }
    fn rng(&mut self, s: &RngState) {
        self.u64(s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_be_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("value {v} does not fit in usize")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }
    /// Name, shape and payload of one tagged tensor.
    fn tensor(&mut self) -> Result<(String, Vec<usize>, RawValues)> {
        let name = self.str()?;
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| self.err(format!("unknown dtype tag {tag}")))?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| self.err("tensor extent overflow"))?;
        let vals = match dtype {
            DType::F32 => {
                let raw = self.take(numel.checked_mul(4).ok_or_else(|| self.err("size overflow"))?)?;
                RawValues::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::F64 => {
                let raw = self.take(numel.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
                RawValues::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
        };
        Ok((name, shape, vals))
    }
    fn tree(&mut self) -> Result<ParameterTree<f32>> {
        let n = self.u32()?;
        let mut t = ParameterTree::new();
        for _ in 0..n {
            let (name, shape, vals) = self.tensor()?;
            match vals {
                RawValues::F32(v) => t.insert(name, Tensor::new(shape, v)?),
                RawValues::F64(_) => return Err(self.err(format!("tensor {name}: expected f32 payload"))),
            }
        }
        Ok(t)
    }
    fn opt_tree(&mut self) -> Result<Option<ParameterTree<f32>>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.tree()?)),
            b => Err(self.err(format!("bad presence byte {b}"))),
        }
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.u64()?,
            stream: self.u64()?,
            word_pos: self.u128()?,
        })
    }
    fn f64s(&mut self, expect: &str) -> Result<Vec<f64>> {
        let (name, _, vals) = self.tensor()?;
        match vals {
            RawValues::F64(v) if name == expect => Ok(v),
            _ => Err(self.err(format!("expected f64 tensor {expect}, found {name}"))),
        }
    }
}

enum RawValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_be_bytes(d[..8].try_into().unwrap())
}

fn kind_tag(k: OptimizerKind) -> u8 {
    match k {
        OptimizerKind::AdamW => 0,
        OptimizerKind::Adan => 1,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.str(&self.fingerprint);
        w.u64(self.state.step);
        w.str(&self.config_text);
        w.tree(&self.state.params);
        let o = &self.state.optimizer;
        w.u8(kind_tag(o.kind));
        w.u64(o.step);
        w.tree(&o.m);
        w.tree(&o.v);
        w.opt_tree(&o.n);
        w.opt_tree(&o.prev);
        w.tree(&self.state.ema);
        for s in self.state.rngs.states() {
            w.rng(&s);
        }
        let b = &self.state.batches;
        w.u64(b.len as u64);
        w.u64(b.batch as u64);
        w.u64(b.epoch);
        w.u64(b.cursor as u64);
        w.rng(&b.epoch_rng);
        let c = self.norm.mean.len();
        w.tensor_f64("norm.mean", &[c], &self.norm.mean);
        w.tensor_f64("norm.std", &[c], &self.norm.std);
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Integrity(format!("checkpoint too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad checkpoint magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_be_bytes(tail.try_into().unwrap());
        if checksum(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let fingerprint = r.str()?;
        let step = r.u64()?;
        let config_text = r.str()?;
        let params = r.tree()?;
        let kind = match r.u8()? {
            0 => OptimizerKind::AdamW,
            1 => OptimizerKind::Adan,
            t => return Err(r.err(format!("unknown optimizer tag {t}"))),
        };
        let optimizer = OptimizerState {
            kind,
            step: r.u64()?,
            m: r.tree()?,
            v: r.tree()?,
            n: r.opt_tree()?,
            prev: r.opt_tree()?,
        };
        let ema = r.tree()?;
        let rngs = TrainRngs::from_states([r.rng()?, r.rng()?, r.rng()?, r.rng()?]);
        let batches = BatchState {
            len: r.usize()?,
            batch: r.usize()?,
            epoch: r.u64()?,
            cursor: r.usize()?,
            epoch_rng: r.rng()?,
        };
        let norm = Normalization {
            mean: r.f64s("norm.mean")?,
            std: r.f64s("norm.std")?,
        };
        if r.pos != body.len() {
            return Err(r.err(format!("{} trailing bytes before checksum", body.len() - r.pos)));
        }
        Ok(Self {
            fingerprint,
            config_text,
            state: TrainState {
                step,
                params,
                optimizer,
                ema,
                rngs,
                batches,
            },
            norm,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Whole-file write that never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
