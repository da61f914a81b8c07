//! Little-endian binary container shared by checkpoints and tensor files.
//!
//! ```text
//! "ESNV" | version u32 | kind u32
//! kind 1 (checkpoint): config block | seed u64 | tensors | freeze mask
//! kind 2 (tensor):     tensors (exactly one)
//! tensors     = count u32, then per tensor:
//!               name_len u32 | name utf8 | ndim u32 | dims u64* | values f64*
//! freeze mask = count u32, then per name: name_len u32 | name utf8
//! config      = vocab, d_model, n_layers, n_heads, max_seq, patch_size,
//!               n_visual_tokens, d_vision, lora_rank as u64 | lora_alpha f64
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESNV";
pub const FORMAT_VERSION: u32 = 1;
const KIND_CHECKPOINT: u32 = 1;
const KIND_TENSOR: u32 = 2;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn header(&mut self, kind: u32) {
        self.0.extend(MAGIC);
        self.u32(FORMAT_VERSION);
        self.u32(kind);
    }
    fn tensors<'a>(&mut self, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.name(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }
    fn header(&mut self, want_kind: u32) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected \"ESNV\")".into()));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {v}")));
        }
        let k = self.u32()?;
        if k != want_kind {
            return Err(Error::Checkpoint(format!("wrong container kind {k}, expected {want_kind}")));
        }
        Ok(())
    }
    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.name()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > (self.buf.len() - self.pos) / 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` truncated")));
            }
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(KIND_CHECKPOINT);
    let c = &state.config;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.max_seq,
        c.patch_size,
        c.n_visual_tokens,
        c.d_vision,
        c.lora_rank,
    ] {
        w.u64(v as u64);
    }
    w.f64(c.lora_alpha);
    w.u64(state.seed);
    w.tensors(state.params().iter().map(|(k, v)| (k.as_str(), v)));
    w.u32(state.freeze_mask().len() as u32);
    for n in state.freeze_mask() {
        w.name(n);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(KIND_CHECKPOINT)?;
    let config = ModelConfig {
        vocab_size: r.usize()?,
        d_model: r.usize()?,
        n_layers: r.usize()?,
        n_heads: r.usize()?,
        max_seq: r.usize()?,
        patch_size: r.usize()?,
        n_visual_tokens: r.usize()?,
        d_vision: r.usize()?,
        lora_rank: r.usize()?,
        lora_alpha: r.f64()?,
    };
    let seed = r.u64()?;
    let params = r.tensors()?;
    let n = r.u32()?;
    let mut mask = BTreeSet::new();
    for _ in 0..n {
        mask.insert(r.name()?);
    }
    r.finish()?;
    ModelState::from_parts(config, seed, params, mask)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn encode_tensor_file(name: &str, t: &Tensor) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(KIND_TENSOR);
    w.tensors(std::iter::once((name, t)));
    w.0
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(KIND_TENSOR)?;
    let mut t = r.tensors()?;
    r.finish()?;
    if t.len() != 1 {
        return Err(Error::Checkpoint(format!("expected one tensor, found {}", t.len())));
    }
    Ok(t.pop_first().unwrap().1)
}
