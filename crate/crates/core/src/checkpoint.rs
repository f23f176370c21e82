//! Binary model snapshots.
//!
//! Layout (little-endian): magic `CSMNCKPT`, `u32` format version, the model
//! config as TOML text, the embedding schema, every named parameter tensor
//! (shape then raw `f64` bits) and an optional memory section with the slot
//! contents and update rates. Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::embeddings::{FieldGroup, FieldSpec, Schema};
use crate::error::{Error, Result};
use crate::model::{Csmn, ModelConfig};
use crate::tensor::Tensor;
use crate::urmn::Memory;

const MAGIC: &[u8; 8] = b"CSMNCKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.usize()?;
        let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("truncated tensor of shape {shape:?}")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

pub fn to_bytes(model: &Csmn) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let config = toml::to_string(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.str(&config);
    let schema = model.network().embeddings().schema();
    w.usize(schema.fields().len());
    for f in schema.fields() {
        w.str(&f.name);
        w.str(&f.group.to_string());
        w.usize(f.vocab);
        w.usize(f.dim);
        w.u8(f.hashed as u8);
    }
    w.usize(model.params().len());
    for (_, name, t) in model.params().iter() {
        w.str(name);
        w.tensor(t);
    }
    match model.memory() {
        Some(m) => {
            w.u8(1);
            w.f64(m.alpha_key());
            w.f64(m.alpha_value());
            w.tensor(m.keys());
            w.tensor(m.values());
        }
        None => w.u8(0),
    }
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Csmn> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let config: ModelConfig = toml::from_str(&r.str()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let nfields = r.usize()?;
    let mut fields = Vec::with_capacity(nfields.min(1024));
    for _ in 0..nfields {
        let name = r.str()?;
        let group: FieldGroup = r.str()?.parse()?;
        let vocab = r.usize()?;
        let dim = r.usize()?;
        let hashed = r.u8()? != 0;
        fields.push(FieldSpec::new(name, group, vocab, dim).hashed(hashed));
    }
    let schema = Schema::new(fields)?;
    let ntensors = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..ntensors {
        let name = r.str()?;
        let t = r.tensor()?;
        params.add(name, t)?;
    }
    let memory = match r.u8()? {
        0 => None,
        1 => {
            let alpha_key = r.f64()?;
            let alpha_value = r.f64()?;
            let keys = r.tensor()?;
            let values = r.tensor()?;
            Some(Memory::from_parts(keys, values, alpha_key, alpha_value)?)
        }
        other => return Err(Error::Checkpoint(format!("bad memory flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Csmn::from_parts(config, schema, params, memory)
}

pub fn save(model: &Csmn, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Csmn> {
    from_bytes(&fs::read(path)?)
}
