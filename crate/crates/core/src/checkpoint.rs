//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "CRCL"  u32 version (1)
//! u32 config length, UTF-8 `key = value` lines
//! u32 tensor count
//! per tensor: u32 name length, name, u8 dtype (0 f32, 1 f64),
//!             u32 rank, u32 dims[rank], raw scalars
//! ```
//!
//! The tied embedding / output head is stored once as `wte.weight`. Tensors
//! appear in canonical slot order and every field is validated on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{layout, CaracalModel, ModelConfig};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CRCL";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::checkpoint("length", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Real>(model: &CaracalModel<T>) -> Result<Vec<u8>> {
    let mut config = model.config.clone();
    config.precision = T::PRECISION;
    let text = config.to_text();
    let slots = model.params.slots();
    let mut out = Vec::with_capacity(64 + text.len() + model.param_count() * T::BYTES);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, slots.len())?;
    for (name, _, t) in slots {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(T::PRECISION.dtype_code());
        put_u32(&mut out, t.rank())?;
        for &d in t.dims() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Real>(model: &CaracalModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

/// A loaded model in whichever precision the checkpoint was written.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(CaracalModel<f32>),
    F64(CaracalModel<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    pub fn precision(&self) -> Precision {
        self.config().precision
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::checkpoint(field, format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
}

fn read_tensors<T: Real>(r: &mut Reader<'_>, cfg: &ModelConfig) -> Result<CaracalModel<T>> {
    let shapes = layout(cfg)?;
    let expected = shapes.slots();
    let count = r.u32("tensor_count")?;
    if count != expected.len() {
        return Err(Error::checkpoint(
            "tensor_count",
            format!("expected {} tensors for this config, found {count}", expected.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, (want_name, _, want_dims)) in expected.iter().enumerate() {
        let len = r.u32(&format!("tensor[{i}].name_len"))?;
        let name = std::str::from_utf8(r.take(len, &format!("tensor[{i}].name"))?)
            .map_err(|_| Error::checkpoint(format!("tensor[{i}].name"), "not UTF-8"))?;
        if name != want_name {
            return Err(Error::checkpoint(
                format!("tensor[{i}].name"),
                format!("expected `{want_name}`, found `{name}`"),
            ));
        }
        let dtype = r.u8(&format!("{name}.dtype"))?;
        if Precision::from_dtype_code(dtype) != Some(T::PRECISION) {
            return Err(Error::checkpoint(
                format!("{name}.dtype"),
                format!("code {dtype} does not match config precision {}", T::PRECISION),
            ));
        }
        let rank = r.u32(&format!("{name}.rank"))?;
        if rank != want_dims.len() {
            return Err(Error::checkpoint(
                format!("{name}.rank"),
                format!("expected {}, found {rank}", want_dims.len()),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("{name}.dims"))?);
        }
        if &dims != *want_dims {
            return Err(Error::checkpoint(
                format!("{name}.dims"),
                format!("expected {want_dims:?}, found {dims:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * T::BYTES, &format!("{name}.data"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        values.push(Tensor::new(dims, data)?);
    }
    Ok(CaracalModel {
        config: cfg.clone(),
        params: shapes.rebuild(values)?,
    })
}

pub fn decode(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::checkpoint("magic", format!("expected \"CRCL\", found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::checkpoint("version", format!("unsupported version {version}")));
    }
    let len = r.u32("config_len")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::checkpoint("config", "not UTF-8"))?;
    let cfg = ModelConfig::from_text(text)?;
    let model = match cfg.precision {
        Precision::F32 => AnyModel::F32(read_tensors(&mut r, &cfg)?),
        Precision::F64 => AnyModel::F64(read_tensors(&mut r, &cfg)?),
    };
    if r.pos != bytes.len() {
        return Err(Error::checkpoint("trailing", format!("{} unexpected bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyModel> {
    decode(&std::fs::read(path)?)
}
