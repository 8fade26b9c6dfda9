//! Binary checkpoint format for phase handoff.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "LFMP" | u16 version | u8 phase (S/T/P/O) | u8 dtype (4 or 8)
//! u32 m | u32 m' | u32 D | u32 n_hidden | u32 hidden[n_hidden] | u64 schema hash
//! u32 model_fields[m']
//! u8 has_gate  [f64 beta zeta gamma mu sigma2 | u32 n | dtype log_alpha[n]]
//! u8 has_mask  [u32 m | f64 tau | u32 m' | u8 keep_bits[ceil(m/8)] | f64 importance[m]]
//! u32 n_tensors, each: u16 name_len | name | u8 ndim | u32 dims[ndim] | dtype data
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Tensors use the compute dtype (32-bit by default), so a round trip is
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::data::FieldSchema;
use crate::error::{Error, Result};
use crate::gate::{GateConstants, GateParams};
use crate::model::{BackboneModel, Linear};
use crate::pipeline::PruneMask;
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 4] = b"LFMP";
pub const VERSION: u16 = 1;

/// Which model of the pipeline a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Base model before pretraining.
    Base,
    /// Pretrained model with its gate.
    Pretrained,
    /// Pruned model with transferred weights.
    Pruned,
    /// Final model after continued training.
    Final,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Base => b'S',
            Phase::Pretrained => b'T',
            Phase::Pruned => b'P',
            Phase::Final => b'O',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            b'S' => Phase::Base,
            b'T' => Phase::Pretrained,
            b'P' => Phase::Pruned,
            b'O' => Phase::Final,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub phase: Phase,
    pub model: BackboneModel<T>,
    pub gate: Option<GateParams<T>>,
    pub mask: Option<PruneMask>,
}

/// Fixed-size prefix readable without knowing the dtype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub phase: Phase,
    pub dtype: DType,
    pub m: usize,
    pub m_prime: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub schema_hash: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Shape("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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

    fn count(&mut self, limit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(Error::Shape(format!("implausible count {n}")));
        }
        Ok(n)
    }

    fn reals<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::Shape("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Checks magic, version and CRC, returning the payload without footer.
fn verified_payload(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Shape("checkpoint truncated".into()));
    }
    let (payload, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Shape("checksum mismatch".into()));
    }
    if &payload[..4] != MAGIC {
        return Err(Error::Shape("not a checkpoint (bad magic)".into()));
    }
    Ok(payload)
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Shape(format!("unsupported checkpoint version {version}")));
    }
    let phase = Phase::from_tag(r.u8()?).ok_or_else(|| Error::Shape("bad phase tag".into()))?;
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Shape("bad dtype tag".into()))?;
    let m = r.u32()? as usize;
    let m_prime = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let n_hidden = r.count(1 << 10)?;
    let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let schema_hash = r.u64()?;
    Ok(Header {
        phase,
        dtype,
        m,
        m_prime,
        embed_dim,
        hidden,
        schema_hash,
    })
}

/// Reads and verifies only the header.
pub fn peek_header(bytes: &[u8]) -> Result<Header> {
    let payload = verified_payload(bytes)?;
    read_header(&mut Reader { buf: payload, pos: 0 })
}

impl<T: Real> Checkpoint<T> {
    pub fn new(phase: Phase, model: BackboneModel<T>) -> Self {
        Self {
            phase,
            model,
            gate: None,
            mask: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.phase.tag());
        out.push(T::DTYPE.tag());
        put_u32(&mut out, model.schema().len());
        put_u32(&mut out, model.fields().len());
        put_u32(&mut out, model.embed_dim());
        put_u32(&mut out, model.hidden().len());
        for &h in model.hidden() {
            put_u32(&mut out, h);
        }
        out.extend_from_slice(&model.schema().hash().to_le_bytes());
        for &f in model.fields() {
            put_u32(&mut out, f);
        }

        match &self.gate {
            Some(g) => {
                out.push(1);
                let c = g.constants;
                for v in [c.beta, c.zeta, c.gamma, c.mu, c.sigma2] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_u32(&mut out, g.len());
                g.log_alpha.iter().for_each(|v| v.write_le(&mut out));
            }
            None => out.push(0),
        }

        match &self.mask {
            Some(mask) => {
                out.push(1);
                put_u32(&mut out, mask.len());
                out.extend_from_slice(&mask.tau.to_le_bytes());
                put_u32(&mut out, mask.retained_count);
                let mut bits = vec![0u8; mask.len().div_ceil(8)];
                for (j, &k) in mask.keep.iter().enumerate() {
                    if k {
                        bits[j / 8] |= 1 << (j % 8);
                    }
                }
                out.extend_from_slice(&bits);
                for v in &mask.importance {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }

        let n_tensors = model.embeddings().len() + 2 * model.layers().len();
        put_u32(&mut out, n_tensors);
        let mut tensor = |name: String, dims: &[usize], data: &mut dyn Iterator<Item = T>| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for &d in dims {
                put_u32(&mut out, d);
            }
            data.for_each(|v| v.write_le(&mut out));
        };
        for (table, &f) in model.embeddings().iter().zip(model.fields()) {
            let (r, c) = table.dim();
            tensor(format!("embed.{f}"), &[r, c], &mut table.iter().copied());
        }
        for (l, layer) in model.layers().iter().enumerate() {
            let (r, c) = layer.weight.dim();
            tensor(format!("mlp.{l}.weight"), &[r, c], &mut layer.weight.iter().copied());
            tensor(format!("mlp.{l}.bias"), &[layer.bias.len()], &mut layer.bias.iter().copied());
        }

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint against the active schema.
    pub fn from_bytes(bytes: &[u8], schema: Arc<FieldSchema>) -> Result<Self> {
        let payload = verified_payload(bytes)?;
        let mut r = Reader { buf: payload, pos: 0 };
        let h = read_header(&mut r)?;
        if h.dtype != T::DTYPE {
            return Err(Error::Shape(format!("checkpoint dtype {:?}, expected {:?}", h.dtype, T::DTYPE)));
        }
        if h.schema_hash != schema.hash() || h.m != schema.len() {
            return Err(Error::Schema("checkpoint schema hash does not match the active schema".into()));
        }
        let fields = (0..h.m_prime).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;

        let gate = match r.u8()? {
            0 => None,
            1 => {
                let constants = GateConstants {
                    beta: r.f64()?,
                    zeta: r.f64()?,
                    gamma: r.f64()?,
                    mu: r.f64()?,
                    sigma2: r.f64()?,
                };
                let n = r.count(h.m)?;
                Some(GateParams::from_log_alpha(r.reals(n)?, constants)?)
            }
            _ => return Err(Error::Shape("bad gate flag".into())),
        };

        let mask = match r.u8()? {
            0 => None,
            1 => {
                let m = r.count(h.m)?;
                let tau = r.f64()?;
                let retained_count = r.u32()? as usize;
                let bits = r.take(m.div_ceil(8))?;
                let keep: Vec<bool> = (0..m).map(|j| bits[j / 8] & (1 << (j % 8)) != 0).collect();
                let importance = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Some(PruneMask {
                    keep,
                    importance,
                    retained_count,
                    tau,
                })
            }
            _ => return Err(Error::Shape("bad mask flag".into())),
        };

        let n_tensors = r.count(1 << 16)?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Shape("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims.iter().product();
            tensors.push((name, dims, r.reals::<T>(len)?));
        }
        if r.pos != payload.len() {
            return Err(Error::Shape("trailing bytes after tensors".into()));
        }

        let mut it = tensors.into_iter();
        let mut next = |expected: &str, ndim: usize| -> Result<(Vec<usize>, Vec<T>)> {
            match it.next() {
                Some((name, dims, data)) if name == expected && dims.len() == ndim => Ok((dims, data)),
                Some((name, ..)) => Err(Error::Shape(format!("unexpected tensor {name:?}, wanted {expected:?}"))),
                None => Err(Error::Shape(format!("missing tensor {expected:?}"))),
            }
        };
        let mut embeddings = Vec::with_capacity(fields.len());
        for &f in &fields {
            let (dims, data) = next(&format!("embed.{f}"), 2)?;
            embeddings.push(Array2::from_shape_vec((dims[0], dims[1]), data).unwrap());
        }
        let mut layers = Vec::with_capacity(h.hidden.len() + 1);
        for l in 0..=h.hidden.len() {
            let (wd, w) = next(&format!("mlp.{l}.weight"), 2)?;
            let (_, b) = next(&format!("mlp.{l}.bias"), 1)?;
            layers.push(Linear {
                weight: Array2::from_shape_vec((wd[0], wd[1]), w).unwrap(),
                bias: Array1::from(b),
            });
        }
        if it.next().is_some() {
            return Err(Error::Shape("extra tensors in checkpoint".into()));
        }
        let model = BackboneModel::from_parts(schema, fields, h.embed_dim, embeddings, layers)?;
        if model.hidden() != h.hidden.as_slice() {
            return Err(Error::Shape("hidden sizes disagree with header".into()));
        }
        if let Some(g) = &gate {
            if g.len() != h.m {
                return Err(Error::Shape("gate length does not match the schema".into()));
            }
        }
        Ok(Self {
            phase: h.phase,
            model,
            gate,
            mask,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, schema: Arc<FieldSchema>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        Self::from_bytes(&bytes, schema).map_err(|e| match e {
            Error::Schema(msg) | Error::Shape(msg) | Error::Config(msg) => Error::artifact(path, msg),
            other => other,
        })
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}
