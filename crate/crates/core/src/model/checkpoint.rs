//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "RSTRCKPT"
//! 8       2     version u16 (= 1)
//! 10      2     flags u16 (bit 0: optimizer moments present)
//! 12      4     epoch u32
//! 16      8     validation metric f64
//! 24      32    RNG seed (ChaCha8)
//! 56      8     RNG stream u64
//! 64      16    RNG word position u128
//! 80      8     optimizer step u64
//! 88      4     config text length N, then N bytes of `key = value` lines
//! ..      4     meta text length M, then M bytes of `key = value` lines
//! ..      4     tensor count T
//! ..            T manifest entries:
//!                 u16 name length, name bytes, u8 dtype (1 = f64),
//!                 u8 rank, rank x u32 dims, u64 byte offset into the data section
//! ..            data section: raw f64 arrays in manifest order
//! end-4   4     CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Model tensors use their parameter names; optimizer moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build, ModelConfig, ModelParams};
use crate::config::{format_kv, parse_kv, ConfigSection};
use crate::error::{Error, Result};
use crate::nn::{named_tensors, ParamTree};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSTRCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const FIXED_HEADER: usize = 92;

/// Snapshot of a ChaCha8 stream position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// AdamW moments, shaped like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimizerState {
    pub fn zeros(params: &ModelParams) -> Result<Self> {
        let z = params.try_map("", &mut |_, t| Tensor::zeros(t.dims().to_vec()))?;
        Ok(OptimizerState {
            step: 0,
            m: z.clone(),
            v: z,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u32,
    pub rng: RngState,
    pub val_metric: f64,
    /// Free-form `key = value` annotations, e.g. the training config.
    pub meta: Vec<(String, String)>,
}

fn put_text(buf: &mut Vec<u8>, text: &str) {
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut tensors = named_tensors(&ckpt.params, "");
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(named_tensors(&opt.m, "adam.m/"));
        tensors.extend(named_tensors(&opt.v, "adam.v/"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.optimizer.is_some() as u16).to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.val_metric.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.seed);
    buf.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    buf.extend_from_slice(&ckpt.optimizer.as_ref().map_or(0, |o| o.step).to_le_bytes());
    put_text(&mut buf, &format_kv(ckpt.config.entries()));
    put_text(&mut buf, &format_kv(ckpt.meta.iter().map(|(k, v)| (k, v))));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(t.dims().len() as u8);
        for d in t.dims() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "needed {n} bytes at offset {}, file body is {} bytes",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Malformed("text section is not UTF-8".into()))
    }
}

/// Parses checkpoint bytes; `source` names the origin in errors.
pub fn read_checkpoint(bytes: &[u8], source: &Path) -> Result<Checkpoint> {
    if bytes.len() < 10 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: source.to_path_buf(),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < FIXED_HEADER + 4 {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 10 };
    let flags = r.u16()?;
    let epoch = r.u32()?;
    let val_metric = f64::from_le_bytes(r.array()?);
    let rng = RngState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    };
    let step = r.u64()?;
    let mut config = ModelConfig::default();
    config.apply(&parse_kv(&r.text()?)?)?;
    let meta = parse_kv(&r.text()?)?
        .into_iter()
        .map(|e| (e.key, e.value))
        .collect();

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Malformed(format!(
                "tensor `{name}` has an unknown dtype"
            )));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        manifest.push((name, dims, offset));
    }
    let data = &body[r.pos..];
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for (name, dims, offset) in manifest {
        let n: usize = dims.iter().product();
        let bytes = offset
            .checked_add(8 * n)
            .and_then(|end| data.get(offset..end))
            .ok_or_else(|| Error::Truncated(format!("data for `{name}` runs past the end")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors
            .insert(name.clone(), Tensor::new(dims, values)?)
            .is_some()
        {
            return Err(Error::Malformed(format!("tensor `{name}` listed twice")));
        }
    }

    let mut take = |prefix: &str, template: &ModelParams| -> Result<ModelParams> {
        template.try_map(prefix, &mut |name, t| {
            let found = tensors
                .remove(&name)
                .ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))?;
            if found.dims() != t.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    found.dims(),
                    t.dims()
                )));
            }
            Ok(found)
        })
    };
    let template = build(&config, 0)?;
    let params = take("", &template)?;
    let optimizer = if flags & 1 == 1 {
        Some(OptimizerState {
            step,
            m: take("adam.m/", &template)?,
            v: take("adam.v/", &template)?,
        })
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Malformed(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        epoch,
        rng,
        val_metric,
        meta,
    })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected`, a differing model config is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = read_checkpoint(&bytes, path)?;
    if let Some(cfg) = expected {
        if *cfg != ckpt.config {
            let diffs: Vec<String> = cfg
                .entries()
                .into_iter()
                .zip(ckpt.config.entries())
                .filter(|(a, b)| a.1 != b.1)
                .map(|((k, want), (_, got))| format!("{k}: expected {want}, file has {got}"))
                .collect();
            return Err(Error::ConfigMismatch(diffs.join("; ")));
        }
    }
    Ok(ckpt)
}
