//! Single-file training checkpoints.
//!
//! Layout: `MAGIC`, `u32` format version, `u64` header length, a JSON header, then every tensor's
//! elements as little-endian floats in header order. Writes go to a sibling temp file that is
//! renamed into place, so a crash never leaves a truncated checkpoint under the final name.

use std::fs;
use std::io::Write;
use std::path::Path;

use fs2ffpe_autograd::{Adam, DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FS2FFPE\0";
pub const VERSION: u32 = 1;

/// Segment names, one per network.
pub const SEGMENT_G: &str = "G";
pub const SEGMENT_G_AUX: &str = "G_aux";
pub const SEGMENT_D: &str = "D";
pub const SEGMENT_HEADS: &str = "heads";

/// Optimizer moments for one segment, aligned with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Real> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Moments<T> {
    pub fn from_adam(a: &Adam<T>) -> Self {
        Self { step: a.step, m: a.m.clone(), v: a.v.clone() }
    }

    pub fn into_adam(self, beta1: f64, beta2: f64, eps: f64) -> Adam<T> {
        let mut a = Adam::new(&self.m, beta1, beta2, eps);
        a.step = self.step;
        a.m = self.m;
        a.v = self.v;
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T: Real> {
    pub name: String,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub moments: Option<Moments<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub iteration: u64,
    pub config: TrainConfig,
    pub segments: Vec<Segment<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    iteration: u64,
    dtype: String,
    config: String,
    config_hash: String,
    segments: Vec<SegmentHeader>,
}

#[derive(Serialize, Deserialize)]
struct SegmentHeader {
    name: String,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    /// Element offset into the data block.
    offset: usize,
}

const KINDS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl<T: Real> Checkpoint<T> {
    pub fn segment(&self, name: &str) -> Option<&Segment<T>> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Segment<T>> {
        self.segment(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no '{name}' segment")))
    }

    /// Drops every segment not named in `keep`.
    pub fn retain(&mut self, keep: &[&str]) {
        self.segments.retain(|s| keep.contains(&s.name.as_str()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut offset = 0;
        let mut segments = Vec::new();
        for s in &self.segments {
            if s.names.len() != s.params.len() {
                return Err(Error::Checkpoint(format!("segment '{}' has unnamed tensors", s.name)));
            }
            let mut tensors = Vec::new();
            let mut push = |name: &str, kind: &str, t: &Tensor<T>, data: &mut Vec<u8>| {
                tensors.push(TensorEntry { name: name.into(), kind: kind.into(), shape: t.shape().to_vec(), offset });
                offset += t.numel();
                for &x in t.data() {
                    x.extend_le_bytes(data);
                }
            };
            for (n, p) in s.names.iter().zip(&s.params) {
                push(n, KINDS[0], p, &mut data);
            }
            if let Some(m) = &s.moments {
                if m.m.len() != s.params.len() || m.v.len() != s.params.len() {
                    return Err(Error::Checkpoint(format!("segment '{}' moments misaligned", s.name)));
                }
                for (n, t) in s.names.iter().zip(&m.m) {
                    push(n, KINDS[1], t, &mut data);
                }
                for (n, t) in s.names.iter().zip(&m.v) {
                    push(n, KINDS[2], t, &mut data);
                }
            }
            segments.push(SegmentHeader {
                name: s.name.clone(),
                adam_step: s.moments.as_ref().map(|m| m.step),
                tensors,
            });
        }
        let header = Header {
            iteration: self.iteration,
            dtype: T::DTYPE.as_str().into(),
            config: self.config.serialize(),
            config_hash: self.config.hash(),
            segments,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    /// Parses a checkpoint written in either precision, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let (header, data) = split(bytes)?;
        let dtype = DType::parse(&header.dtype).ok_or_else(|| bad("unknown dtype"))?;
        let config = TrainConfig::parse(&header.config)?;
        if config.hash() != header.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let read = |e: &TensorEntry| -> Result<Tensor<T>> {
            let n: usize = e.shape.iter().product();
            let size = dtype.size_of();
            let raw = data
                .get(e.offset * size..(e.offset + n) * size)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' lies outside the data block", e.name)))?;
            let values: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::from_le_slice(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::from_le_slice(c))).collect(),
            };
            Ok(Tensor::from_vec(&e.shape, values)?)
        };
        let mut segments = Vec::new();
        for sh in &header.segments {
            let of_kind = |k: &'static str| sh.tensors.iter().filter(move |e| e.kind == k);
            let names: Vec<String> = of_kind(KINDS[0]).map(|e| e.name.clone()).collect();
            let params = of_kind(KINDS[0]).map(read).collect::<Result<Vec<_>>>()?;
            let moments = match sh.adam_step {
                Some(step) => Some(Moments {
                    step,
                    m: of_kind(KINDS[1]).map(read).collect::<Result<Vec<_>>>()?,
                    v: of_kind(KINDS[2]).map(read).collect::<Result<Vec<_>>>()?,
                }),
                None => None,
            };
            segments.push(Segment { name: sh.name.clone(), names, params, moments });
        }
        Ok(Self { iteration: header.iteration, config, segments })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (expected {VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, &body[hlen..]))
}

/// Element type the checkpoint at `path` was written in.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = split(&bytes)?;
    DType::parse(&header.dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype '{}'", header.dtype)))
}

/// Copies `src` to `dst` keeping only the generator segment, in the stored precision.
pub fn prune_to_generator(src: &Path, dst: &Path) -> Result<()> {
    fn go<T: Real>(src: &Path, dst: &Path) -> Result<()> {
        let mut c = Checkpoint::<T>::load(src)?;
        c.retain(&[SEGMENT_G]);
        c.save(dst)
    }
    match stored_dtype(src)? {
        DType::F32 => go::<f32>(src, dst),
        DType::F64 => go::<f64>(src, dst),
    }
}
