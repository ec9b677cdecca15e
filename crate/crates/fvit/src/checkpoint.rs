//! Named-tensor checkpoint container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "FVIT" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | name bytes | u8 dtype (0 = f32, 1 = f64)
//!             | u8 ndim | u32 dims... | raw little-endian element data
//! ```
//!
//! Round-trips are bit-exact: save -> load -> save produces identical bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FVIT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl RawTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            RawTensor::F32(_) => Dtype::F32,
            RawTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            RawTensor::F32(t) => t.shape(),
            RawTensor::F64(t) => t.shape(),
        }
    }
}

pub trait IntoRaw: Scalar {
    fn wrap(t: Tensor<Self>) -> RawTensor;
    fn unwrap(raw: &RawTensor) -> Option<&Tensor<Self>>;
}

impl IntoRaw for f32 {
    fn wrap(t: Tensor<f32>) -> RawTensor {
        RawTensor::F32(t)
    }
    fn unwrap(raw: &RawTensor) -> Option<&Tensor<f32>> {
        match raw {
            RawTensor::F32(t) => Some(t),
            RawTensor::F64(_) => None,
        }
    }
}

impl IntoRaw for f64 {
    fn wrap(t: Tensor<f64>) -> RawTensor {
        RawTensor::F64(t)
    }
    fn unwrap(raw: &RawTensor) -> Option<&Tensor<f64>> {
        match raw {
            RawTensor::F64(t) => Some(t),
            RawTensor::F32(_) => None,
        }
    }
}

/// Ordered name -> tensor table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    entries: Vec<(String, RawTensor)>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: IntoRaw>(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), T::wrap(tensor)));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Fetch a tensor by name at an exact element type.
    pub fn require<T: IntoRaw>(&self, name: &str) -> Result<&Tensor<T>> {
        let raw = self.get(name).ok_or_else(|| {
            Error::Consistency(format!("checkpoint is missing tensor '{name}'"))
        })?;
        T::unwrap(raw).ok_or_else(|| {
            Error::Consistency(format!(
                "checkpoint tensor '{name}' has dtype {:?}",
                raw.dtype()
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, RawTensor)> {
        self.entries.iter()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, raw) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Usage(format!("tensor name too long: {name}")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(raw.dtype().tag());
            let shape = raw.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Usage("tensor rank exceeds u8".into()));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match raw {
                RawTensor::F32(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
                RawTensor::F64(t) => {
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not valid utf-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = match dtype {
                Dtype::F32 => {
                    let data = r.take(numel * 4)?;
                    let vals: Vec<f32> = data.chunks_exact(4).map(f32::read_le).collect();
                    RawTensor::F32(Tensor::from_vec(&shape, vals)?)
                }
                Dtype::F64 => {
                    let data = r.take(numel * 8)?;
                    let vals: Vec<f64> = data.chunks_exact(8).map(f64::read_le).collect();
                    RawTensor::F64(Tensor::from_vec(&shape, vals)?)
                }
            };
            entries.push((name, raw));
        }
        Ok(TensorTable { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
