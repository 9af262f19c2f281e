//! "RGCT" tensor container used for datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"RGCT"
//! u32    version
//! u32    tensor count
//! per tensor:
//!   u16 name length, UTF-8 name
//!   u8  ndim, u32 dims[ndim]
//!   u8  dtype tag (0 = f32, 1 = f64, 2 = u8)
//!   raw payload
//! optional trailing metadata record:
//!   b"META", u32 length, UTF-8 text
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"RGCT";
pub const VERSION: u32 = 1;
const META_TAG: &[u8; 4] = b"META";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8 { .. } => DType::U8,
        }
    }

    /// Converts to a float tensor of type `T` regardless of storage type.
    pub fn to_float<T: Element>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
            TensorData::U8 { shape, data } => Tensor::new(
                shape.clone(),
                data.iter().map(|&b| T::from_f64_lossy(b as f64)).collect(),
            )
            .expect("validated on construction"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub metadata: Option<String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
            DType::U8 => unreachable!("u8 is not a float element type"),
        };
        self.tensors.push(NamedTensor {
            name: name.into(),
            data,
        });
    }

    pub fn push_u8(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("container", "u8 payload does not match shape"));
        }
        self.tensors.push(NamedTensor {
            name: name.into(),
            data: TensorData::U8 { shape, data },
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_large)?.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(too_large)?.to_le_bytes());
            out.extend_from_slice(name);
            let shape = t.data.shape();
            out.push(u8::try_from(shape.len()).map_err(too_large)?);
            for &d in shape {
                out.extend_from_slice(&u32::try_from(d).map_err(too_large)?.to_le_bytes());
            }
            out.push(t.data.dtype().tag());
            match &t.data {
                TensorData::F32(x) => f32::to_le_bytes_vec(x.data(), &mut out),
                TensorData::F64(x) => f64::to_le_bytes_vec(x.data(), &mut out),
                TensorData::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        if let Some(meta) = &self.metadata {
            out.extend_from_slice(META_TAG);
            out.extend_from_slice(&u32::try_from(meta.len()).map_err(too_large)?.to_le_bytes());
            out.extend_from_slice(meta.as_bytes());
        }
        Ok(out)
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic (expected RGCT)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| Error::format(path, format!("unknown dtype tag in `{name}`")))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(path, "tensor too large"))?;
            let payload = r.take(
                numel
                    .checked_mul(dtype.size())
                    .ok_or_else(|| Error::format(path, "tensor too large"))?,
            )?;
            let data = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(shape, f32::from_le_bytes_slice(payload))?),
                DType::F64 => TensorData::F64(Tensor::new(shape, f64::from_le_bytes_slice(payload))?),
                DType::U8 => TensorData::U8 {
                    shape,
                    data: payload.to_vec(),
                },
            };
            tensors.push(NamedTensor { name, data });
        }
        let metadata = if r.remaining() == 0 {
            None
        } else {
            if r.take(4)? != META_TAG {
                return Err(Error::format(path, "trailing bytes after tensors"));
            }
            let len = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "metadata is not UTF-8"))?
                .to_string();
            if r.remaining() != 0 {
                return Err(Error::format(path, "trailing bytes after metadata"));
            }
            Some(text)
        };
        Ok(Self { tensors, metadata })
    }

    /// Writes through a temporary file and renames it into place, so an
    /// existing file is never left half-written.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn too_large(_: std::num::TryFromIntError) -> Error {
    Error::InvalidInput("value too large for the container format".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
