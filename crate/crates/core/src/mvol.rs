//! MVOL: a minimal little-endian container for multi-channel volumes.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MVOL"
//!      4     2  version (u16, currently 1)
//!      6     2  dtype code (u16: 1 = f32, 2 = u8)
//!      8     4  channel count (u32)
//!     12    12  extents X, Y, Z (3 × u32)
//!     24     …  payload: channel-major, then x-fastest, little-endian
//! ```
//!
//! The payload length must equal `dtype size × channels × X × Y × Z` exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::LabelVolume;

pub const MAGIC: [u8; 4] = *b"MVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MvolError {
    #[error("bad magic {0:?}, expected \"MVOL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported MVOL version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u16),
    #[error("header truncated: {0} bytes")]
    TruncatedHeader(usize),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{extra} unexpected bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("extents {channels} x {extents:?} overflow the addressable size")]
    ExtentOverflow { channels: u32, extents: [u32; 3] },
    #[error("zero extent in {channels} x {extents:?}")]
    ZeroExtent { channels: u32, extents: [u32; 3] },
    #[error("expected dtype {expected:?}, file holds {found:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

/// In-memory MVOL contents; `payload` is in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct MvolFile {
    pub channels: usize,
    pub extents: [usize; 3],
    pub payload: Payload,
}

fn element_count(channels: u32, extents: [u32; 3]) -> Result<usize, MvolError> {
    if channels == 0 || extents.contains(&0) {
        return Err(MvolError::ZeroExtent { channels, extents });
    }
    extents
        .iter()
        .try_fold(channels as usize, |acc, &e| acc.checked_mul(e as usize))
        .ok_or(MvolError::ExtentOverflow { channels, extents })
}

impl MvolFile {
    pub fn dtype(&self) -> Dtype {
        self.payload.dtype()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dtype() as u16).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for e in self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MvolError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(MvolError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(MvolError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(MvolError::BadMagic(magic));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(MvolError::UnsupportedVersion(version));
        }
        let code = u16_at(6);
        let dtype = Dtype::from_code(code).ok_or(MvolError::UnknownDtype(code))?;
        let channels = u32_at(8);
        let extents = [u32_at(12), u32_at(16), u32_at(20)];
        let count = element_count(channels, extents)?;
        let expected = count
            .checked_mul(dtype.size())
            .ok_or(MvolError::ExtentOverflow { channels, extents })?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < expected {
            return Err(MvolError::TruncatedPayload {
                expected,
                actual: body.len(),
            });
        }
        if body.len() > expected {
            return Err(MvolError::TrailingBytes {
                extra: body.len() - expected,
            });
        }
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(body.to_vec()),
        };
        Ok(MvolFile {
            channels: channels as usize,
            extents: extents.map(|e| e as usize),
            payload,
        })
    }

    /// From a `[channels, X, Y, Z]` tensor (z-fastest in memory).
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (channels, extents) = volume_layout(t.shape())?;
        let mut out = vec![0f32; t.numel()];
        reorder_to_file(t.data(), &mut out, channels, extents);
        Ok(MvolFile {
            channels,
            extents,
            payload: Payload::F32(out),
        })
    }

    /// As a `[channels, X, Y, Z]` tensor. u8 payloads are widened.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let file: Vec<f32> = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&b| b as f32).collect(),
        };
        let mut data = vec![0f32; file.len()];
        reorder_from_file(&file, &mut data, self.channels, self.extents);
        let [x, y, z] = self.extents;
        Tensor::new(vec![self.channels, x, y, z], data)
    }

    pub fn from_labels(l: &LabelVolume) -> Self {
        let mut out = vec![0u8; l.data().len()];
        reorder_to_file(l.data(), &mut out, 1, l.dims());
        MvolFile {
            channels: 1,
            extents: l.dims(),
            payload: Payload::U8(out),
        }
    }

    pub fn to_labels(&self) -> Result<LabelVolume> {
        let Payload::U8(v) = &self.payload else {
            return Err(MvolError::DtypeMismatch {
                expected: Dtype::U8,
                found: self.dtype(),
            }
            .into());
        };
        if self.channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "label volume must have one channel, found {}",
                self.channels
            )));
        }
        let mut data = vec![0u8; v.len()];
        reorder_from_file(v, &mut data, 1, self.extents);
        LabelVolume::new(self.extents, data)
    }
}

fn volume_layout(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        _ => Err(Error::invalid_shape(
            "mvol",
            format!("expected [channels, X, Y, Z], got {shape:?}"),
        )),
    }
}

// memory: ((c*X + x)*Y + y)*Z + z    file: ((c*Z + z)*Y + y)*X + x
fn reorder_to_file<E: Copy>(mem: &[E], file: &mut [E], channels: usize, [nx, ny, nz]: [usize; 3]) {
    for c in 0..channels {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    file[((c * nz + z) * ny + y) * nx + x] = mem[((c * nx + x) * ny + y) * nz + z];
                }
            }
        }
    }
}

fn reorder_from_file<E: Copy>(file: &[E], mem: &mut [E], channels: usize, [nx, ny, nz]: [usize; 3]) {
    for c in 0..channels {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    mem[((c * nx + x) * ny + y) * nz + z] = file[((c * nz + z) * ny + y) * nx + x];
                }
            }
        }
    }
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(MvolFile::decode(&bytes)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_mvol(path: impl AsRef<Path>, file: &MvolFile) -> Result<()> {
    write_atomic(path.as_ref(), &file.encode())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_mvol(path)?.to_tensor()
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_mvol(path, &MvolFile::from_tensor(t)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_mvol(path)?.to_labels()
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelVolume) -> Result<()> {
    write_mvol(path, &MvolFile::from_labels(l))
}
