//! SIV1 checkpoint container: the on-disk format for models, noise maps,
//! sift plans, and raw tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  0x53 0x49 0x56 0x31 ("SIV1")
//! version u32      1
//! count   u32      number of arrays
//! per array:
//!   name_len u16, name UTF-8, dtype u8 (0 = f32), rank u8,
//!   dims rank x u32, payload numel x f32 (little-endian bits)
//! ```
//!
//! Scalars are stored as rank-0 arrays. Round trips are bit-exact: payloads
//! are written and read as raw f32 bit patterns.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = [0x53, 0x49, 0x56, 0x31];
pub const VERSION: u32 = 1;

/// Ordered collection of named f32 arrays.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f32) {
        self.push(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetch a required array, erroring with its name if absent.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::InvalidArg {
            op: "checkpoint",
            msg: format!("missing array '{name}'"),
        })
    }

    pub fn require_scalar(&self, name: &str) -> Result<f32> {
        self.require(name)?.scalar_value()
    }

    pub fn arrays(&self) -> &[(String, Tensor)] {
        &self.arrays
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, tensor) in &self.arrays {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(0u8); // dtype f32
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take::<4>("magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(cur.take::<4>("version")?);
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version });
        }
        let count = u32::from_le_bytes(cur.take::<4>("array count")?) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take::<2>("name length")?) as usize;
            let name_bytes = cur.take_slice(name_len, "array name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::InvalidArg {
                    op: "checkpoint",
                    msg: "array name is not UTF-8".into(),
                })?
                .to_string();
            let dtype = cur.take::<1>("dtype")?[0];
            if dtype != 0 {
                return Err(Error::InvalidArg {
                    op: "checkpoint",
                    msg: format!("unsupported dtype {dtype}"),
                });
            }
            let rank = cur.take::<1>("rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take::<4>("dimension")?) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = cur.take_slice(numel * 4, "array payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            // from_raw keeps the exact bits; NaN-checking here would reject
            // legitimately saved payloads that were valid when written.
            arrays.push((name, Tensor::from_raw(shape, data)));
        }
        Ok(Checkpoint { arrays })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, context: &'static str) -> Result<[u8; N]> {
        let slice = self.take_slice(N, context)?;
        let mut out = [0u8; N];
        out.copy_from_slice(slice);
        Ok(out)
    }

    fn take_slice(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { context });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
