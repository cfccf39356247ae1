//! Binary tensor format: magic `RPT1`, element-type byte (0 = f32, 1 = f64),
//! rank as u8, shape as little-endian u32s, then raw little-endian element
//! data in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"RPT1";

impl<T: Element> Tensor<T> {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape().len() + T::BYTES * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.shape().len() as u8);
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses one tensor from the front of `bytes`; returns it together with
    /// the number of bytes consumed. Errors carry the offset of the problem
    /// relative to the start of `bytes`.
    pub fn deserialize(bytes: &[u8]) -> Result<(Self, usize)> {
        let need = |offset: usize, n: usize| -> Result<()> {
            if bytes.len() < offset + n {
                Err(Error::Parse {
                    offset: bytes.len() as u64,
                    detail: format!("truncated tensor: need {} bytes at offset {}", n, offset),
                })
            } else {
                Ok(())
            }
        };
        need(0, 6)?;
        if &bytes[0..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad tensor magic {:?}, expected {:?}", &bytes[0..4], MAGIC),
            });
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::Parse {
            offset: 4,
            detail: format!("unknown element type code {}", bytes[4]),
        })?;
        if dtype != T::DTYPE {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("element type is {:?}, expected {:?}", dtype, T::DTYPE),
            });
        }
        let rank = bytes[5] as usize;
        need(6, 4 * rank)?;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 6 + 4 * i;
            let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
            if d == 0 {
                return Err(Error::Parse {
                    offset: off as u64,
                    detail: "zero-sized dimension".to_string(),
                });
            }
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let data_off = 6 + 4 * rank;
        need(data_off, numel * T::BYTES)?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(T::read_le(&bytes[data_off + i * T::BYTES..]));
        }
        let consumed = data_off + numel * T::BYTES;
        Ok((Tensor::from_vec(shape, data)?, consumed))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (t, used) = Tensor::deserialize(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Parse {
                offset: used as u64,
                detail: format!("{} trailing bytes after tensor", bytes.len() - used),
            });
        }
        Ok(t)
    }
}
