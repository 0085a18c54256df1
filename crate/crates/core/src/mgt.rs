//! The `MGT1` binary tensor format.
//!
//! Layout: the four magic bytes `MGT1`, a little-endian `u32` rank, `rank`
//! little-endian `u64` dimensions, then the row-major payload as
//! little-endian `f64`. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Field, Kernel, Matrix};

pub const MAGIC: &[u8; 4] = b"MGT1";
/// Upper bound on the rank accepted by the decoder.
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| format_err("dimension product overflows"))?;
        if n != data.len() {
            return Err(format_err(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an `MGT1` buffer. Rejects truncation, trailing bytes,
    /// oversized ranks, and non-finite payload values.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(format_err("bad magic, expected MGT1"));
        }
        let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        if rank > MAX_RANK {
            return Err(format_err(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| format_err("dimension exceeds address space"))?);
        }
        let n = element_count(&dims).ok_or_else(|| format_err("dimension product overflows"))?;
        let payload_len = n.checked_mul(8).ok_or_else(|| format_err("payload size overflows"))?;
        if cur.remaining() != payload_len {
            return Err(format_err(format!(
                "payload holds {} bytes, dims {dims:?} need {payload_len}",
                cur.remaining()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in cur.take(payload_len)?.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("MGT1 payload element {}", data.len())));
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.dims.len() == rank {
            Ok(())
        } else {
            Err(format_err(format!("{what} needs rank {rank}, file has rank {}", self.dims.len())))
        }
    }

    pub fn into_field(self) -> Result<Field> {
        self.expect_rank(3, "field")?;
        Field::new(self.dims[0], self.dims[1], self.dims[2], self.data)
    }

    pub fn into_kernel(self) -> Result<Kernel> {
        self.expect_rank(4, "kernel")?;
        Kernel::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.data)
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        self.expect_rank(2, "matrix")?;
        Matrix::new(self.dims[0], self.dims[1], self.data)
    }

    pub fn into_vector(self) -> Result<Vec<f64>> {
        self.expect_rank(1, "vector")?;
        Ok(self.data)
    }

    /// Splits a rank-4 `N × C × H × W` stack into its `N` fields.
    pub fn into_fields(self) -> Result<Vec<Field>> {
        self.expect_rank(4, "field stack")?;
        let (n, c, h, w) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        let per = c * h * w;
        (0..n).map(|i| Field::new(c, h, w, self.data[i * per..(i + 1) * per].to_vec())).collect()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("unexpected end of MGT1 data"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl From<&Field> for Tensor {
    fn from(f: &Field) -> Self {
        let (c, h, w) = f.dims();
        Tensor { dims: vec![c, h, w], data: f.data().to_vec() }
    }
}

impl From<&Kernel> for Tensor {
    fn from(k: &Kernel) -> Self {
        let (o, i, kh, kw) = k.dims();
        Tensor { dims: vec![o, i, kh, kw], data: k.weights().to_vec() }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor { dims: vec![m.rows(), m.cols()], data: m.data().to_vec() }
    }
}

impl From<&[f64]> for Tensor {
    fn from(v: &[f64]) -> Self {
        Tensor { dims: vec![v.len()], data: v.to_vec() }
    }
}

/// Stacks equally shaped fields into one `N × C × H × W` tensor.
pub fn stack_fields(fields: &[Field]) -> Result<Tensor> {
    let first = fields.first().ok_or_else(|| crate::error::invalid("cannot stack zero fields"))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(fields.len() * c * h * w);
    for f in fields {
        if f.dims() != (c, h, w) {
            return Err(crate::error::shape("stacked fields differ in shape"));
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor { dims: vec![fields.len(), c, h, w], data })
}
