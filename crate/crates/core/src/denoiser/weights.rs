//! Flat binary weight files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes   b"SOWW"
//! version      u32       1
//! n_ints       u32       then n_ints x u32 integer header fields
//! n_scalars    u32       then n_scalars x f64 scalar header fields
//! n_tensors    u32       then, per tensor (the layer table):
//!     name_len u32, name (utf-8, name_len bytes), ndim u32, ndim x u32 dims
//! data                   every tensor's values as f32, row-major, in table order
//! ```

use std::io::{Read, Write};

use crate::error::{Result, SowError};

pub const WEIGHT_MAGIC: &[u8; 4] = b"SOWW";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    pub ints: Vec<u32>,
    pub scalars: Vec<f64>,
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| SowError::invalid(format!("weight file has no tensor `{name}`")))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHT_MAGIC)?;
        write_u32(&mut out, WEIGHT_VERSION)?;
        write_u32(&mut out, self.ints.len() as u32)?;
        for &v in &self.ints {
            write_u32(&mut out, v)?;
        }
        write_u32(&mut out, self.scalars.len() as u32)?;
        for &v in &self.scalars {
            out.write_all(&v.to_le_bytes())?;
        }
        write_u32(&mut out, self.tensors.len() as u32)?;
        for t in &self.tensors {
            let expected: usize = t.dims.iter().product();
            if expected != t.values.len() {
                return Err(SowError::invalid(format!(
                    "tensor `{}` has {} values for dims {:?}",
                    t.name,
                    t.values.len(),
                    t.dims
                )));
            }
            write_u32(&mut out, t.name.len() as u32)?;
            out.write_all(t.name.as_bytes())?;
            write_u32(&mut out, t.dims.len() as u32)?;
            for &d in &t.dims {
                write_u32(&mut out, d as u32)?;
            }
        }
        for t in &self.tensors {
            for v in &t.values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(SowError::invalid("not a weight file (bad magic)"));
        }
        let version = read_u32(&mut input)?;
        if version != WEIGHT_VERSION {
            return Err(SowError::invalid(format!("unsupported weight file version {version}")));
        }
        let n_ints = read_u32(&mut input)? as usize;
        let ints = (0..n_ints)
            .map(|_| read_u32(&mut input))
            .collect::<Result<Vec<_>>>()?;
        let n_scalars = read_u32(&mut input)? as usize;
        let mut scalars = Vec::with_capacity(n_scalars);
        for _ in 0..n_scalars {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            scalars.push(f64::from_le_bytes(buf));
        }
        let n_tensors = read_u32(&mut input)? as usize;
        let mut table = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let len = read_u32(&mut input)? as usize;
            if len > 4096 {
                return Err(SowError::invalid("tensor name too long"));
            }
            let mut name = vec![0u8; len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| SowError::invalid("tensor name is not utf-8"))?;
            let ndim = read_u32(&mut input)? as usize;
            if ndim > 8 {
                return Err(SowError::invalid(format!("tensor `{name}` has rank {ndim}")));
            }
            let dims = (0..ndim)
                .map(|_| read_u32(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                values.push(f32::from_le_bytes(buf));
            }
            tensors.push(Tensor { name, dims, values });
        }
        Ok(Self {
            ints,
            scalars,
            tensors,
        })
    }
}

fn write_u32<W: Write>(out: &mut W, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
