//! Dense tensor engine: value types, raw-file persistence, compute kernels,
//! the differentiation tape, the optimizer, and the finite-difference checker.

pub mod adamw;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod loss_kernels;
pub mod tape;

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SfimError};

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// Feature maps are channels x height x width; a leading batch extent is
/// allowed where an op documents it. Values must stay finite: ops validate
/// their outputs and fail with the offending context named.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Default for Tensor {
    /// Empty placeholder (shape [0]); used to reclaim buffers no longer read.
    fn default() -> Self {
        Tensor { shape: vec![0], data: Vec::new() }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SfimError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (rank-0 or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(SfimError::shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )))
        }
    }

    /// Extents interpreted as (channels, height, width).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(SfimError::shape(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SfimError::non_finite(context))
        }
    }

    /// Serialize in the raw tensor format (dtype tag 1, 64-bit payload).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with_dtype(path, Dtype::F64)
    }

    pub fn save_with_dtype(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.write_sftn(&mut file, dtype)?;
        Ok(())
    }

    pub fn write_sftn(&self, w: &mut impl Write, dtype: Dtype) -> Result<()> {
        w.write_all(SFTN_MAGIC)?;
        w.write_all(&SFTN_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        w.write_all(&(dtype as u32).to_le_bytes())?;
        match dtype {
            Dtype::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path)?;
        Tensor::read_sftn(&mut file).map_err(|e| match e {
            SfimError::Format { reason, .. } => SfimError::format(path.display().to_string(), reason),
            other => other,
        })
    }

    pub fn read_sftn(r: &mut impl Read) -> Result<Self> {
        let fmt = |reason: &str| SfimError::format("<stream>", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SFTN_MAGIC {
            return Err(fmt("bad magic, not a raw tensor file"));
        }
        let version = read_u32(r)?;
        if version != SFTN_VERSION {
            return Err(fmt(&format!(
                "unsupported version {version}, expected {SFTN_VERSION}"
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(fmt(&format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = read_u32(r)? as usize;
            numel = numel.checked_mul(e).ok_or_else(|| fmt("extent overflow"))?;
            shape.push(e);
        }
        let dtype = read_u32(r)?;
        let mut data = Vec::with_capacity(numel);
        match dtype {
            0 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            1 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            other => return Err(fmt(&format!("unknown dtype tag {other}"))),
        }
        Tensor::new(shape, data)
    }
}

/// Storage precision for the raw tensor file; in-memory math is always f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

const SFTN_MAGIC: &[u8; 4] = b"SFTN";
const SFTN_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Complex values as separate real/imaginary planes sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; numel],
            im: vec![0.0; numel],
        }
    }

    pub fn from_real(t: &Tensor) -> Self {
        ComplexTensor {
            shape: t.shape().to_vec(),
            re: t.data().to_vec(),
            im: vec![0.0; t.numel()],
        }
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    /// Bin magnitudes |z|.
    pub fn amplitude(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect()
    }

    /// Bin phases atan2(im, re).
    pub fn phase(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| b.atan2(a))
            .collect()
    }
}
