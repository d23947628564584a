//! Dense row-major `f32` tensors and the handful of operations the network
//! code needs on top of raw slices.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const DUMP_MAGIC: &[u8; 4] = b"TBCT";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Max,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} elements but data has {}", expected, data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from data produced by internal kernels. Values are
    /// not screened: a NaN reaching here is reported by the trainer.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_>) -> Result<Tensor> {
        let f = |a: f32, b: f32| match op {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Max => a.max(b),
        };
        let data: Vec<f32> = match rhs {
            Operand::Tensor(b) => {
                if b.shape != self.shape {
                    return Err(Error::ShapeMismatch {
                        expected: self.shape.clone(),
                        actual: b.shape.clone(),
                    });
                }
                self.data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            }
            Operand::Scalar(s) => self.data.iter().map(|&x| f(x, s)).collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("elementwise {op:?}")));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(rhs))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(rhs))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(rhs))
    }

    pub fn max(&self, rhs: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Max, Operand::Tensor(rhs))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::OutOfRange(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.clamp(lo, hi)).collect(),
        })
    }

    /// In-place `self += rhs`, used for gradient accumulation.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Mean and population standard deviation, accumulated in `f64`.
    pub fn stats(&self) -> Result<Stats> {
        stats_of(&self.data)
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::format("TBCT", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != DUMP_VERSION {
            return Err(Error::format(
                "TBCT",
                format!("unsupported version {version}"),
            ));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive and rank at least 1".into(),
        });
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn stats_of(values: &[f32]) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::Empty("stats of an empty tensor"));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        // exact for constant input; a summed mean can round away from `first`
        return Ok(Stats {
            mean: first as f64,
            std: 0.0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(Stats {
        mean,
        std: var.sqrt(),
    })
}

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. The step actually taken is measured after rounding to `f32`, so
/// the quotient uses the true perturbation rather than the nominal `eps`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::OutOfRange(format!("finite difference step {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0f32; x.len()];
    for i in 0..x.len() {
        let orig = x.data[i];
        let up = orig + eps;
        let down = orig - eps;
        probe.data[i] = up;
        let f_up = f(&probe);
        probe.data[i] = down;
        let f_down = f(&probe);
        probe.data[i] = orig;
        if !f_up.is_finite() || !f_down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} during finite differencing"
            )));
        }
        grad[i] = ((f_up - f_down) / (up as f64 - down as f64)) as f32;
    }
    Tensor::new(x.shape.clone(), grad)
}

/// `||a - b|| / max(||a||, ||b||, floor)`, the norm-wise relative error used
/// by every gradient check in the crate.
pub fn relative_error(a: &[f32], b: &[f32], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
