//! Dense row-major `f64` tensors.
//!
//! Binary elementwise ops broadcast with the usual trailing-dimension rule:
//! shapes are right-aligned, and each dimension pair must be equal or
//! contain a 1 (missing leading dimensions count as 1).

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = numel(shape);
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Independent `N(0, std²)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| std * rng.normal()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Independent `U(lo, hi)` entries.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| lo + (hi - lo) * rng.uniform())
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to one operand.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Operand is a suffix of the output shape; index modulo its length.
    Suffix(usize),
    /// Fully general: the operand's flat index for every output element.
    General(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Broadcast::Same;
        }
        let trimmed = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return Broadcast::Suffix(numel(trimmed).max(1));
        }
        // Strides of the input aligned to the output, zero on broadcast dims.
        let n = out.len();
        let off = n - input.len();
        let mut strides = vec![0usize; n];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            strides[off + i] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        let total = numel(out);
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; n];
        let mut cur = 0usize;
        for _ in 0..total {
            idx.push(cur);
            for d in (0..n).rev() {
                counter[d] += 1;
                cur += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                cur -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        Broadcast::General(idx)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(idx) => idx[i],
        }
    }
}

/// Mask with each element independently 0 with probability `p_zero`, else 1.
///
/// One uniform draw per element, in row-major order, from `rng`.
pub fn bernoulli_mask(shape: &[usize], p_zero: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p_zero) {
        return Err(Error::Domain(format!(
            "bernoulli_mask: p_zero={p_zero} outside [0, 1]"
        )));
    }
    let data = (0..numel(shape))
        .map(|_| if rng.uniform() < p_zero { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(shape, data)
}
