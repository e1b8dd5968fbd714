//! Dense row-major n-dimensional arrays.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense array with a fixed shape and contiguous row-major storage.
///
/// Image-like tensors use batch, channel, height, width axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Splits a rank-4 shape into `(batch, channels, height, width)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim(op, format!("expected rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: S) {
        let (cs, hs, ws) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cs + c) * hs + y) * ws + x] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Converts every element to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::lit(v.as_f64())).collect() }
    }

    /// Channel slice `[:, c, :, :]` of a rank-4 tensor, keeping the channel axis.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (b, cs, h, w) = self.dims4("channel")?;
        if c >= cs {
            return Err(Error::dim("channel", format!("channel {c} of {cs}")));
        }
        let mut out = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            let start = (bi * cs + c) * h * w;
            out.extend_from_slice(&self.data[start..start + h * w]);
        }
        Tensor::new(vec![b, 1, h, w], out)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (b, _, h, w) = first.dims4("concat")?;
        let mut total_c = 0;
        for (i, p) in parts.iter().enumerate() {
            let (pb, pc, ph, pw) = p.dims4("concat")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::dim(
                    "concat",
                    format!("part {i} has shape {:?}, expected [{b}, _, {h}, {w}]", p.shape),
                ));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(b * total_c * h * w);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let start = bi * pc * h * w;
                data.extend_from_slice(&p.data[start..start + pc * h * w]);
            }
        }
        Tensor::new(vec![b, total_c, h, w], data)
    }

    /// Splits a rank-4 tensor along channels into consecutive groups of the
    /// given widths (inverse of [`Tensor::concat_channels`]).
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        let (b, c, h, w) = self.dims4("split")?;
        if widths.iter().sum::<usize>() != c {
            return Err(Error::dim("split", format!("widths {widths:?} do not sum to {c}")));
        }
        let mut parts: Vec<Vec<S>> = widths.iter().map(|&pc| Vec::with_capacity(b * pc * h * w)).collect();
        for bi in 0..b {
            let mut offset = bi * c * h * w;
            for (part, &pc) in parts.iter_mut().zip(widths) {
                part.extend_from_slice(&self.data[offset..offset + pc * h * w]);
                offset += pc * h * w;
            }
        }
        parts.into_iter().zip(widths).map(|(d, &pc)| Tensor::new(vec![b, pc, h, w], d)).collect()
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.expect_same_shape(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Leading-axis slice `self[i]`, dropping that axis.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::dim("index_outer", format!("index {i} into {:?}", self.shape)));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Merges tensors of shape `[1, ...]` (or `[b_i, ...]`) along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("batch concat of zero tensors"))?;
        let mut b = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::dim("concat_batch", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Tensor::new(shape, data)
    }
}
