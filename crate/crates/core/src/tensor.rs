//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense N-dimensional array of `f64` values in row-major order.
///
/// Feature maps use the `[N, C, H, W]` layout throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} values but {} were supplied",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
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
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Returns the `[N, C, H, W]` dimensions of a 4-D tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!(
                    "expected a 4-D [N,C,H,W] tensor, got shape {:?}",
                    self.shape
                ),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies sample `n` of a batched tensor (leading dimension).
    pub fn sample(&self, n: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along a new or existing leading axis.
    ///
    /// Each part must have leading dimension 1; the result has leading dimension `parts.len()`.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut shape = first.shape.clone();
        if shape.first() != Some(&1) {
            return Err(Error::shape("stack", "parts must have leading dimension 1"));
        }
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        shape[0] = parts.len();
        Ok(Tensor { shape, data })
    }
}

/// Geometry of a 2-D convolution (`kernel_h x kernel_w / stride / padding`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// `3x3/1/1`, the filter used everywhere outside the attention refinement branch.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            in_channels,
            out_channels,
        }
    }

    /// `3x3/1/0`, which shrinks each spatial side by two.
    pub fn valid3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            padding: 0,
            ..Self::same3(in_channels, out_channels)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output spatial size `floor((in + 2p - k)/s) + 1`.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "convolution channel counts must be positive".into(),
            ));
        }
        let out = |input: usize, k: usize, dim: &str| -> Result<usize> {
            let padded = input + 2 * self.padding;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("{dim}: padded input {padded} smaller than kernel {k}"),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            out(in_h, self.kernel_h, "height")?,
            out(in_w, self.kernel_w, "width")?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.get(&[1, 0]), 2.0);
    }

    #[test]
    fn conv_output_size() {
        let s = ConvSpec::same3(1, 1);
        assert_eq!(s.output_size(44, 44).unwrap(), (44, 44));
        assert_eq!(
            ConvSpec::valid3(1, 1).output_size(52, 52).unwrap(),
            (50, 50)
        );
        assert!(ConvSpec::valid3(1, 1).output_size(2, 2).is_err());
    }
}
