//! Dense NCHW tensors and the scale-change primitives shared by the kernels.

use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

use num_traits::Float;

use crate::error::{dim_err, Error, Result};
use crate::maps::SemanticMap;

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Display + LowerExp + FromStr + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Rank-4 tensor in batch, channel, height, width order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return dim_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, i, j)` at every position.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data.push(f(b, ch, i, j));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + i) * w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, value: T) {
        let o = self.offset(n, c, i, j);
        self.data[o] = value;
    }

    /// One `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return dim_err(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub(crate) fn check_spatial(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height() != height || self.width() != width {
            return dim_err(format!(
                "{what}: tensor is {}x{}, map is {height}x{width}",
                self.height(),
                self.width()
            ));
        }
        Ok(())
    }
}

/// Replicates every pixel into a `factor x factor` block.
pub fn nearest_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return dim_err("upsampling factor must be positive");
    }
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for i in 0..oh {
                let row = &src[(i / factor) * w..(i / factor + 1) * w];
                for j in 0..ow {
                    out.push(row[j / factor]);
                }
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Expands a semantic map into a `(1, num_classes, h, w)` indicator tensor.
pub fn one_hot<T: Scalar>(s: &SemanticMap, num_classes: usize) -> Result<Tensor<T>> {
    let (h, w) = s.dims();
    let mut out = Tensor::zeros([1, num_classes, h, w]);
    for (idx, &class) in s.classes().iter().enumerate() {
        let class = class as usize;
        if class >= num_classes {
            return Err(Error::Domain(format!(
                "class index {class} at pixel ({}, {}) is not below {num_classes}",
                idx / w,
                idx % w
            )));
        }
        out.data_mut()[class * h * w + idx] = T::one();
    }
    Ok(out)
}

#[inline]
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let slope = T::from_f64(slope);
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}
