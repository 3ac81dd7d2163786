//! Dense rank-4 tensors in `(N, C, H, W)` row-major layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::{Float, FloatConst};

use crate::error::{shape_err, Error, Result};

/// Floating point element type. Models train in `f32`; the kernels are also
/// instantiated with `f64` for gradient checking.
pub trait Real: Float + FloatConst + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements of one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements of one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

impl core::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "Tensor::new",
                format!("{} elements for shape {}", data.len(), shape),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Storage size of the element buffer.
    pub fn nbytes(&self) -> usize {
        self.data.len() * core::mem::size_of::<T>()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// The `(h, w)` plane of item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "Tensor::zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: Shape4, op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(
                op,
                format!("expected {}, got {}", shape, self.shape),
            ));
        }
        Ok(())
    }

    /// Copy of batch item `n` as a batch of one.
    pub fn item(&self, n: usize) -> Self {
        let len = self.shape.item();
        Self {
            shape: self.shape.with_n(1),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn item_data(&self, n: usize) -> &[T] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    /// Concatenates batch items along `N`. All items must share `(C, H, W)`.
    pub fn stack<'a>(items: impl IntoIterator<Item = &'a [T]>, item_shape: Shape4) -> Result<Self> {
        let per = item_shape.item();
        let mut data = Vec::new();
        let mut n = 0;
        for it in items {
            if it.len() != per {
                return Err(shape_err(
                    "Tensor::stack",
                    format!("item of {} elements, expected {}", it.len(), per),
                ));
            }
            data.extend_from_slice(it);
            n += 1;
        }
        Ok(Self {
            shape: item_shape.with_n(n),
            data,
        })
    }

    /// Appends `extra` channels whose planes are filled with one constant per
    /// `(item, extra channel)` taken from `values[n * extra + k]`.
    pub fn concat_constant_channels(&self, extra: usize, values: &[T]) -> Result<Self> {
        let s = self.shape;
        if values.len() != s.n * extra {
            return Err(shape_err(
                "Tensor::concat_constant_channels",
                format!(
                    "{} values for {} items x {} channels",
                    values.len(),
                    s.n,
                    extra
                ),
            ));
        }
        let out_shape = Shape4::new(s.n, s.c + extra, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            data.extend_from_slice(self.item_data(n));
            for k in 0..extra {
                data.extend(core::iter::repeat(values[n * extra + k]).take(s.plane()));
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "Tensor::add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape, "Tensor::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(shape_err(
                "Tensor::reshape",
                format!("cannot view {} elements as {}", self.data.len(), shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }
}
