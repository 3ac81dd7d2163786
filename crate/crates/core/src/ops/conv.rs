//! Direct-loop 2-D convolution (cross-correlation), square kernels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(C_out, C_in, K, K)`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w || s.h == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel must be square and non-empty, got {}",
                s
            )));
        }
        if s.n == 0 || s.c == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty channel count in kernel {}",
                s
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if bias.len() != s.n {
            return Err(shape_err(
                "ConvParams::new",
                format!("{} biases for {} output channels", bias.len(), s.n),
            ));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape4::new(c_out, c_in, kernel, kernel)),
            vec![T::zero(); c_out],
            stride,
            padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Spatial output extent for an `h x w` input. Uses floor division, so
    /// trailing rows/columns that do not fill a whole stride are dropped.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_hw(h, w, self.kernel(), self.stride, self.padding)
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels() {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {} channels, kernel expects {}",
                    input.c,
                    self.in_channels()
                ),
            ));
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape4::new(input.n, self.out_channels(), oh, ow))
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|&b| U::lit(b.to_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

pub fn conv_output_hw(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kernel || wp < kernel || stride == 0 {
        return Err(shape_err(
            "conv2d",
            format!(
                "{}x{} input (padding {}) too small for a {}x{} kernel",
                h, w, padding, kernel, kernel
            ),
        ));
    }
    Ok(((hp - kernel) / stride + 1, (wp - kernel) / stride + 1))
}

/// Output positions `o` whose tap `k` lands inside the input, i.e.
/// `0 <= o * stride + k - padding < extent`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, padding: usize) -> Range<usize> {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // largest o with o*stride + k - padding <= extent - 1
    let limit = extent + padding;
    let hi = if limit > k {
        ((limit - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo.min(hi)..hi
}

pub fn conv2d_forward<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    let k = p.kernel();
    let (s, pad) = (p.stride, p.padding);
    let mut out = Tensor::zeros(os);
    let w = p.weight.data();
    for n in 0..is.n {
        for co in 0..os.c {
            let plane = out.plane_mut(n, co);
            plane.iter_mut().for_each(|v| *v = p.bias[co]);
            for ci in 0..is.c {
                let src = input.plane(n, ci);
                for kh in 0..k {
                    let rows = valid_range(os.h, is.h, kh, s, pad);
                    for kw in 0..k {
                        let wv = w[((co * is.c + ci) * k + kh) * k + kw];
                        let cols = valid_range(os.w, is.w, kw, s, pad);
                        for oh in rows.clone() {
                            let ih = oh * s + kh - pad;
                            let src_row = &src[ih * is.w..(ih + 1) * is.w];
                            let dst_row = &mut plane[oh * os.w..(oh + 1) * os.w];
                            if s == 1 {
                                let off = kw as isize - pad as isize;
                                let iw0 = (cols.start as isize + off) as usize;
                                let n_cols = cols.len();
                                for (d, &x) in dst_row[cols.clone()]
                                    .iter_mut()
                                    .zip(&src_row[iw0..iw0 + n_cols])
                                {
                                    *d = *d + wv * x;
                                }
                            } else {
                                for ow in cols.clone() {
                                    let iw = ow * s + kw - pad;
                                    dst_row[ow] = dst_row[ow] + wv * src_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.ensure_finite("conv2d_forward")
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    /// `None` when the caller asked for parameter gradients only.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of `<grad_out, conv2d_forward(input, p)>` with respect to the
/// input, weight and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_impl(input, p, grad_out, true)
}

/// Weight and bias gradients only; skips the input-gradient scatter.
pub fn conv2d_param_grads<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_impl(input, p, grad_out, false)
}

fn conv2d_backward_impl<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    grad_out.expect_shape(os, "conv2d_backward")?;
    let k = p.kernel();
    let (s, pad) = (p.stride, p.padding);
    let w = p.weight.data();

    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = vec![T::zero(); os.c];
    let mut grad_in = if want_input {
        Some(Tensor::zeros(is))
    } else {
        None
    };

    for n in 0..is.n {
        for co in 0..os.c {
            let go = grad_out.plane(n, co);
            grad_b[co] = grad_b[co] + go.iter().fold(T::zero(), |a, &v| a + v);
            for ci in 0..is.c {
                let src = input.plane(n, ci);
                for kh in 0..k {
                    let rows = valid_range(os.h, is.h, kh, s, pad);
                    for kw in 0..k {
                        let cols = valid_range(os.w, is.w, kw, s, pad);
                        let widx = ((co * is.c + ci) * k + kh) * k + kw;
                        let mut acc = T::zero();
                        for oh in rows.clone() {
                            let ih = oh * s + kh - pad;
                            let src_row = &src[ih * is.w..(ih + 1) * is.w];
                            let go_row = &go[oh * os.w..(oh + 1) * os.w];
                            for ow in cols.clone() {
                                acc = acc + go_row[ow] * src_row[ow * s + kw - pad];
                            }
                        }
                        let gw = grad_w.data_mut();
                        gw[widx] = gw[widx] + acc;

                        if let Some(gi) = grad_in.as_mut() {
                            let wv = w[widx];
                            let dst = gi.plane_mut(n, ci);
                            for oh in rows.clone() {
                                let ih = oh * s + kh - pad;
                                let dst_row = &mut dst[ih * is.w..(ih + 1) * is.w];
                                let go_row = &go[oh * os.w..(oh + 1) * os.w];
                                for ow in cols.clone() {
                                    let iw = ow * s + kw - pad;
                                    dst_row[iw] = dst_row[iw] + wv * go_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if !grad_b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("conv2d_backward"));
    }
    Ok(ConvGrads {
        input: grad_in
            .map(|g| g.ensure_finite("conv2d_backward"))
            .transpose()?,
        weight: grad_w.ensure_finite("conv2d_backward")?,
        bias: grad_b,
    })
}
