//! 2-D cross-correlation with stride, dilation and zero padding.
//!
//! Forward and backward both lower to GEMM through an im2col buffer; 1x1
//! stride-1 unpadded kernels skip the lowering and multiply the input
//! planes directly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Convolution weights plus geometry.
///
/// `kernel` is `(out_ch, in_ch, kh, kw)`, `bias` is `(1, out_ch, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Real = f32> {
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(
        kernel: Tensor4<T>,
        bias: Vec<T>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        let out_ch = kernel.shape().n;
        if bias.len() != out_ch {
            return Err(Error::shape(
                "conv2d",
                format!("{} bias values for {out_ch} output channels", bias.len()),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be positive"));
        }
        Ok(Self {
            kernel,
            bias: Tensor4::from_vec(Shape4::new(1, out_ch, 1, 1), bias)?,
            stride,
            dilation,
            padding,
        })
    }

    /// Zero-initialised convolution with "same" padding for odd kernels.
    pub fn same(out_ch: usize, in_ch: usize, k: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel: Tensor4::zeros(Shape4::new(out_ch, in_ch, k, k)),
            bias: Tensor4::zeros(Shape4::new(1, out_ch, 1, 1)),
            stride,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c
    }

    fn is_pointwise(&self) -> bool {
        let k = self.kernel.shape();
        k.h == 1 && k.w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output spatial size for an `h x w` input, or `None` if empty.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel.shape();
        let axis = |len: usize, taps: usize| -> Option<usize> {
            let span = self.dilation * (taps - 1) + 1;
            let padded = len + 2 * self.padding;
            if taps == 0 || padded < span {
                None
            } else {
                Some((padded - span) / self.stride + 1)
            }
        };
        Some((axis(h, k.h)?, axis(w, k.w)?))
    }

    fn check_input(&self, input: Shape4) -> Result<(usize, usize)> {
        if input.c != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {input} has {} channels, kernel {} expects {}",
                    input.c,
                    self.kernel.shape(),
                    self.in_channels()
                ),
            ));
        }
        self.output_size(input.h, input.w)
            .ok_or_else(|| Error::EmptyOutput {
                op: "conv2d",
                detail: format!(
                    "input {input}, kernel {}, stride {}, dilation {}, padding {}",
                    self.kernel.shape(),
                    self.stride,
                    self.dilation,
                    self.padding
                ),
            })
    }
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl Geometry {
    fn new<T: Real>(spec: &ConvSpec<T>, input: Shape4, ho: usize, wo: usize) -> Self {
        let k = spec.kernel.shape();
        Self {
            cin: input.c,
            h: input.h,
            w: input.w,
            kh: k.h,
            kw: k.w,
            ho,
            wo,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output-column range `[lo, hi)` whose source index `o*stride + off`
    /// lands inside `0..len`.
    fn valid_range(&self, off: isize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if off >= len as isize {
            0
        } else {
            (((len as isize - 1 - off) / s) + 1).min(out as isize)
        };
        let lo = lo.min(out as isize) as usize;
        (lo, (hi.max(lo as isize)) as usize)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize, isize)) {
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let oy = (ki * self.dilation) as isize - self.padding as isize;
                    let ox = (kj * self.dilation) as isize - self.padding as isize;
                    f(row, c, ki, oy, ox);
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        let plane = self.h * self.w;
        self.for_each_tap(|row, c, _, oy, ox| {
            let dst = &mut cols[row * p..(row + 1) * p];
            let src = &x[c * plane..(c + 1) * plane];
            let (ylo, yhi) = self.valid_range(oy, self.h, self.ho);
            let (xlo, xhi) = self.valid_range(ox, self.w, self.wo);
            for y in 0..self.ho {
                let out_row = &mut dst[y * self.wo..(y + 1) * self.wo];
                if y < ylo || y >= yhi || xlo >= xhi {
                    out_row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                let iy = (y as isize * self.stride as isize + oy) as usize;
                let src_row = &src[iy * self.w..(iy + 1) * self.w];
                out_row[..xlo].iter_mut().for_each(|v| *v = T::zero());
                out_row[xhi..].iter_mut().for_each(|v| *v = T::zero());
                if self.stride == 1 {
                    let start = (xlo as isize + ox) as usize;
                    out_row[xlo..xhi].copy_from_slice(&src_row[start..start + (xhi - xlo)]);
                } else {
                    for (xo, v) in out_row[xlo..xhi].iter_mut().enumerate() {
                        let ix = ((xo + xlo) as isize * self.stride as isize + ox) as usize;
                        *v = src_row[ix];
                    }
                }
            }
        });
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        let plane = self.h * self.w;
        self.for_each_tap(|row, c, _, oy, ox| {
            let src = &cols[row * p..(row + 1) * p];
            let dst = &mut dx[c * plane..(c + 1) * plane];
            let (ylo, yhi) = self.valid_range(oy, self.h, self.ho);
            let (xlo, xhi) = self.valid_range(ox, self.w, self.wo);
            if xlo >= xhi {
                return;
            }
            for y in ylo..yhi {
                let iy = (y as isize * self.stride as isize + oy) as usize;
                let dst_row = &mut dst[iy * self.w..(iy + 1) * self.w];
                let src_row = &src[y * self.wo..(y + 1) * self.wo];
                for xo in xlo..xhi {
                    let ix = (xo as isize * self.stride as isize + ox) as usize;
                    dst_row[ix] += src_row[xo];
                }
            }
        });
    }
}

/// Cross-correlation of `input` with `spec.kernel`, plus per-channel bias.
pub fn conv2d<T: Real>(input: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    let (ho, wo) = spec.check_input(s)?;
    let geo = Geometry::new(spec, s, ho, wo);
    let cout = spec.out_channels();
    let p = ho * wo;
    let kdim = geo.rows();
    let mut out = Tensor4::zeros(Shape4::new(s.n, cout, ho, wo));
    if s.n == 0 || p == 0 {
        return Ok(out);
    }
    let weights = spec.kernel.data();
    let bias = spec.bias.data();
    let pointwise = spec.is_pointwise();
    out.data_mut()
        .par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(n, dst)| {
            let x = input.item(n);
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
            if pointwise {
                T::gemm(false, false, cout, kdim, p, T::one(), weights, x, T::one(), dst);
            } else {
                let mut cols = vec![T::zero(); kdim * p];
                geo.im2col(x, &mut cols);
                T::gemm(false, false, cout, kdim, p, T::one(), weights, &cols, T::one(), dst);
            }
        });
    Ok(out)
}

/// Exact gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    spec: &ConvSpec<T>,
    upstream: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let (ho, wo) = spec.check_input(s)?;
    let cout = spec.out_channels();
    let expected = Shape4::new(s.n, cout, ho, wo);
    if upstream.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {} but output is {expected}", upstream.shape()),
        ));
    }
    let geo = Geometry::new(spec, s, ho, wo);
    let p = ho * wo;
    let kdim = geo.rows();
    let weights = spec.kernel.data();
    let pointwise = spec.is_pointwise();

    // Per-item partial kernel gradients, reduced in batch order so the result
    // does not depend on the thread count.
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let x = input.item(n);
            let g = upstream.item(n);
            let mut gk = vec![T::zero(); cout * kdim];
            let mut dx = vec![T::zero(); s.item()];
            if pointwise {
                T::gemm(false, true, cout, p, kdim, T::one(), g, x, T::zero(), &mut gk);
                T::gemm(true, false, kdim, cout, p, T::one(), weights, g, T::zero(), &mut dx);
            } else {
                let mut cols = vec![T::zero(); kdim * p];
                geo.im2col(x, &mut cols);
                T::gemm(false, true, cout, p, kdim, T::one(), g, &cols, T::zero(), &mut gk);
                T::gemm(true, false, kdim, cout, p, T::one(), weights, g, T::zero(), &mut cols);
                geo.col2im(&cols, &mut dx);
            }
            (gk, dx)
        })
        .collect();

    let mut grad_kernel = Tensor4::zeros(spec.kernel.shape());
    let mut grad_input = Tensor4::zeros(s);
    let item = s.item();
    for (n, (gk, dx)) in per_item.into_iter().enumerate() {
        for (acc, v) in grad_kernel.data_mut().iter_mut().zip(&gk) {
            *acc += *v;
        }
        grad_input.data_mut()[n * item..(n + 1) * item].copy_from_slice(&dx);
    }

    let mut grad_bias = Tensor4::zeros(spec.bias.shape());
    for n in 0..s.n {
        for (o, gb) in grad_bias.data_mut().iter_mut().enumerate() {
            *gb += upstream.plane(n, o).iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}
