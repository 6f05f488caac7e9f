//! Spatial resampling: bilinear resize, non-overlapping mean pooling and
//! strided subsampling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Interpolation taps along one axis: `(lo, hi, weight_of_hi)` per output
/// index, using half-pixel centres with edge clamping.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn check_resize(input: Shape4, new_h: usize, new_w: usize) -> Result<()> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid(format!(
            "bilinear resize target {new_h}x{new_w} must be at least 1x1"
        )));
    }
    if input.h == 0 || input.w == 0 {
        return Err(Error::invalid(format!("cannot resize empty input {input}")));
    }
    Ok(())
}

/// Bilinear resize with the align-corners-false convention:
/// source coordinate = (dst + 0.5) * (src / dst) - 0.5, clamped to the edge.
pub fn bilinear_resize<T: Real>(input: &Tensor4<T>, new_h: usize, new_w: usize) -> Result<Tensor4<T>> {
    let s = input.shape();
    check_resize(s, new_h, new_w)?;
    let ty = axis_taps(s.h, new_h);
    let tx = axis_taps(s.w, new_w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, new_h, new_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = src[y0 * s.w + x0] * (T::one() - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (T::one() - fx) + src[y1 * s.w + x1] * fx;
                    dst[oy * new_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`] from an `in_h x in_w` source.
pub fn bilinear_resize_backward<T: Real>(
    upstream: &Tensor4<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor4<T>> {
    let s = upstream.shape();
    check_resize(Shape4::new(s.n, s.c, in_h, in_w), s.h, s.w)?;
    let ty = axis_taps(in_h, s.h);
    let tx = axis_taps(in_w, s.w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = upstream.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let v = g[oy * s.w + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * in_w + x0] += top * (T::one() - fx);
                    dst[y0 * in_w + x1] += top * fx;
                    dst[y1 * in_w + x0] += bot * (T::one() - fx);
                    dst[y1 * in_w + x1] += bot * fx;
                }
            }
        }
    }
    Ok(out)
}

fn check_pool(s: Shape4, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("pooling window must be positive"));
    }
    if !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
        return Err(Error::shape(
            "mean_pool",
            format!("spatial size {}x{} not divisible by window {k}", s.h, s.w),
        ));
    }
    Ok(())
}

/// Means over non-overlapping `k x k` windows.
pub fn mean_pool<T: Real>(input: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let s = input.shape();
    check_pool(s, k)?;
    let (oh, ow) = (s.h / k, s.w / k);
    let area = T::from_usize(k * k).expect("window area fits");
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
                for (x, &v) in row.iter().enumerate() {
                    drow[x / k] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v = *v / area);
        }
    }
    Ok(out)
}

pub fn mean_pool_backward<T: Real>(upstream: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    if k == 0 {
        return Err(Error::invalid("pooling window must be positive"));
    }
    let s = upstream.shape();
    let area = T::from_usize(k * k).expect("window area fits");
    let (h, w) = (s.h * k, s.w * k);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = upstream.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = g[(y / k) * s.w + x / k] / area;
                }
            }
        }
    }
    Ok(out)
}

/// Keeps every `stride`-th row and column starting at 0; output size is
/// `ceil(h / stride) x ceil(w / stride)`, matching a padded 3x3 stride-s conv.
pub fn subsample<T: Real>(input: &Tensor4<T>, stride: usize) -> Result<Tensor4<T>> {
    if stride == 0 {
        return Err(Error::invalid("subsample stride must be positive"));
    }
    let s = input.shape();
    let (oh, ow) = (s.h.div_ceil(stride), s.w.div_ceil(stride));
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[y * stride * s.w + x * stride];
                }
            }
        }
    }
    Ok(out)
}

pub fn subsample_backward<T: Real>(
    upstream: &Tensor4<T>,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor4<T>> {
    let s = upstream.shape();
    if stride == 0 || in_h.div_ceil(stride) != s.h || in_w.div_ceil(stride) != s.w {
        return Err(Error::shape(
            "subsample_backward",
            format!("upstream {s} does not match {in_h}x{in_w} at stride {stride}"),
        ));
    }
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let g = upstream.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    dst[y * stride * in_w + x * stride] = g[y * s.w + x];
                }
            }
        }
    }
    Ok(out)
}
