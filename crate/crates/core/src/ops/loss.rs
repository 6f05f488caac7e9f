//! The two terms of the joint loss. Loss values are accumulated in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Two-class softmax cross-entropy averaged over every pixel of every item.
///
/// `labels` holds one class index per pixel in (n, h, w) order. Returns the
/// loss and its gradient `(softmax - onehot) / pixel_count`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[u8]) -> Result<(f64, Tensor4<T>)> {
    let s = logits.shape();
    let classes = s.c;
    if classes < 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s} need at least 2 class channels"),
        ));
    }
    let pixels = s.n * s.plane();
    if labels.len() != pixels {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for logits {s} ({pixels} pixels)", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            index,
            classes,
        });
    }
    let mut grad = Tensor4::zeros(s);
    let inv = 1.0 / pixels as f64;
    let mut total = 0.0f64;
    let plane = s.plane();
    let mut probs = vec![0.0f64; classes];
    for n in 0..s.n {
        for p in 0..plane {
            let label = labels[n * plane + p] as usize;
            let mut max = f64::NEG_INFINITY;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = logits.plane(n, c)[p].as_f64();
                max = max.max(*pr);
            }
            let mut z = 0.0;
            for pr in probs.iter_mut() {
                *pr = (*pr - max).exp();
                z += *pr;
            }
            total += z.ln() + max - logits.plane(n, label)[p].as_f64();
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad.plane_mut(n, c)[p] = T::from_f64_lossy((pr / z - onehot) * inv);
            }
        }
    }
    Ok((total * inv, grad))
}

/// Mean squared error over all pixels; gradient `2 (pred - target) / count`.
pub fn mse_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let count = pred.len().max(1) as f64;
    let mut grad = Tensor4::zeros(pred.shape());
    let mut total = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        total += d * d;
        *g = T::from_f64_lossy(2.0 * d / count);
    }
    Ok((total / count, grad))
}
