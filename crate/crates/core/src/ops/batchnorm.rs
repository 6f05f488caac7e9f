//! Per-channel batch normalization over (batch, row, col).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one batch-norm layer.
///
/// All four per-channel tensors have shape `(1, C, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl<T: Real> BatchNormState<T> {
    /// gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        let shape = Shape4::new(1, channels, 1, 1);
        Self {
            gamma: Tensor4::full(shape, T::one()),
            beta: Tensor4::zeros(shape),
            running_mean: Tensor4::zeros(shape),
            running_var: Tensor4::full(shape, T::one()),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    fn check(&self, input: Shape4) -> Result<()> {
        if input.c != self.channels() {
            return Err(Error::shape(
                "batchnorm",
                format!("input {input} vs {} normalized channels", self.channels()),
            ));
        }
        Ok(())
    }
}

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real> {
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Real> {
    pub input: Tensor4<T>,
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
}

/// Normalizes according to `state.mode`. Train mode also updates the
/// running statistics; use [`batchnorm_train`] to keep the backward cache.
pub fn batchnorm<T: Real>(input: &Tensor4<T>, state: &mut BatchNormState<T>) -> Result<Tensor4<T>> {
    match state.mode {
        Mode::Train => batchnorm_train(input, state).map(|(y, _)| y),
        Mode::Eval => batchnorm_eval(input, state),
    }
}

/// Eval-mode normalization with running statistics. Pure affine map.
pub fn batchnorm_eval<T: Real>(input: &Tensor4<T>, state: &BatchNormState<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    state.check(s)?;
    let eps = T::from_f64_lossy(state.epsilon);
    let mut out = input.clone();
    for c in 0..s.c {
        let scale = state.gamma.data()[c] / (state.running_var.data()[c] + eps).sqrt();
        let shift = state.beta.data()[c] - state.running_mean.data()[c] * scale;
        for n in 0..s.n {
            for v in out.plane_mut(n, c) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Train-mode normalization with batch statistics.
pub fn batchnorm_train<T: Real>(
    input: &Tensor4<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let s = input.shape();
    state.check(s)?;
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::invalid(format!(
            "train-mode batchnorm needs at least 2 values per channel, input is {s}"
        )));
    }
    let m = T::from_usize(count).expect("count fits");
    let eps = T::from_f64_lossy(state.epsilon);
    let momentum = T::from_f64_lossy(state.momentum);
    let unbias = m / (m - T::one());

    let mut normalized = Tensor4::zeros(s);
    let mut out = Tensor4::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut sum = T::zero();
        for n in 0..s.n {
            sum += input.plane(n, c).iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>();
        }
        let var = sq / m;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        let gamma = state.gamma.data()[c];
        let beta = state.beta.data()[c];
        for n in 0..s.n {
            let x = input.plane(n, c);
            let xh = normalized.plane_mut(n, c);
            for (d, &v) in xh.iter_mut().zip(x) {
                *d = (v - mean) * istd;
            }
            let xh = normalized.plane(n, c);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                *o = gamma * v + beta;
            }
        }
        let rm = &mut state.running_mean.data_mut()[c];
        *rm = (T::one() - momentum) * *rm + momentum * mean;
        let rv = &mut state.running_var.data_mut()[c];
        *rv = (T::one() - momentum) * *rv + momentum * var * unbias;
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Analytic train-mode gradients.
pub fn batchnorm_backward<T: Real>(
    upstream: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor4<T>,
) -> Result<BatchNormGrads<T>> {
    let s = upstream.shape();
    if s != cache.normalized.shape() || gamma.shape().c != s.c {
        return Err(Error::shape(
            "batchnorm_backward",
            format!(
                "upstream {s}, cached activations {}, gamma {}",
                cache.normalized.shape(),
                gamma.shape()
            ),
        ));
    }
    let m = T::from_usize(s.n * s.plane()).expect("count fits");
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = Tensor4::zeros(gamma.shape());
    let mut dbeta = Tensor4::zeros(gamma.shape());
    for c in 0..s.c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            for (&g, &xh) in upstream.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        dbeta.data_mut()[c] = sum_g;
        dgamma.data_mut()[c] = sum_gx;
        let k = gamma.data()[c] * cache.inv_std[c] / m;
        for n in 0..s.n {
            let g = upstream.plane(n, c);
            let xh = cache.normalized.plane(n, c);
            for ((d, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = k * (m * gv - sum_g - xv * sum_gx);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: Shape4) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |n, c, h, w| {
            ((n * 31 + c * 17 + h * 7 + w * 3) as f64 * 0.37).sin() * (1.0 + c as f64)
        })
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor4::<f32>::from_fn(Shape4::new(2, 2, 3, 3), |_, c, _, _| 4.0 + c as f32);
        let mut st = BatchNormState::new(2);
        st.beta.data_mut().copy_from_slice(&[0.25, -1.0]);
        let y = batchnorm(&x, &mut st).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn train_mode_standardizes() {
        let x = sample(Shape4::new(2, 3, 4, 4));
        let mut st = BatchNormState::new(3);
        let y = batchnorm(&x, &mut st).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = sample(Shape4::new(2, 1, 3, 3));
        let mut st = BatchNormState::new(1);
        batchnorm(&x, &mut st).unwrap();
        let vals = x.data();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var_u = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!((st.running_mean.data()[0] - 0.1 * mean).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * var_u)).abs() < 1e-12);
        assert!(st.running_var.data()[0] >= 0.0);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = sample(Shape4::new(1, 2, 2, 2));
        let mut st = BatchNormState::new(2);
        st.mode = Mode::Eval;
        st.running_mean.data_mut().copy_from_slice(&[1.0, -1.0]);
        st.running_var.data_mut().copy_from_slice(&[4.0, 0.25]);
        st.gamma.data_mut().copy_from_slice(&[2.0, 1.0]);
        let y = batchnorm(&x, &mut st).unwrap();
        let v = x.at(0, 1, 1, 0);
        let expected = (v + 1.0) / (0.25f64 + 1e-5).sqrt();
        assert!((y.at(0, 1, 1, 0) - expected).abs() < 1e-12);
        // running stats untouched in eval mode
        assert_eq!(st.running_mean.data(), &[1.0, -1.0]);
    }

    #[test]
    fn single_value_train_batch_rejected() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 1, 1));
        let mut st = BatchNormState::new(2);
        assert!(batchnorm(&x, &mut st).is_err());
        st.mode = Mode::Eval;
        assert!(batchnorm(&x, &mut st).is_ok());
    }

    #[test]
    fn beta_grad_is_upstream_sum_and_gamma_grad_zero_for_zero_upstream() {
        let x = sample(Shape4::new(2, 2, 3, 3));
        let mut st = BatchNormState::new(2);
        let (_, cache) = batchnorm_train(&x, &mut st).unwrap();
        let up = sample(Shape4::new(2, 2, 3, 3)).map(|v| v * 0.5 + 0.1);
        let g = batchnorm_backward(&up, &cache, &st.gamma).unwrap();
        for c in 0..2 {
            let s: f64 = (0..2).map(|n| up.plane(n, c).iter().sum::<f64>()).sum();
            assert!((g.beta.data()[c] - s).abs() < 1e-12);
        }
        let zero = Tensor4::zeros(up.shape());
        let g0 = batchnorm_backward(&zero, &cache, &st.gamma).unwrap();
        assert!(g0.gamma.data().iter().all(|&v| v == 0.0));
        assert!(g0.input.data().iter().all(|&v| v == 0.0));
    }
}
