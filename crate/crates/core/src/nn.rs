//! Layers that cache their forward activations for a later backward pass.
//!
//! A network here is a fixed sequence of layers, so each layer keeps exactly
//! one cache slot: `forward` in train mode fills it, `backward` consumes it.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormState, ConvSpec, Mode};
use crate::tensor::{Real, Tensor4};

/// Kind of tensor handed to a visitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Learned, receives gradients.
    Param,
    /// Running statistic, no gradient.
    Buffer,
}

pub type Visitor<'a, T> = dyn FnMut(&str, &mut Tensor4<T>, Slot) + 'a;
pub type RefVisitor<'a, T> = dyn FnMut(&str, &Tensor4<T>, Slot) + 'a;

fn missing_cache(layer: &str) -> Error {
    Error::invalid(format!(
        "{layer}: backward called without a preceding train-mode forward"
    ))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub spec: ConvSpec<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(spec: ConvSpec<T>) -> Self {
        Self { spec, input: None }
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = ops::conv2d(&x, &self.spec)?;
        if mode == Mode::Train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d(x, &self.spec)
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = ops::conv2d_backward(&x, &self.spec, upstream)?;
        self.spec.kernel.accumulate_grad(g.kernel.data());
        self.spec.bias.accumulate_grad(g.bias.data());
        Ok(g.input)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.spec.kernel, Slot::Param);
        f(&format!("{prefix}.bias"), &mut self.spec.bias, Slot::Param);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut RefVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &self.spec.kernel, Slot::Param);
        f(&format!("{prefix}.bias"), &self.spec.bias, Slot::Param);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Real> {
    pub state: BatchNormState<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            state: BatchNormState::new(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.state.mode = mode;
        match mode {
            Mode::Train => {
                let (y, cache) = ops::batchnorm_train(x, &mut self.state)?;
                self.cache = Some(cache);
                Ok(y)
            }
            Mode::Eval => ops::batchnorm_eval(x, &self.state),
        }
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::batchnorm_eval(x, &self.state)
    }

    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        let g = ops::batchnorm_backward(upstream, &cache, &self.state.gamma)?;
        self.state.gamma.accumulate_grad(g.gamma.data());
        self.state.beta.accumulate_grad(g.beta.data());
        Ok(g.input)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.state.gamma, Slot::Param);
        f(&format!("{prefix}.beta"), &mut self.state.beta, Slot::Param);
        f(
            &format!("{prefix}.running_mean"),
            &mut self.state.running_mean,
            Slot::Buffer,
        );
        f(
            &format!("{prefix}.running_var"),
            &mut self.state.running_var,
            Slot::Buffer,
        );
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut RefVisitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &self.state.gamma, Slot::Param);
        f(&format!("{prefix}.beta"), &self.state.beta, Slot::Param);
        f(&format!("{prefix}.running_mean"), &self.state.running_mean, Slot::Buffer);
        f(&format!("{prefix}.running_var"), &self.state.running_var, Slot::Buffer);
    }
}

/// Convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(spec: ConvSpec<T>) -> Self {
        let channels = spec.out_channels();
        Self {
            conv: Conv2d::new(spec),
            bn: BatchNorm2d::new(channels),
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let h = self.conv.forward(x, mode)?;
        self.bn.forward(&h, mode)
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.bn.infer(&self.conv.infer(x)?)
    }

    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.bn.backward(upstream)?;
        self.conv.backward(&g)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut RefVisitor<'_, T>) {
        self.conv.visit_ref(&format!("{prefix}.conv"), f);
        self.bn.visit_ref(&format!("{prefix}.bn"), f);
    }
}

/// Bottleneck residual block: 1x1 reduce, 3x3, 1x1 expand (each with batch
/// norm), identity skip, then ReLU.
///
/// With `stride > 1` the 3x3 convolution is strided and the skip path keeps
/// every `stride`-th pixel so both branches agree in shape.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Real> {
    pub reduce: ConvBn<T>,
    pub spatial: ConvBn<T>,
    pub expand: ConvBn<T>,
    stride: usize,
    cache: Option<BlockCache<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T: Real> {
    in_h: usize,
    in_w: usize,
    output: Tensor4<T>,
}

impl<T: Real> ResidualBlock<T> {
    /// `width` channels in and out, `bottleneck` inside.
    pub fn new(width: usize, bottleneck: usize, stride: usize, dilation: usize) -> Self {
        Self {
            reduce: ConvBn::new(ConvSpec::same(bottleneck, width, 1, 1, dilation)),
            spatial: ConvBn::new(ConvSpec::same(bottleneck, bottleneck, 3, stride, dilation)),
            expand: ConvBn::new(ConvSpec::same(width, bottleneck, 1, 1, dilation)),
            stride,
            cache: None,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    fn skip(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.stride > 1 {
            ops::subsample(x, self.stride)
        } else {
            Ok(x.clone())
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let skip = self.skip(&x)?;
        let (in_h, in_w) = (x.shape().h, x.shape().w);
        let h = self.reduce.forward(x, mode)?;
        let h = self.spatial.forward(h, mode)?;
        let h = self.expand.forward(h, mode)?;
        let y = ops::relu(&ops::add(&h, &skip)?);
        if mode == Mode::Train {
            self.cache = Some(BlockCache {
                in_h,
                in_w,
                output: y.clone(),
            });
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let h = self.reduce.infer(x)?;
        let h = self.spatial.infer(&h)?;
        let h = self.expand.infer(&h)?;
        Ok(ops::relu(&ops::add(&h, &self.skip(x)?)?))
    }

    pub fn backward(&mut self, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("residual block"))?;
        let g = ops::relu_backward(&cache.output, upstream)?;
        let (g_main, g_skip) = ops::add_backward(&g);
        let gm = self.expand.backward(&g_main)?;
        let gm = self.spatial.backward(&gm)?;
        let gm = self.reduce.backward(&gm)?;
        let gs = if self.stride > 1 {
            ops::subsample_backward(&g_skip, self.stride, cache.in_h, cache.in_w)?
        } else {
            g_skip
        };
        ops::add(&gm, &gs)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.reduce.visit(&format!("{prefix}.reduce"), f);
        self.spatial.visit(&format!("{prefix}.spatial"), f);
        self.expand.visit(&format!("{prefix}.expand"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut RefVisitor<'_, T>) {
        self.reduce.visit_ref(&format!("{prefix}.reduce"), f);
        self.spatial.visit_ref(&format!("{prefix}.spatial"), f);
        self.expand.visit_ref(&format!("{prefix}.expand"), f);
    }
}
