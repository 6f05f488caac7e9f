//! Network architectures and the joint segmentation + density loss.
//!
//! All three architectures share a `Conv(3x3) + BN` stem, a stack of
//! bottleneck residual blocks and two 3x3 heads: a 2-channel semantic head
//! and a 1-channel density head. They differ only in block geometry:
//!
//! - `ours`: stride 1 and dilation 1 everywhere, so every feature map keeps
//!   the input resolution.
//! - `ours_atrous`: as `ours`, but every convolution of the last block is
//!   dilated by 2.
//! - `strided_baseline`: the 3x3 convolutions of blocks 2 and 4 use stride
//!   2, and a bilinear resize restores the input resolution before the heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gt::DensitySemanticTarget;
use crate::nn::{Conv2d, ConvBn, RefVisitor, ResidualBlock, Slot, Visitor};
use crate::ops::{self, ConvSpec, Mode};
use crate::tensor::{Real, Shape4, Tensor4};

pub const DEFAULT_STEM_WIDTH: usize = 256;
pub const DEFAULT_BOTTLENECK_WIDTH: usize = 64;
pub const DEFAULT_NUM_BLOCKS: usize = 6;

/// Zero-based indices of the strided blocks in `strided_baseline`.
const STRIDED_BLOCKS: [usize; 2] = [1, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ours,
    OursAtrous,
    StridedBaseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ours, ModelKind::OursAtrous, ModelKind::StridedBaseline];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ours => "ours",
            ModelKind::OursAtrous => "ours_atrous",
            ModelKind::StridedBaseline => "strided_baseline",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown architecture {s:?} (expected ours, ours_atrous or strided_baseline)"
                ))
            })
    }
}

/// Declarative description of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_channels: usize,
    pub stem_width: usize,
    pub bottleneck_width: usize,
    pub num_blocks: usize,
}

impl ModelSpec {
    /// Full-size network: 256-wide stem and blocks, 64-wide bottlenecks,
    /// 6 blocks.
    pub fn new(kind: ModelKind, input_channels: usize) -> Self {
        Self {
            kind,
            input_channels,
            stem_width: DEFAULT_STEM_WIDTH,
            bottleneck_width: DEFAULT_BOTTLENECK_WIDTH,
            num_blocks: DEFAULT_NUM_BLOCKS,
        }
    }

    pub fn with_widths(mut self, stem_width: usize, bottleneck_width: usize) -> Self {
        self.stem_width = stem_width;
        self.bottleneck_width = bottleneck_width;
        self
    }

    pub fn with_blocks(mut self, num_blocks: usize) -> Self {
        self.num_blocks = num_blocks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("model needs at least one input channel"));
        }
        if self.stem_width == 0 || self.bottleneck_width == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    /// (stride, dilation) of block `index`.
    pub fn block_geometry(&self, index: usize) -> (usize, usize) {
        match self.kind {
            ModelKind::Ours => (1, 1),
            ModelKind::OursAtrous if index + 1 == self.num_blocks => (1, 2),
            ModelKind::OursAtrous => (1, 1),
            ModelKind::StridedBaseline if STRIDED_BLOCKS.contains(&index) => (2, 1),
            ModelKind::StridedBaseline => (1, 1),
        }
    }

    /// Total downsampling factor before the decoder.
    pub fn output_stride(&self) -> usize {
        (0..self.num_blocks).map(|i| self.block_geometry(i).0).product()
    }

    /// Closed-form learned-parameter count (weights, biases, gamma, beta).
    pub fn parameter_count(&self) -> usize {
        let (c, s, b) = (self.input_channels, self.stem_width, self.bottleneck_width);
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let bn = |ch: usize| 2 * ch;
        let stem = conv(s, c, 3) + bn(s);
        let block = conv(b, s, 1) + bn(b) + conv(b, b, 3) + bn(b) + conv(s, b, 1) + bn(s);
        let heads = conv(2, s, 3) + conv(1, s, 3);
        stem + self.num_blocks * block + heads
    }
}

/// Joint loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub density: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(semantic: f64, density: f64) -> Self {
        Self {
            semantic,
            density,
            total: semantic + density,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.semantic.is_finite() && self.density.is_finite() && self.total.is_finite()
    }
}

/// Per-pixel training targets for a batch: class labels in (n, h, w) order
/// and a `(n, 1, h, w)` density tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTarget<T: Real = f32> {
    pub labels: Vec<u8>,
    pub density: Tensor4<T>,
}

impl<T: Real> BatchTarget<T> {
    pub fn new(labels: Vec<u8>, density: Tensor4<T>) -> Result<Self> {
        let s = density.shape();
        if s.c != 1 || labels.len() != s.n * s.plane() {
            return Err(Error::shape(
                "batch target",
                format!("{} labels for density {s}", labels.len()),
            ));
        }
        Ok(Self { labels, density })
    }

    /// Single-item target from a ground-truth raster pair.
    pub fn from_target(target: &DensitySemanticTarget) -> Result<Self> {
        let (h, w) = (target.density.h, target.density.w);
        let density = Tensor4::from_vec(
            Shape4::new(1, 1, h, w),
            target.density.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?;
        Self::new(target.mask.data.clone(), density)
    }
}

/// Cross-entropy on the semantic logits plus mean squared error on the raw
/// density output, with gradients for both heads.
pub fn joint_loss<T: Real>(
    semantic_logits: &Tensor4<T>,
    density: &Tensor4<T>,
    target: &BatchTarget<T>,
) -> Result<(LossBreakdown, Tensor4<T>, Tensor4<T>)> {
    let ss = semantic_logits.shape();
    let ds = density.shape();
    if (ss.n, ss.h, ss.w) != (ds.n, ds.h, ds.w) || ds.c != 1 || ss.c != 2 {
        return Err(Error::shape(
            "joint_loss",
            format!("semantic logits {ss} vs density {ds}"),
        ));
    }
    let (semantic, g_sem) = ops::softmax_cross_entropy(semantic_logits, &target.labels)?;
    let (dens, g_den) = ops::mse_loss(density, &target.density)?;
    Ok((LossBreakdown::new(semantic, dens), g_sem, g_den))
}

/// Learned network of one of the three architectures.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    stem: ConvBn<T>,
    blocks: Vec<ResidualBlock<T>>,
    semantic_head: Conv2d<T>,
    density_head: Conv2d<T>,
    /// (input h, w, feature h, w) of the last train-mode forward.
    decoder_cache: Option<(usize, usize, usize, usize)>,
}

/// Builds a full-size `f32` network from an architecture name.
pub fn build_model(kind: &str, input_channels: usize, seed: u64) -> Result<Model<f32>> {
    Model::new(ModelSpec::new(kind.parse()?, input_channels), seed)
}

impl<T: Real> Model<T> {
    /// He-normal (fan-in) convolution weights, zero head weights (so the
    /// initial classifier is uninformative), zero biases, unit gamma, zero
    /// beta; deterministic in `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let s = spec.stem_width;
        let blocks = (0..spec.num_blocks)
            .map(|i| {
                let (stride, dilation) = spec.block_geometry(i);
                ResidualBlock::new(s, spec.bottleneck_width, stride, dilation)
            })
            .collect();
        let mut model = Self {
            spec,
            stem: ConvBn::new(ConvSpec::same(s, spec.input_channels, 3, 1, 1)),
            blocks,
            semantic_head: Conv2d::new(ConvSpec::same(2, s, 3, 1, 1)),
            density_head: Conv2d::new(ConvSpec::same(1, s, 3, 1, 1)),
            decoder_cache: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.visit(&mut |name, t, slot| {
            if slot != Slot::Param || !name.ends_with(".weight") {
                return;
            }
            let k = t.shape();
            let fan_in = (k.c * k.h * k.w) as f64;
            if name.contains("_head.") {
                t.data_mut().fill(T::zero());
                return;
            }
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in t.data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        });
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.shape().c != self.spec.input_channels {
            return Err(Error::shape(
                "model forward",
                format!(
                    "image {} has {} bands, model expects {}",
                    x.shape(),
                    x.shape().c,
                    self.spec.input_channels
                ),
            ));
        }
        Ok(())
    }

    /// Runs the stem and blocks only (before any decoder resize).
    pub fn features(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for block in &self.blocks {
            h = block.infer(&h)?;
        }
        Ok(h)
    }

    /// Eval-mode forward with running statistics; does not touch any cache.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let s = x.shape();
        let mut h = self.features(x)?;
        if (h.shape().h, h.shape().w) != (s.h, s.w) {
            h = ops::bilinear_resize(&h, s.h, s.w)?;
        }
        Ok((self.semantic_head.infer(&h)?, self.density_head.infer(&h)?))
    }

    /// Forward pass returning `(semantic_logits, density)`. In train mode
    /// batch statistics are used and activations are cached for
    /// [`Model::backward`].
    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Tensor4<T>)> {
        if mode == Mode::Eval {
            return self.infer(&x);
        }
        self.check_input(&x)?;
        let s = x.shape();
        let mut h = self.stem.forward(x, mode)?;
        for block in &mut self.blocks {
            h = block.forward(h, mode)?;
        }
        let (fh, fw) = (h.shape().h, h.shape().w);
        self.decoder_cache = Some((s.h, s.w, fh, fw));
        if (fh, fw) != (s.h, s.w) {
            h = ops::bilinear_resize(&h, s.h, s.w)?;
        }
        let sem = self.semantic_head.forward(h.clone(), mode)?;
        let den = self.density_head.forward(h, mode)?;
        Ok((sem, den))
    }

    /// Output of every residual block for `x`. Runs on copies of the
    /// layers, so even in train mode the model itself is untouched.
    pub fn block_outputs(&self, x: &Tensor4<T>, mode: Mode) -> Result<Vec<Tensor4<T>>> {
        self.check_input(x)?;
        let mut stem = self.stem.clone();
        let mut h = stem.forward(x.clone(), mode)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.clone().forward(h, mode)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Accumulates parameter gradients from the two head gradients and
    /// returns the gradient with respect to the input image.
    pub fn backward(&mut self, grad_semantic: &Tensor4<T>, grad_density: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (ih, iw, fh, fw) = self
            .decoder_cache
            .take()
            .ok_or_else(|| Error::invalid("model backward without a train-mode forward"))?;
        let gs = self.semantic_head.backward(grad_semantic)?;
        let gd = self.density_head.backward(grad_density)?;
        let mut g = ops::add(&gs, &gd)?;
        if (fh, fw) != (ih, iw) {
            g = ops::bilinear_resize_backward(&g, fh, fw)?;
        }
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    /// Train-mode forward, joint loss and backward in one call.
    pub fn loss_and_backward(&mut self, x: Tensor4<T>, target: &BatchTarget<T>) -> Result<LossBreakdown> {
        let (sem, den) = self.forward(x, Mode::Train)?;
        let (loss, g_sem, g_den) = joint_loss(&sem, &den, target)?;
        if loss.is_finite() {
            self.backward(&g_sem, &g_den)?;
        } else {
            self.decoder_cache = None;
        }
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, t, _| t.zero_grad());
    }

    /// Visits every parameter and buffer in a fixed order with stable names.
    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        self.stem.visit("stem", f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("blocks.{i}"), f);
        }
        self.semantic_head.visit("semantic_head", f);
        self.density_head.visit("density_head", f);
    }

    pub fn visit_ref(&self, f: &mut RefVisitor<'_, T>) {
        self.stem.visit_ref("stem", f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit_ref(&format!("blocks.{i}"), f);
        }
        self.semantic_head.visit_ref("semantic_head", f);
        self.density_head.visit_ref("density_head", f);
    }

    /// Number of learned scalars, counted by walking the layers.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_ref(&mut |_, t, slot| {
            if slot == Slot::Param {
                n += t.len();
            }
        });
        n
    }

    pub fn blocks(&self) -> &[ResidualBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ResidualBlock<T>] {
        &mut self.blocks
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.spec, 0).expect("spec already validated");
        let mut values = Vec::new();
        self.visit_ref(&mut |_, t, _| values.push(t.cast::<U>()));
        let mut it = values.into_iter();
        out.visit(&mut |_, t, _| *t = it.next().expect("same layout"));
        out
    }
}
