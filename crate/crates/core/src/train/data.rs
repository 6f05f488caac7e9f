//! Scenes on disk, input standardization, scene splits and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gt::DensitySemanticTarget;
use crate::model::BatchTarget;
use crate::raster::RasterGrid;
use crate::sensor::SyntheticScene;
use crate::tensor::{Shape4, Tensor4};

/// An image with its training target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: RasterGrid,
    pub target: DensitySemanticTarget,
}

impl From<SyntheticScene> for LabeledScene {
    fn from(s: SyntheticScene) -> Self {
        Self {
            image: s.image,
            target: s.target,
        }
    }
}

impl LabeledScene {
    pub fn new(image: RasterGrid, target: DensitySemanticTarget) -> Result<Self> {
        if (image.h, image.w) != (target.density.h, target.density.w) {
            return Err(Error::shape(
                "labeled scene",
                format!(
                    "image {}x{} vs target {}x{}",
                    image.h, image.w, target.density.h, target.density.w
                ),
            ));
        }
        Ok(Self { image, target })
    }

    /// Reads `<stem>.spdr` plus the target pair written next to it.
    pub fn load(dir: impl AsRef<Path>, stem: &str, k: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let image = RasterGrid::load(dir.join(format!("{stem}.spdr")))?;
        let target = DensitySemanticTarget::load(dir, stem, k)?;
        Self::new(image, target)
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.image.save(dir.join(format!("{stem}.spdr")))?;
        self.target.save(dir, stem, self.image.gsd_m)
    }
}

/// Stems of every scene in `dir` (an image with both target files), sorted.
pub fn scene_stems(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path: PathBuf = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".spdr") else {
            continue;
        };
        if stem.contains('.') {
            continue;
        }
        if dir.join(format!("{stem}.density.spdr")).exists() && dir.join(format!("{stem}.mask.spdr")).exists() {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads every scene in `dir`.
pub fn load_scenes(dir: impl AsRef<Path>, k: usize) -> Result<Vec<LabeledScene>> {
    let dir = dir.as_ref();
    let stems = scene_stems(dir)?;
    if stems.is_empty() {
        return Err(Error::invalid(format!("no scenes found in {}", dir.display())));
    }
    stems.iter().map(|s| LabeledScene::load(dir, s, k)).collect()
}

/// Per-channel affine standardization fitted on training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub bands: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Zero mean, unit variance per band over all pixels of all images.
    /// Constant bands get a unit scale.
    pub fn fit(images: &[&RasterGrid]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalization on zero images"))?;
        let bands: Vec<String> = first.band_names().iter().map(|s| s.to_string()).collect();
        let mut mean = Vec::with_capacity(bands.len());
        let mut std = Vec::with_capacity(bands.len());
        for (b, name) in bands.iter().enumerate() {
            let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
            for img in images {
                if img.band_names() != first.band_names() {
                    return Err(Error::invalid("training images have different band lists"));
                }
                for &v in &img.bands[b].data {
                    let v = v as f64;
                    n += 1;
                    sum += v;
                    sq += v * v;
                }
            }
            if n == 0 {
                return Err(Error::invalid(format!("band {name} has no pixels")));
            }
            let m = sum / n as f64;
            let var = (sq / n as f64 - m * m).max(0.0);
            mean.push(m);
            std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
        }
        Ok(Self { bands, mean, std })
    }

    /// Standardized `(1, bands, h, w)` tensor; the image must carry the
    /// fitted bands (extra bands are ignored, order follows the fit).
    pub fn apply(&self, image: &RasterGrid) -> Result<Tensor4<f32>> {
        let names: Vec<&str> = self.bands.iter().map(String::as_str).collect();
        let selected = image.select(&names).map_err(|_| {
            Error::invalid(format!(
                "image bands {:?} do not cover the model bands {:?}",
                image.band_names(),
                names
            ))
        })?;
        let mut t = selected.to_tensor();
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            for v in t.plane_mut(0, c) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(t)
    }
}

/// Scene indices of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `n` scene indices with `seed` and cuts them into train,
/// validation and test; validation and test each get `eval_fraction` of
/// the scenes (rounded), training keeps at least one.
pub fn split_scenes(n: usize, eval_fraction: f64, seed: u64) -> Result<SceneSplit> {
    if n == 0 {
        return Err(Error::invalid("cannot split zero scenes"));
    }
    if !(0.0..0.5).contains(&eval_fraction) {
        return Err(Error::invalid(format!(
            "eval split fraction must lie in [0, 0.5), got {eval_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = (eval_fraction * n as f64).round() as usize;
    while n - 2 * held < 1 && held > 0 {
        held -= 1;
    }
    let test = idx[..held].to_vec();
    let val = idx[held..2 * held].to_vec();
    let train = idx[2 * held..].to_vec();
    Ok(SceneSplit { train, val, test })
}

/// A scene converted once to model inputs and per-pixel targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub input: Tensor4<f32>,
    pub labels: Vec<u8>,
    pub density: Tensor4<f32>,
}

impl PreparedScene {
    pub fn new(scene: &LabeledScene, norm: &Normalization) -> Result<Self> {
        let input = norm.apply(&scene.image)?;
        let t: BatchTarget<f32> = BatchTarget::from_target(&scene.target)?;
        Ok(Self {
            input,
            labels: t.labels,
            density: t.density,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.input.shape().h, self.input.shape().w)
    }
}

/// Uniformly random patch corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSampler {
    pub patch: usize,
}

impl PatchSampler {
    pub fn new(patch: usize) -> Self {
        Self { patch }
    }

    /// Top-left corner of a `patch x patch` window inside an `h x w` scene.
    pub fn corner(&self, h: usize, w: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
        if h < self.patch || w < self.patch {
            return Err(Error::invalid(format!(
                "patch {} does not fit a {h}x{w} scene",
                self.patch
            )));
        }
        Ok((rng.random_range(0..=h - self.patch), rng.random_range(0..=w - self.patch)))
    }

    /// A batch of patches from scenes chosen uniformly at random.
    pub fn batch(
        &self,
        scenes: &[PreparedScene],
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<(Tensor4<f32>, BatchTarget<f32>)> {
        if scenes.is_empty() || batch_size == 0 {
            return Err(Error::invalid("batch needs at least one scene and one item"));
        }
        let p = self.patch;
        let mut inputs = Vec::with_capacity(batch_size);
        let mut densities = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size * p * p);
        for _ in 0..batch_size {
            let s = &scenes[rng.random_range(0..scenes.len())];
            let (h, w) = s.size();
            let (top, left) = self.corner(h, w, rng)?;
            inputs.push(s.input.crop(0, top, left, p, p)?);
            densities.push(s.density.crop(0, top, left, p, p)?);
            for r in top..top + p {
                labels.extend_from_slice(&s.labels[r * w + left..r * w + left + p]);
            }
        }
        let x = Tensor4::stack(&inputs)?;
        let d = Tensor4::stack(&densities)?;
        debug_assert_eq!(d.shape(), Shape4::new(batch_size, 1, p, p));
        Ok((x, BatchTarget::new(labels, d)?))
    }
}
