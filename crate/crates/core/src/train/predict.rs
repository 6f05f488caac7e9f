//! Tiled inference, evaluation and the band ablation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::raster::{Plane, RasterGrid};
use crate::sensor::{band_subset, BandSubset};
use crate::tensor::{Shape4, Tensor4};

use super::checkpoint::Checkpoint;
use super::data::LabeledScene;
use super::trainer::{train, TrainConfig};

pub const DEFAULT_TILE: usize = 128;
pub const DEFAULT_OVERLAP: usize = 16;

/// Per-pixel model outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub density: Plane<f32>,
    pub mask: Plane<u8>,
}

impl Prediction {
    /// Density and mask as single-band rasters.
    pub fn to_rasters(&self, gsd_m: f64) -> Result<(RasterGrid, RasterGrid)> {
        let density = RasterGrid::from_plane("density", &self.density, gsd_m)?;
        let mask = RasterGrid::from_plane("mask", &self.mask.map(|v| v as f32), gsd_m)?;
        Ok((density, mask))
    }
}

/// Anything that maps an image to density and mask predictions.
pub trait Predictor {
    fn predict(&self, image: &RasterGrid) -> Result<Prediction>;
}

impl Predictor for Checkpoint {
    fn predict(&self, image: &RasterGrid) -> Result<Prediction> {
        predict(self, image)
    }
}

/// Tile start offsets along one axis: steps of `tile - 2 overlap`, the last
/// tile flush with the end.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let step = tile - 2 * overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + tile < len {
        starts.push(s);
        s += step;
    }
    starts.push(len - tile);
    starts
}

/// Half-open output range a tile owns: its interior, extended to the image
/// border on the outside.
fn owned(start: usize, size: usize, len: usize, overlap: usize) -> (usize, usize) {
    let lo = if start == 0 { 0 } else { start + overlap };
    let hi = if start + size >= len { len } else { start + size - overlap };
    (lo, hi)
}

/// Eval-mode forward of a `(1, c, h, w)` input in overlapping tiles,
/// keeping each tile's interior. Returns `(semantic logits, density)`.
pub fn infer_tiled(model: &Model<f32>, x: &Tensor4<f32>, tile: usize, overlap: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::shape("tiled inference", format!("expected one image, got {s}")));
    }
    if tile <= 2 * overlap {
        return Err(Error::invalid(format!(
            "tile {tile} must exceed twice the overlap {overlap}"
        )));
    }
    if s.h <= tile && s.w <= tile {
        return model.infer(x);
    }
    let rows = tile_starts(s.h, tile, overlap);
    let cols = tile_starts(s.w, tile, overlap);
    let jobs: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let outputs = jobs
        .par_iter()
        .map(|&(r, c)| {
            let (th, tw) = (tile.min(s.h), tile.min(s.w));
            model.infer(&x.crop(0, r, c, th, tw)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sem = Tensor4::zeros(Shape4::new(1, 2, s.h, s.w));
    let mut den = Tensor4::zeros(Shape4::new(1, 1, s.h, s.w));
    for (&(r, c), (ts, td)) in jobs.iter().zip(&outputs) {
        let (th, tw) = (ts.shape().h, ts.shape().w);
        let (r0, r1) = owned(r, th, s.h, overlap);
        let (c0, c1) = owned(c, tw, s.w, overlap);
        for y in r0..r1 {
            for xx in c0..c1 {
                for ch in 0..2 {
                    sem.set(0, ch, y, xx, ts.at(0, ch, y - r, xx - c));
                }
                den.set(0, 0, y, xx, td.at(0, 0, y - r, xx - c));
            }
        }
    }
    Ok((sem, den))
}

/// Argmax over the two semantic logits; ties go to background.
pub fn argmax_mask(logits: &Tensor4<f32>) -> Plane<u8> {
    let s = logits.shape();
    let (bg, fg) = (logits.plane(0, 0), logits.plane(0, 1));
    Plane {
        h: s.h,
        w: s.w,
        data: bg.iter().zip(fg).map(|(&b, &f)| u8::from(f > b)).collect(),
    }
}

/// Standardizes the checkpoint's bands of `image` and runs tiled inference.
pub fn predict(checkpoint: &Checkpoint, image: &RasterGrid) -> Result<Prediction> {
    let x = checkpoint.normalization.apply(image)?;
    let (sem, den) = infer_tiled(&checkpoint.model, &x, DEFAULT_TILE, DEFAULT_OVERLAP)?;
    Ok(Prediction {
        density: Plane::from_tensor(&den, 0, 0),
        mask: argmax_mask(&sem),
    })
}

/// Predicts every scene and scores the concatenated pixels.
pub fn evaluate(predictor: &dyn Predictor, scenes: &[LabeledScene]) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluation needs at least one scene"));
    }
    let mut pm = Vec::new();
    let mut gm = Vec::new();
    let mut pd = Vec::new();
    let mut gd = Vec::new();
    for scene in scenes {
        let p = predictor.predict(&scene.image)?;
        if (p.density.h, p.density.w) != (scene.target.density.h, scene.target.density.w) {
            return Err(Error::shape("evaluate", "prediction and target sizes differ"));
        }
        pm.extend_from_slice(&p.mask.data);
        gm.extend_from_slice(&scene.target.mask.data);
        pd.extend_from_slice(&p.density.data);
        gd.extend(scene.target.density.data.iter().map(|&v| v as f32));
    }
    MetricsReport::compute(&pm, &gm, &pd, &gd)
}

/// One row of the band ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: BandSubset,
    pub channels: usize,
    pub report: MetricsReport,
}

/// Trains and evaluates one model per band subset; configurations differ
/// only in the input bands.
pub fn ablate_bands(base: &TrainConfig, train_scenes: &[LabeledScene], test_scenes: &[LabeledScene]) -> Result<Vec<AblationRow>> {
    let first = train_scenes
        .first()
        .ok_or_else(|| Error::invalid("ablation needs training scenes"))?;
    let mut rows = Vec::new();
    for subset in BandSubset::ALL {
        let channels = band_subset(&first.image, subset)?.bands.len();
        let config = TrainConfig {
            band_subset: subset,
            ..base.clone()
        };
        let outcome = train(&config, train_scenes)?;
        let report = evaluate(&outcome.checkpoint, test_scenes)?;
        rows.push(AblationRow { subset, channels, report });
    }
    Ok(rows)
}

/// Plain-text comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>4} {:>7} {:>9} {:>7} {:>9} {:>9} {:>9}",
        "bands", "ch", "iou", "precision", "recall", "mse", "mae", "diff_pct"
    );
    for r in rows {
        let m = &r.report;
        let diff = m.diff_pct.map_or("none".to_string(), |d| format!("{d:.2}"));
        let _ = writeln!(
            s,
            "{:<8} {:>4} {:>7.4} {:>9.4} {:>7.4} {:>9.5} {:>9.5} {:>9}",
            r.subset.name(),
            r.channels,
            m.iou,
            m.precision,
            m.recall,
            m.mse,
            m.mae,
            diff
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_cover_axis() {
        assert_eq!(tile_starts(100, 128, 16), vec![0]);
        assert_eq!(tile_starts(160, 128, 16), vec![0, 32]);
        assert_eq!(tile_starts(300, 128, 16), vec![0, 96, 172]);
        for len in [129, 160, 224, 225, 300, 513] {
            let starts = tile_starts(len, 128, 16);
            let mut next = 0;
            for &s in &starts {
                let (lo, hi) = owned(s, 128, len, 16);
                assert!(lo <= next, "gap before {lo} in {len}");
                next = next.max(hi);
            }
            assert_eq!(next, len);
        }
    }

    #[test]
    fn argmax_prefers_background_on_ties() {
        let t = Tensor4::from_vec(Shape4::new(1, 2, 1, 3), vec![0.0, 1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(argmax_mask(&t).data, vec![0, 0, 1]);
    }
}
