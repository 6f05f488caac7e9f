//! Ground truth: point annotations on a high-resolution grid become a
//! low-resolution density map (objects per pixel) and a binary mask.
//!
//! Pipeline: count raster -> Gaussian smoothing with `sigma = K / pi` ->
//! `K x K` window mean rescaled by `K^2` -> threshold `density > 0.5`.
//!
//! The smoothing kernel is truncated at `ceil(3 sigma)` and spread from each
//! source pixel with weights renormalized over the in-bounds taps, so the
//! total mass is exactly the object count even for objects on the border.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops;
use crate::raster::{Plane, RasterGrid};

/// Down-scale ratio between annotation grid and image grid.
pub const DEFAULT_K: usize = 10;

/// Densities strictly above this are the object class.
pub const MASK_THRESHOLD: f64 = 0.5;

/// Object locations on the high-resolution grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointAnnotationSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub points: Vec<(usize, usize)>,
    pub class_id: u8,
}

impl PointAnnotationSet {
    pub fn new(grid_h: usize, grid_w: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        let set = Self {
            grid_h,
            grid_w,
            points,
            class_id: 1,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(r, c)) = self
            .points
            .iter()
            .find(|&&(r, c)| r >= self.grid_h || c >= self.grid_w)
        {
            return Err(Error::invalid(format!(
                "point ({r}, {c}) outside the {}x{} annotation grid",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Text form: `grid_h grid_w`, then the point count, then `row col`
    /// lines.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 + self.points.len() * 12);
        let _ = writeln!(s, "{} {}", self.grid_h, self.grid_w);
        let _ = writeln!(s, "{}", self.points.len());
        for (r, c) in &self.points {
            let _ = writeln!(s, "{r} {c}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let bad = |detail: String| Error::format("annotation file", detail);
        let pair = |line: &str| -> Result<(usize, usize)> {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                _ => Err(bad(format!("expected two integers, got {line:?}"))),
            }
        };
        let (grid_h, grid_w) = pair(lines.next().ok_or_else(|| bad("missing grid header".into()))?)?;
        let count_line = lines.next().ok_or_else(|| bad("missing point count".into()))?;
        let count: usize = count_line
            .parse()
            .map_err(|_| bad(format!("point count {count_line:?}")))?;
        let points = lines.map(pair).collect::<Result<Vec<_>>>()?;
        if points.len() != count {
            return Err(bad(format!("header says {count} points, found {}", points.len())));
        }
        Self::new(grid_h, grid_w, points)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Paired density map and semantic mask at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySemanticTarget {
    pub density: Plane<f64>,
    pub mask: Plane<u8>,
    pub k: usize,
    pub sigma: f64,
}

impl DensitySemanticTarget {
    pub fn count(&self) -> f64 {
        self.density.data.iter().sum()
    }

    /// Writes `<stem>.density.spdr` and `<stem>.mask.spdr`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, gsd_m: f64) -> Result<()> {
        let dir = dir.as_ref();
        let density = self.density.map(|v| v as f32);
        RasterGrid::from_plane("density", &density, gsd_m)?
            .save(dir.join(format!("{stem}.density.spdr")))?;
        let mask = self.mask.map(|v| v as f32);
        RasterGrid::from_plane("mask", &mask, gsd_m)?.save(dir.join(format!("{stem}.mask.spdr")))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str, k: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let d = RasterGrid::load(dir.join(format!("{stem}.density.spdr")))?;
        let m = RasterGrid::load(dir.join(format!("{stem}.mask.spdr")))?;
        if (d.h, d.w) != (m.h, m.w) || d.bands.len() != 1 || m.bands.len() != 1 {
            return Err(Error::format("target files", format!("{stem}: density/mask layout differs")));
        }
        Ok(Self {
            density: Plane::from_vec(d.h, d.w, d.bands[0].data.iter().map(|&v| v as f64).collect())?,
            mask: Plane::from_vec(m.h, m.w, m.bands[0].data.iter().map(|&v| (v > 0.5) as u8).collect())?,
            k,
            sigma: sigma_for_ratio(k),
        })
    }
}

/// Gaussian width used to spread one object: `K / pi`.
pub fn sigma_for_ratio(k: usize) -> f64 {
    k as f64 / PI
}

/// Truncation radius `ceil(3 sigma)`.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Unnormalized 1-D Gaussian taps for offsets `-radius..=radius`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Per-object count raster on the annotation grid.
pub fn rasterize_points(annotations: &PointAnnotationSet) -> Result<Plane<f64>> {
    annotations.validate()?;
    let mut raster = Plane::new(annotations.grid_h, annotations.grid_w);
    for &(r, c) in &annotations.points {
        raster.data[r * annotations.grid_w + c] += 1.0;
    }
    Ok(raster)
}

/// Mass-conserving isotropic Gaussian smoothing.
pub fn gaussian_smooth(raster: &Plane<f64>, sigma: f64) -> Result<Plane<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let radius = kernel_radius(sigma);
    let (h, w) = (raster.h, raster.w);

    // normalizer for a source at index i along an axis of length len
    let norms = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len.saturating_sub(1));
                (lo..=hi).map(|j| taps[j + radius - i]).sum()
            })
            .collect()
    };
    let row_norm = norms(h);
    let col_norm = norms(w);

    let mut vertical = Plane::<f64>::new(h, w);
    for r in 0..h {
        let src = &raster.data[r * w..(r + 1) * w];
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for rr in lo..=hi {
            let wgt = taps[rr + radius - r] / row_norm[r];
            let dst = &mut vertical.data[rr * w..(rr + 1) * w];
            for (d, &v) in dst.iter_mut().zip(src) {
                if v != 0.0 {
                    *d += v * wgt;
                }
            }
        }
    }

    let mut out = Plane::<f64>::new(h, w);
    for r in 0..h {
        let src = &vertical.data[r * w..(r + 1) * w];
        let dst = &mut out.data[r * w..(r + 1) * w];
        for (c, &v) in src.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            let scale = v / col_norm[c];
            for cc in lo..=hi {
                dst[cc] += scale * taps[cc + radius - c];
            }
        }
    }
    Ok(out)
}

/// `K x K` window means scaled by `K^2`, i.e. the object count covered by
/// each low-resolution pixel.
pub fn downsample_density(smoothed: &Plane<f64>, k: usize) -> Result<Plane<f64>> {
    if k == 0 {
        return Err(Error::invalid("down-scale ratio must be positive"));
    }
    if !smoothed.h.is_multiple_of(k) || !smoothed.w.is_multiple_of(k) {
        return Err(Error::shape(
            "downsample_density",
            format!("{}x{} grid not divisible by K = {k}", smoothed.h, smoothed.w),
        ));
    }
    let (oh, ow) = (smoothed.h / k, smoothed.w / k);
    let mut out = Plane::<f64>::new(oh, ow);
    for r in 0..smoothed.h {
        let row = &smoothed.data[r * smoothed.w..(r + 1) * smoothed.w];
        let dst = &mut out.data[(r / k) * ow..(r / k + 1) * ow];
        for (c, &v) in row.iter().enumerate() {
            dst[c / k] += v;
        }
    }
    // sum == mean * k^2
    Ok(out)
}

/// `1` where density is strictly above 0.5.
pub fn derive_semantic_mask(density: &Plane<f64>) -> Plane<u8> {
    density.map(|v| (v > MASK_THRESHOLD) as u8)
}

/// Full ground-truth pipeline for one annotation set.
pub fn build_target(annotations: &PointAnnotationSet, k: usize) -> Result<DensitySemanticTarget> {
    let sigma = sigma_for_ratio(k);
    let counts = rasterize_points(annotations)?;
    let smoothed = gaussian_smooth(&counts, sigma)?;
    let density = downsample_density(&smoothed, k)?;
    let mask = derive_semantic_mask(&density);
    Ok(DensitySemanticTarget {
        density,
        mask,
        k,
        sigma,
    })
}

/// Bilinear upsampling of a band from `coarse_gsd` to `target_gsd` metres.
pub fn resample_band(band: &Plane<f32>, coarse_gsd: f64, target_gsd: f64) -> Result<Plane<f32>> {
    if !(coarse_gsd > 0.0 && target_gsd > 0.0) {
        return Err(Error::invalid("ground sampling distances must be positive"));
    }
    let ratio = coarse_gsd / target_gsd;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 * ratio {
        return Err(Error::invalid(format!(
            "coarse GSD {coarse_gsd} m is not an integer multiple of {target_gsd} m"
        )));
    }
    let f = factor as usize;
    let up = ops::bilinear_resize(&band.to_tensor(), band.h * f, band.w * f)?;
    Ok(Plane::from_tensor(&up, 0, 0))
}
