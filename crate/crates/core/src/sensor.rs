//! Synthetic multispectral scenes with sub-pixel objects.
//!
//! A scene is built on a high-resolution grid `K` times finer than the
//! image: plantation regions come from thresholded smooth noise, target
//! objects are placed inside them and distractor ("clutter") objects in
//! separate zones outside. Each object is a hard-edged disk carrying its
//! class signature; every band is the area average of the high-resolution
//! scene at the band's native GSD plus Gaussian noise, and coarse bands are
//! then bilinearly upsampled to the image grid.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gt::{self, DensitySemanticTarget, PointAnnotationSet};
use crate::raster::{Plane, RasterGrid};

const RGB: [&str; 3] = ["B2", "B3", "B4"];
const INFRARED: &str = "B8";

/// Spectral signature of the three surface classes in one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    /// Native GSD as a multiple of the image GSD (1 or 2).
    pub gsd_factor: usize,
    pub target: f32,
    pub clutter: f32,
    pub background: f32,
}

impl BandSpec {
    fn new(name: &str, gsd_factor: usize, target: f32, clutter: f32, background: f32) -> Self {
        Self {
            name: name.to_string(),
            gsd_factor,
            target,
            clutter,
            background,
        }
    }
}

/// 13 bands: B2, B3, B4, B8 at the image GSD and nine bands at twice the
/// GSD. Clutter matches the targets in RGB and differs in the infrared and
/// red-edge bands, so RGB alone cannot separate the two classes.
pub fn vegetation_band_table() -> Vec<BandSpec> {
    vec![
        BandSpec::new("B2", 1, 0.04, 0.04, 0.10),
        BandSpec::new("B3", 1, 0.08, 0.08, 0.13),
        BandSpec::new("B4", 1, 0.04, 0.04, 0.16),
        BandSpec::new("B8", 1, 0.45, 0.15, 0.24),
        BandSpec::new("B1", 2, 0.05, 0.05, 0.09),
        BandSpec::new("B5", 2, 0.10, 0.06, 0.18),
        BandSpec::new("B6", 2, 0.30, 0.10, 0.21),
        BandSpec::new("B7", 2, 0.40, 0.12, 0.23),
        BandSpec::new("B8A", 2, 0.46, 0.14, 0.25),
        BandSpec::new("B9", 2, 0.15, 0.06, 0.10),
        BandSpec::new("B10", 2, 0.01, 0.01, 0.01),
        BandSpec::new("B11", 2, 0.20, 0.30, 0.30),
        BandSpec::new("B12", 2, 0.10, 0.25, 0.22),
    ]
}

/// Same layout, but neither object class has an infrared signature (both
/// equal the background outside RGB) while targets and clutter differ in
/// RGB.
pub fn vehicle_band_table() -> Vec<BandSpec> {
    let background = [0.15, 0.18, 0.22, 0.28, 0.12, 0.24, 0.27, 0.29, 0.30, 0.12, 0.01, 0.35, 0.30];
    vegetation_band_table()
        .into_iter()
        .zip(background)
        .map(|(b, bg)| match b.name.as_str() {
            "B2" => BandSpec::new("B2", 1, 0.30, 0.05, bg),
            "B3" => BandSpec::new("B3", 1, 0.30, 0.09, bg),
            "B4" => BandSpec::new("B4", 1, 0.32, 0.05, bg),
            _ => BandSpec::new(&b.name, b.gsd_factor, bg, bg, bg),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Regular grid with random offset and jitter.
    Grid,
    /// Independent Poisson counts per pixel, uniform inside the pixel.
    Poisson,
}

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Image size in low-resolution pixels.
    pub scene_h: usize,
    pub scene_w: usize,
    /// Down-scale ratio between the annotation grid and the image grid.
    pub k: usize,
    /// Image GSD in metres.
    pub gsd_m: f64,
    pub band_table: Vec<BandSpec>,
    /// Expected target objects per low-resolution pixel inside plantations.
    pub object_density: f64,
    /// Object footprint area over low-resolution pixel area.
    pub object_area_ratio: f64,
    /// Expected clutter objects per low-resolution pixel inside clutter zones.
    pub clutter_density: f64,
    pub noise_sigma: f64,
    pub placement: Placement,
    /// Grid jitter as a fraction of the grid spacing.
    pub jitter: f64,
    /// Plantation cover fraction is drawn uniformly from this range.
    pub plantation_cover_min: f64,
    pub plantation_cover_max: f64,
    /// Fraction of the scene whose noise field hosts clutter (plantations
    /// excluded).
    pub clutter_cover: f64,
    /// Smoothing width of the region noise, in low-resolution pixels.
    /// Small values give fragmented, high-frequency plantation layouts.
    pub blob_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::coconut_like()
    }
}

impl SceneConfig {
    /// Tree plantation: about one object per pixel covering 36% of it, with
    /// clutter that looks identical in RGB.
    pub fn coconut_like() -> Self {
        Self {
            scene_h: 128,
            scene_w: 128,
            k: gt::DEFAULT_K,
            gsd_m: 10.0,
            band_table: vegetation_band_table(),
            object_density: 0.97,
            object_area_ratio: 0.36,
            clutter_density: 0.97,
            noise_sigma: 0.01,
            placement: Placement::Grid,
            jitter: 0.3,
            plantation_cover_min: 0.3,
            plantation_cover_max: 0.7,
            clutter_cover: 0.5,
            blob_sigma: 6.0,
            seed: 0,
        }
    }

    /// Dense small objects without an infrared signature; clutter differs
    /// in RGB.
    pub fn car_like() -> Self {
        Self {
            band_table: vehicle_band_table(),
            object_density: 2.0,
            object_area_ratio: 0.26,
            clutter_density: 1.0,
            placement: Placement::Poisson,
            ..Self::coconut_like()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.scene_h = h;
        self.scene_w = w;
        self
    }

    pub fn max_gsd_factor(&self) -> usize {
        self.band_table.iter().map(|b| b.gsd_factor).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.scene_h == 0 || self.scene_w == 0 || self.k == 0 {
            return bad("scene size and K must be positive".into());
        }
        if !(self.gsd_m > 0.0) {
            return bad(format!("GSD must be positive, got {}", self.gsd_m));
        }
        if !(self.object_area_ratio > 0.0 && self.object_area_ratio < 1.0) {
            return bad(format!(
                "object area ratio must lie in (0, 1), got {}",
                self.object_area_ratio
            ));
        }
        for (what, d) in [("object", self.object_density), ("clutter", self.clutter_density)] {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("{what} density must be a non-negative number, got {d}"));
            }
            if d * self.object_area_ratio > 1.0 {
                return bad(format!(
                    "{what} density {d} with area ratio {} needs more than the available area",
                    self.object_area_ratio
                ));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.jitter >= 0.0) || !(self.blob_sigma > 0.0) {
            return bad("noise, jitter must be non-negative and blob sigma positive".into());
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.plantation_cover_min)
            || !unit(self.plantation_cover_max)
            || self.plantation_cover_min > self.plantation_cover_max
            || !unit(self.clutter_cover)
        {
            return bad("cover fractions must lie in [0, 1] with min <= max".into());
        }
        if self.band_table.is_empty() {
            return bad("band table is empty".into());
        }
        for (i, b) in self.band_table.iter().enumerate() {
            if !(b.gsd_factor == 1 || b.gsd_factor == 2) {
                return bad(format!("band {} has GSD factor {} (expected 1 or 2)", b.name, b.gsd_factor));
            }
            if self.band_table[..i].iter().any(|o| o.name == b.name) {
                return bad(format!("duplicate band {}", b.name));
            }
        }
        let f = self.max_gsd_factor();
        if !self.scene_h.is_multiple_of(f) || !self.scene_w.is_multiple_of(f) {
            return bad(format!("scene size must be divisible by the coarsest GSD factor {f}"));
        }
        Ok(())
    }
}

/// A generated scene and everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub annotations: PointAnnotationSet,
    pub clutter_points: PointAnnotationSet,
    pub image: RasterGrid,
    pub target: DensitySemanticTarget,
    /// Low-resolution plantation mask the targets were placed in.
    pub plantation: Plane<u8>,
}

impl SyntheticScene {
    /// Realized targets per plantation pixel.
    pub fn plantation_density(&self) -> Option<f64> {
        let pixels = self.plantation.data.iter().filter(|&&v| v == 1).count();
        (pixels > 0).then(|| self.annotations.len() as f64 / pixels as f64)
    }

    /// Writes `<stem>.spdr`, `<stem>.ann`, `<stem>.clutter.ann`,
    /// `<stem>.density.spdr` and `<stem>.mask.spdr`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.image.save(dir.join(format!("{stem}.spdr")))?;
        self.annotations.save(dir.join(format!("{stem}.ann")))?;
        self.clutter_points.save(dir.join(format!("{stem}.clutter.ann")))?;
        self.target.save(dir, stem, self.image.gsd_m)
    }
}

/// Smooth random field thresholded to cover `fraction` of the pixels.
fn region_mask(h: usize, w: usize, blob_sigma: f64, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Plane<u8>> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let field = gt::gaussian_smooth(&Plane::from_vec(h, w, noise)?, blob_sigma)?;
    let target = (fraction * (h * w) as f64).round() as usize;
    if target == 0 {
        return Ok(Plane::new(h, w));
    }
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| field.data[b].total_cmp(&field.data[a]).then(a.cmp(&b)));
    let mut mask = Plane::<u8>::new(h, w);
    for &i in &order[..target] {
        mask.data[i] = 1;
    }
    Ok(mask)
}

fn place_objects(
    cfg: &SceneConfig,
    zone: &Plane<u8>,
    density: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let k = cfg.k;
    let (hh, hw) = (zone.h * k, zone.w * k);
    let mut points = Vec::new();
    if density <= 0.0 {
        return points;
    }
    match cfg.placement {
        Placement::Grid => {
            let spacing = k as f64 / density.sqrt();
            let oy = rng.random::<f64>() * spacing;
            let ox = rng.random::<f64>() * spacing;
            let half = 0.5 * cfg.jitter * spacing;
            let rows = ((hh as f64 - oy) / spacing).ceil().max(0.0) as usize;
            let cols = ((hw as f64 - ox) / spacing).ceil().max(0.0) as usize;
            for i in 0..rows {
                for j in 0..cols {
                    let ny = oy + i as f64 * spacing;
                    let nx = ox + j as f64 * spacing;
                    // jitter drawn for every node so layouts do not depend on
                    // the zone mask
                    let jy = (rng.random::<f64>() * 2.0 - 1.0) * half;
                    let jx = (rng.random::<f64>() * 2.0 - 1.0) * half;
                    if zone.get(ny as usize / k, nx as usize / k) == 0 {
                        continue;
                    }
                    let y = (ny + jy).clamp(0.0, hh as f64 - 1.0) as usize;
                    let x = (nx + jx).clamp(0.0, hw as f64 - 1.0) as usize;
                    points.push((y, x));
                }
            }
        }
        Placement::Poisson => {
            let poisson = Poisson::new(density).expect("positive rate");
            for r in 0..zone.h {
                for c in 0..zone.w {
                    let n: f64 = poisson.sample(rng);
                    if zone.get(r, c) == 0 {
                        continue;
                    }
                    for _ in 0..n as usize {
                        points.push((r * k + rng.random_range(0..k), c * k + rng.random_range(0..k)));
                    }
                }
            }
        }
    }
    points
}

/// High-resolution class raster: 0 background, 1 target, 2 clutter.
/// Targets are drawn last and win where disks overlap.
fn render_classes(cfg: &SceneConfig, targets: &[(usize, usize)], clutter: &[(usize, usize)]) -> Plane<u8> {
    let k = cfg.k;
    let (hh, hw) = (cfg.scene_h * k, cfg.scene_w * k);
    let mut classes = Plane::<u8>::new(hh, hw);
    let r2 = cfg.object_area_ratio * (k * k) as f64 / std::f64::consts::PI;
    let reach = r2.sqrt().floor() as isize;
    for (points, class) in [(clutter, 2u8), (targets, 1u8)] {
        for &(py, px) in points {
            for dy in -reach..=reach {
                let y = py as isize + dy;
                if y < 0 || y >= hh as isize {
                    continue;
                }
                for dx in -reach..=reach {
                    let x = px as isize + dx;
                    if x < 0 || x >= hw as isize || ((dy * dy + dx * dx) as f64) > r2 {
                        continue;
                    }
                    classes.data[y as usize * hw + x as usize] = class;
                }
            }
        }
    }
    classes
}

/// Fractions of target and clutter area in each `window x window` cell.
fn coverage(classes: &Plane<u8>, window: usize) -> (Plane<f32>, Plane<f32>) {
    let (oh, ow) = (classes.h / window, classes.w / window);
    let mut t = Plane::<f32>::new(oh, ow);
    let mut c = Plane::<f32>::new(oh, ow);
    let mut counts = vec![(0u32, 0u32); oh * ow];
    for y in 0..oh * window {
        let row = &classes.data[y * classes.w..y * classes.w + ow * window];
        let base = (y / window) * ow;
        for (x, &v) in row.iter().enumerate() {
            match v {
                1 => counts[base + x / window].0 += 1,
                2 => counts[base + x / window].1 += 1,
                _ => {}
            }
        }
    }
    let area = (window * window) as f32;
    for (i, (a, b)) in counts.into_iter().enumerate() {
        t.data[i] = a as f32 / area;
        c.data[i] = b as f32 / area;
    }
    (t, c)
}

/// Generates one scene; identical configs give bit-identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, k) = (cfg.scene_h, cfg.scene_w, cfg.k);

    let cover = if cfg.plantation_cover_max > cfg.plantation_cover_min {
        rng.random_range(cfg.plantation_cover_min..=cfg.plantation_cover_max)
    } else {
        cfg.plantation_cover_min
    };
    let plantation = region_mask(h, w, cfg.blob_sigma, cover, &mut rng)?;
    let mut clutter_zone = region_mask(h, w, cfg.blob_sigma, cfg.clutter_cover, &mut rng)?;
    for (z, &p) in clutter_zone.data.iter_mut().zip(&plantation.data) {
        if p == 1 {
            *z = 0;
        }
    }

    let targets = place_objects(cfg, &plantation, cfg.object_density, &mut rng);
    let clutter = place_objects(cfg, &clutter_zone, cfg.clutter_density, &mut rng);
    let classes = render_classes(cfg, &targets, &clutter);

    let mut image = RasterGrid::new(h, w, cfg.gsd_m);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let fine = coverage(&classes, k);
    let coarse = (cfg.max_gsd_factor() > 1).then(|| coverage(&classes, 2 * k));
    for band in &cfg.band_table {
        let (ft, fc) = if band.gsd_factor == 1 {
            (&fine.0, &fine.1)
        } else {
            let c = coarse.as_ref().expect("coarse coverage computed");
            (&c.0, &c.1)
        };
        let mut plane = Plane::<f32>::new(ft.h, ft.w);
        for (i, v) in plane.data.iter_mut().enumerate() {
            let (a, b) = (ft.data[i], fc.data[i]);
            let clean = a * band.target + b * band.clutter + (1.0 - a - b) * band.background;
            *v = clean + noise.sample(&mut rng) as f32;
        }
        if band.gsd_factor > 1 {
            let native = cfg.gsd_m * band.gsd_factor as f64;
            plane = gt::resample_band(&plane, native, cfg.gsd_m)?;
        }
        image.push_band(band.name.clone(), plane.data)?;
    }

    let annotations = PointAnnotationSet::new(h * k, w * k, targets)?;
    let mut clutter_points = PointAnnotationSet::new(h * k, w * k, clutter)?;
    clutter_points.class_id = 2;
    let target = gt::build_target(&annotations, k)?;
    Ok(SyntheticScene {
        annotations,
        clutter_points,
        image,
        target,
        plantation,
    })
}

/// Channel subsets used in the band-importance study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandSubset {
    All,
    Rgb,
    Rgbi,
    NoRgb,
}

impl BandSubset {
    pub const ALL: [BandSubset; 4] = [BandSubset::All, BandSubset::Rgb, BandSubset::Rgbi, BandSubset::NoRgb];

    pub fn name(self) -> &'static str {
        match self {
            BandSubset::All => "all",
            BandSubset::Rgb => "rgb",
            BandSubset::Rgbi => "rgbi",
            BandSubset::NoRgb => "no_rgb",
        }
    }

    /// Band names selected from `available`, in raster order.
    pub fn select<'a>(self, available: &[&'a str]) -> Result<Vec<&'a str>> {
        let wanted: Vec<&'a str> = match self {
            BandSubset::All => available.to_vec(),
            BandSubset::NoRgb => available.iter().copied().filter(|b| !RGB.contains(b)).collect(),
            BandSubset::Rgb | BandSubset::Rgbi => {
                let mut names: Vec<&str> = RGB.to_vec();
                if self == BandSubset::Rgbi {
                    names.push(INFRARED);
                }
                for n in &names {
                    if !available.contains(n) {
                        return Err(Error::invalid(format!(
                            "band subset {} needs band {n}, which the raster lacks",
                            self.name()
                        )));
                    }
                }
                available.iter().copied().filter(|b| names.contains(b)).collect()
            }
        };
        Ok(wanted)
    }
}

impl fmt::Display for BandSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BandSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BandSubset::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown band subset {s:?} (expected all, rgb, rgbi or no_rgb)")))
    }
}

/// Channel selection preserving raster order.
pub fn band_subset(image: &RasterGrid, subset: BandSubset) -> Result<RasterGrid> {
    let names = image.band_names();
    image.select(&subset.select(&names)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig::coconut_like().with_size(32, 32).with_seed(3)
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = small();
        c.object_density = 3.0; // 3 * 0.36 > 1
        assert!(generate_scene(&c).is_err());
        let mut c = small();
        c.object_area_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.scene_h = 31;
        assert!(c.validate().is_err());
        let mut c = small();
        c.band_table[1].gsd_factor = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_density_scene_has_empty_target() {
        let mut c = small();
        c.object_density = 0.0;
        let s = generate_scene(&c).unwrap();
        assert!(s.annotations.is_empty());
        assert!(s.target.density.data.iter().all(|&v| v == 0.0));
        assert!(s.target.mask.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn image_matches_config() {
        let s = generate_scene(&small()).unwrap();
        assert_eq!((s.image.h, s.image.w), (32, 32));
        assert_eq!(s.image.bands.len(), 13);
        assert_eq!((s.target.density.h, s.target.density.w), (32, 32));
        let total: f64 = s.target.density.data.iter().sum();
        assert!((total - s.annotations.len() as f64).abs() <= 1e-6 * total.max(1.0));
    }

    #[test]
    fn noiseless_fine_band_is_exact_mixture() {
        let mut c = small();
        c.noise_sigma = 0.0;
        let s = generate_scene(&c).unwrap();
        let b8 = &s.image.band("B8").unwrap().data;
        let spec = &c.band_table[3];
        // every value is a mixture of the three signatures with weights in
        // multiples of 1/k^2
        for &v in b8 {
            assert!(v >= spec.clutter.min(spec.background).min(spec.target) - 1e-6);
            assert!(v <= spec.target.max(spec.background) + 1e-6);
        }
    }

    #[test]
    fn subsets() {
        let s = generate_scene(&small()).unwrap();
        assert_eq!(band_subset(&s.image, BandSubset::All).unwrap(), s.image);
        assert_eq!(band_subset(&s.image, BandSubset::Rgb).unwrap().band_names(), vec!["B2", "B3", "B4"]);
        assert_eq!(band_subset(&s.image, BandSubset::Rgbi).unwrap().bands.len(), 4);
        let no_rgb = band_subset(&s.image, BandSubset::NoRgb).unwrap();
        assert_eq!(no_rgb.bands.len(), 10);
        assert!(!no_rgb.band_names().contains(&"B3"));
        assert!("nir".parse::<BandSubset>().is_err());
        let rgb_only = s.image.select(&["B2", "B3", "B4"]).unwrap();
        assert!(band_subset(&rgb_only, BandSubset::Rgbi).is_err());
    }
}
