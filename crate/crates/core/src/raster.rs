//! Single-band planes and multi-band rasters, plus the raster file format.
//!
//! File layout:
//!
//! ```text
//! SPDR1\n
//! <bands> <h> <w> <gsd_m>\n
//! <band name>\n            (one line per band)
//! <f32 LE values>          (band-major, then row-major)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

pub const RASTER_MAGIC: &[u8; 6] = b"SPDR1\n";

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![T::default(); h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(
                "plane",
                format!("{} values for a {h}x{w} grid", data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.w + c] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Real> Plane<T> {
    pub fn to_tensor(&self) -> Tensor4<T> {
        Tensor4::from_vec(Shape4::new(1, 1, self.h, self.w), self.data.clone())
            .expect("plane length matches shape")
    }

    /// Takes plane `(n, c)` of a tensor.
    pub fn from_tensor(t: &Tensor4<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Self {
            h: s.h,
            w: s.w,
            data: t.plane(n, c).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub data: Vec<f32>,
}

/// Geo-agnostic multi-band image; every band shares the grid and its
/// ground sampling distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub h: usize,
    pub w: usize,
    pub gsd_m: f64,
    pub bands: Vec<Band>,
}

impl RasterGrid {
    pub fn new(h: usize, w: usize, gsd_m: f64) -> Self {
        Self {
            h,
            w,
            gsd_m,
            bands: Vec::new(),
        }
    }

    pub fn push_band(&mut self, name: impl Into<String>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if data.len() != self.h * self.w {
            return Err(Error::shape(
                "raster band",
                format!("band {name} has {} values for {}x{}", data.len(), self.h, self.w),
            ));
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("band name {name:?} must be a non-empty token")));
        }
        if self.band_index(&name).is_some() {
            return Err(Error::invalid(format!("duplicate band {name}")));
        }
        self.bands.push(Band { name, data });
        Ok(())
    }

    /// Single-band raster from a plane.
    pub fn from_plane(name: &str, plane: &Plane<f32>, gsd_m: f64) -> Result<Self> {
        let mut r = Self::new(plane.h, plane.w, gsd_m);
        r.push_band(name, plane.data.clone())?;
        Ok(r)
    }

    pub fn band_names(&self) -> Vec<&str> {
        self.bands.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b.name == name)
    }

    pub fn band(&self, name: &str) -> Option<&Band> {
        self.bands.iter().find(|b| b.name == name)
    }

    /// Bands in the requested order.
    pub fn select(&self, names: &[&str]) -> Result<RasterGrid> {
        let mut out = RasterGrid::new(self.h, self.w, self.gsd_m);
        for name in names {
            let band = self
                .band(name)
                .ok_or_else(|| Error::invalid(format!("raster has no band {name}")))?;
            out.push_band(*name, band.data.clone())?;
        }
        Ok(out)
    }

    /// `(1, bands, h, w)` tensor.
    pub fn to_tensor(&self) -> Tensor4<f32> {
        let data = self.bands.iter().flat_map(|b| b.data.iter().copied()).collect();
        Tensor4::from_vec(Shape4::new(1, self.bands.len(), self.h, self.w), data)
            .expect("bands have grid size")
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(RASTER_MAGIC)?;
        writeln!(out, "{} {} {} {}", self.bands.len(), self.h, self.w, self.gsd_m)?;
        for b in &self.bands {
            writeln!(out, "{}", b.name)?;
        }
        let mut buf = Vec::with_capacity(self.bands.len() * self.h * self.w * 4);
        for b in &self.bands {
            for v in &b.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("raster", "truncated magic"))?;
        if &magic != RASTER_MAGIC {
            return Err(Error::format("raster", "bad magic, expected SPDR1"));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::format("raster", format!("header line {line:?}")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("raster", format!("header field {s:?}")))
        };
        let (nb, h, w) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        let gsd_m: f64 = fields[3]
            .parse()
            .map_err(|_| Error::format("raster", format!("gsd {:?}", fields[3])))?;
        let mut names = Vec::with_capacity(nb);
        for _ in 0..nb {
            let mut name = String::new();
            if r.read_line(&mut name)? == 0 {
                return Err(Error::format("raster", "missing band name"));
            }
            names.push(name.trim_end_matches('\n').to_string());
        }
        let plane = h
            .checked_mul(w)
            .ok_or_else(|| Error::format("raster", "grid too large"))?;
        let mut grid = RasterGrid::new(h, w, gsd_m);
        let mut bytes = vec![0u8; plane * 4];
        for name in names {
            r.read_exact(&mut bytes)
                .map_err(|_| Error::format("raster", format!("truncated data in band {name}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            grid.push_band(name, data)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("raster", "trailing bytes after band data"));
        }
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}
