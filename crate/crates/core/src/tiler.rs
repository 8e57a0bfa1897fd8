//! Physical-size tiling grid, tile extraction, tissue and blur quality
//! control, and the tile manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize, Method, Raster, SlideMeta};
use crate::segmentation::BinaryMask;
use crate::tsv::{fmt_f64, Table, Writer, NA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    /// Tile edge in micrometres.
    pub physical_size: f64,
    pub output_px: usize,
    pub overlap_fraction: f64,
    pub tissue_min_fraction: f64,
    pub blur_variance_min: f64,
    pub jpeg_quality: u8,
    /// Fixes the level-0 read size instead of deriving it from `physical_size / mpp`.
    pub src_px_exact: Option<usize>,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            physical_size: 271.0,
            output_px: 598,
            overlap_fraction: 0.5,
            tissue_min_fraction: 0.5,
            blur_variance_min: 500.0,
            jpeg_quality: 80,
            src_px_exact: None,
        }
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_px == 0 {
            return Err(Error::invalid("output_px must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::invalid("overlap_fraction must be in [0, 1)"));
        }
        if !(self.physical_size > 0.0) {
            return Err(Error::invalid("physical_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tissue_min_fraction) {
            return Err(Error::invalid("tissue_min_fraction must be in [0, 1]"));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::invalid("jpeg_quality must be in 1..=100"));
        }
        if self.src_px_exact == Some(0) {
            return Err(Error::invalid("src_px_exact must be at least 1"));
        }
        Ok(())
    }

    /// Level-0 pixels read per tile edge.
    pub fn src_px(&self, mpp: f64) -> usize {
        self.src_px_exact
            .unwrap_or_else(|| round_half_up(self.physical_size / mpp).max(1))
    }

    pub fn stride_px(&self, mpp: f64) -> usize {
        round_half_up(self.src_px(mpp) as f64 * (1.0 - self.overlap_fraction)).max(1)
    }
}

/// Tile origins in row-major order; every tile lies fully inside level 0.
pub fn plan_grid(meta: &SlideMeta, spec: &TileSpec) -> Vec<(usize, usize)> {
    let src = spec.src_px(meta.mpp);
    let stride = spec.stride_px(meta.mpp);
    let (w, h) = (meta.width(), meta.height());
    if src > w || src > h {
        log::warn!(
            "slide {} ({w}x{h}) is smaller than one {src}px tile; no tiles planned",
            meta.slide_id
        );
        return Vec::new();
    }
    let xs: Vec<usize> = (0..).map(|i| i * stride).take_while(|x| x + src <= w).collect();
    let ys: Vec<usize> = (0..).map(|i| i * stride).take_while(|y| y + src <= h).collect();
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

#[derive(Debug, Clone)]
pub struct TileRecord {
    pub slide_id: String,
    pub x0: usize,
    pub y0: usize,
    pub src_px: usize,
    pub pixels: Raster,
    pub tissue_fraction: f64,
    pub blur_variance: f64,
    pub accepted: bool,
}

/// Reads `src_px²` at level 0 and resamples it to `output_px²` with Lanczos.
/// Quality metrics other than blur are left at zero.
pub fn extract_tile(level0: &Raster, meta: &SlideMeta, spec: &TileSpec, origin: (usize, usize)) -> Result<TileRecord> {
    let src = spec.src_px(meta.mpp);
    let (x0, y0) = origin;
    let region = level0.crop(x0, y0, src, src)?;
    let pixels = resize(&region, spec.output_px, spec.output_px, Method::Lanczos)?;
    let blur = blur_variance(&pixels)?;
    Ok(TileRecord {
        slide_id: meta.slide_id.clone(),
        x0,
        y0,
        src_px: src,
        pixels,
        tissue_fraction: 0.0,
        blur_variance: blur,
        accepted: false,
    })
}

/// Fraction of mask-positive pixels among mask pixels whose centres fall
/// inside the tile footprint.
pub fn tissue_fraction(origin: (usize, usize), src_px: usize, mask: &BinaryMask, meta: &SlideMeta) -> Result<f64> {
    let f = meta.level(mask.level)?.factor;
    let span = |start: usize, len: usize| {
        let lo = (start as f64 / f - 0.5).ceil().max(0.0) as usize;
        let hi = ((((start + src_px) as f64) / f - 0.5).ceil().max(0.0) as usize).min(len);
        if hi > lo {
            (lo, hi)
        } else {
            // Footprint smaller than one mask pixel: use the pixel under its centre.
            let c = (((start as f64 + src_px as f64 / 2.0) / f) as usize).min(len - 1);
            (c, c + 1)
        }
    };
    let (x_lo, x_hi) = span(origin.0, mask.width());
    let (y_lo, y_hi) = span(origin.1, mask.height());
    let mut hits = 0usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            hits += mask.get(x, y) as usize;
        }
    }
    Ok(hits as f64 / ((x_hi - x_lo) * (y_hi - y_lo)) as f64)
}

/// ITU-R 601 luma, rounded to 8 bits.
pub fn luma(rgb: [u8; 3]) -> u8 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64).round() as u8
}

/// Variance over all pixels of the 4-neighbour Laplacian of the greyscale
/// tile, with edge-replicated borders.
pub fn blur_variance(tile: &Raster) -> Result<f64> {
    tile.require_rgb("blur_variance")?;
    let (w, h) = (tile.width(), tile.height());
    if w == 0 || h == 0 {
        return Ok(0.0);
    }
    let grey: Vec<f64> = tile.rgb_pixels().map(|p| luma(p) as f64).collect();
    let at = |x: isize, y: isize| {
        let xx = x.clamp(0, w as isize - 1) as usize;
        let yy = y.clamp(0, h as isize - 1) as usize;
        grey[yy * w + xx]
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            sum += v;
            sum_sq += v * v;
        }
    }
    let n = (w * h) as f64;
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

/// Tissue strictly above the minimum and blur variance at or above the minimum.
pub fn accept(tile: &TileRecord, spec: &TileSpec) -> bool {
    tile.tissue_fraction > spec.tissue_min_fraction && tile.blur_variance >= spec.blur_variance_min
}

pub fn tile_filename(slide_id: &str, x0: usize, y0: usize) -> String {
    format!("{slide_id}__x{x0}_y{y0}.jpg")
}

pub fn write_tile(tile: &TileRecord, out_dir: impl AsRef<Path>, quality: u8) -> Result<PathBuf> {
    let path = out_dir.as_ref().join(tile_filename(&tile.slide_id, tile.x0, tile.y0));
    tile.pixels.save_jpeg(&path, quality)?;
    Ok(path)
}

/// Extracts and scores every planned tile of one slide. Records come back
/// sorted by `(y0, x0)` regardless of processing order.
pub fn tile_slide(level0: &Raster, meta: &SlideMeta, mask: &BinaryMask, spec: &TileSpec) -> Result<Vec<TileRecord>> {
    spec.validate()?;
    let origins = plan_grid(meta, spec);
    let mut tiles: Vec<TileRecord> = origins
        .par_iter()
        .map(|&o| {
            let mut t = extract_tile(level0, meta, spec, o)?;
            t.tissue_fraction = tissue_fraction(o, t.src_px, mask, meta)?;
            t.accepted = accept(&t, spec);
            Ok(t)
        })
        .collect::<Result<_>>()?;
    tiles.sort_by_key(|t| (t.y0, t.x0));
    Ok(tiles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub slide_id: String,
    pub x0: usize,
    pub y0: usize,
    pub src_px: usize,
    pub tissue_fraction: f64,
    pub blur_variance: f64,
    pub accepted: bool,
    /// Only accepted tiles are written.
    pub path: Option<String>,
}

impl ManifestRow {
    pub fn from_record(t: &TileRecord, path: Option<String>) -> Self {
        ManifestRow {
            slide_id: t.slide_id.clone(),
            x0: t.x0,
            y0: t.y0,
            src_px: t.src_px,
            tissue_fraction: t.tissue_fraction,
            blur_variance: t.blur_variance,
            accepted: t.accepted,
            path,
        }
    }

    pub fn key(&self) -> (&str, usize, usize) {
        (&self.slide_id, self.y0, self.x0)
    }
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "slide_id",
    "x0",
    "y0",
    "src_px",
    "tissue_fraction",
    "blur_variance",
    "accepted",
    "path",
];

pub fn sort_manifest(rows: &mut [ManifestRow]) {
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
}

pub fn manifest_to_string(rows: &[ManifestRow]) -> String {
    let mut rows = rows.to_vec();
    sort_manifest(&mut rows);
    let mut w = Writer::new(&MANIFEST_HEADER);
    for r in &rows {
        w.row(&[
            r.slide_id.clone(),
            r.x0.to_string(),
            r.y0.to_string(),
            r.src_px.to_string(),
            fmt_f64(r.tissue_fraction),
            fmt_f64(r.blur_variance),
            r.accepted.to_string(),
            r.path.clone().unwrap_or_else(|| NA.to_string()),
        ]);
    }
    w.finish()
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_to_string(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let t = Table::read(path)?;
    let [c_slide, c_x, c_y, c_src, c_tf, c_bv, c_acc, c_path] = t.columns(MANIFEST_HEADER)?;
    (0..t.rows.len())
        .map(|i| {
            let row = &t.rows[i];
            let accepted = match row[c_acc].as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::parse(&t.path, i + 2, format!("bad accepted flag `{other}`"))),
            };
            Ok(ManifestRow {
                slide_id: row[c_slide].clone(),
                x0: t.u64_at(i, c_x)? as usize,
                y0: t.u64_at(i, c_y)? as usize,
                src_px: t.u64_at(i, c_src)? as usize,
                tissue_fraction: t.f64_at(i, c_tf)?,
                blur_variance: t.f64_at(i, c_bv)?,
                accepted,
                path: (row[c_path] != NA).then(|| row[c_path].clone()),
            })
        })
        .collect()
}
