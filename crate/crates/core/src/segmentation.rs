//! Tissue segmentation, annotation rasterisation, mask algebra and
//! probability-map post-processing.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{rgb_to_hsv_px, Raster, SlideMeta};

/// Foreground objects smaller than this many pixels are removed from
/// post-processed probability masks.
pub const MIN_OBJECT_AREA: usize = 405;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    /// Pyramid level the mask is aligned to.
    pub level: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize, level: usize) -> Self {
        BinaryMask {
            width,
            height,
            level,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize, level: usize) -> Self {
        BinaryMask {
            width,
            height,
            level,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, level: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            level,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nonzero samples of a 1-channel raster are foreground.
    pub fn from_raster(r: &Raster, level: usize) -> Result<Self> {
        if r.channels() != 1 {
            return Err(Error::invalid("mask raster must have one channel"));
        }
        Ok(BinaryMask {
            width: r.width(),
            height: r.height(),
            level,
            bits: r.data().iter().map(|&v| v > 127).collect(),
        })
    }

    pub fn to_raster(&self) -> Raster {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Raster::from_vec(self.width, self.height, 1, data).expect("dims")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_raster().save_png(path)
    }

    /// Loads a 0/255 PNG and resolves its level from the slide pyramid.
    pub fn load_for_slide(path: impl AsRef<Path>, meta: &SlideMeta) -> Result<Self> {
        let path = path.as_ref();
        let r = Raster::load(path)?;
        let level = meta.level_for_dims(r.width(), r.height()).ok_or_else(|| {
            Error::invalid(format!(
                "{}: {}x{} matches no level of slide {}",
                path.display(),
                r.width(),
                r.height(),
                meta.slide_id
            ))
        })?;
        BinaryMask::from_raster(&r, level)
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.level != other.level {
            return Err(Error::invalid(format!(
                "mask shape mismatch: {}x{}@L{} vs {}x{}@L{}",
                self.width, self.height, self.level, other.width, other.height, other.level
            )));
        }
        Ok(())
    }
}

/// Pixelwise AND.
pub fn intersect(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.check_same_shape(b)?;
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        level: a.level,
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x && y).collect(),
    })
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Returns the last bin of the lower class: foreground is `value > t`.
/// Ties resolve to the smallest index; a histogram with a single occupied
/// bin returns that bin.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::invalid("Otsu threshold of an empty histogram"));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    let n = total as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = 0usize;
    let mut best_var = -1.0;
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        // Relative tolerance so that mathematically equal variances tie.
        if var > best_var * (1.0 + 1e-12) + 1e-12 {
            best_var = var;
            best = t;
        }
    }
    Ok(best as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HueKeep {
    #[default]
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueParams {
    /// On the normalised `[0, 1]` hue wheel.
    pub hue_threshold: f64,
    pub hue_keep: HueKeep,
    pub disk_radius: usize,
    /// Target downsample factor when choosing a segmentation level.
    pub level_factor: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            hue_threshold: 0.75,
            hue_keep: HueKeep::Below,
            disk_radius: 10,
            level_factor: 32.0,
        }
    }
}

/// Saturation above Otsu and hue on the configured side of the threshold,
/// followed by closing then opening with a disk.
pub fn tissue_mask(raster: &Raster, level: usize, params: &TissueParams) -> Result<BinaryMask> {
    raster.require_rgb("tissue_mask")?;
    let (w, h) = (raster.width(), raster.height());
    if w == 0 || h == 0 {
        return Ok(BinaryMask::empty(w, h, level));
    }
    let hsv: Vec<[u8; 3]> = raster.rgb_pixels().map(rgb_to_hsv_px).collect();
    let mut hist = [0u64; 256];
    for p in &hsv {
        hist[p[1] as usize] += 1;
    }
    let t = otsu_threshold(&hist)?;
    let bits = hsv
        .iter()
        .map(|p| {
            let hue = p[0] as f64 / 255.0;
            let hue_ok = match params.hue_keep {
                HueKeep::Below => hue <= params.hue_threshold,
                HueKeep::Above => hue >= params.hue_threshold,
            };
            p[1] > t && hue_ok
        })
        .collect();
    let raw = BinaryMask {
        width: w,
        height: h,
        level,
        bits,
    };
    let closed = close(&raw, params.disk_radius);
    Ok(open(&closed, params.disk_radius))
}

fn disk_half_widths(radius: usize) -> Vec<(isize, usize)> {
    let r = radius as isize;
    (-r..=r)
        .map(|dy| {
            let rem = (r * r - dy * dy) as f64;
            (dy, rem.sqrt().floor() as usize)
        })
        .collect()
}

fn row_prefix(mask: &BinaryMask) -> Vec<u32> {
    let w = mask.width;
    let mut p = vec![0u32; (w + 1) * mask.height];
    for y in 0..mask.height {
        let base = y * (w + 1);
        for x in 0..w {
            p[base + x + 1] = p[base + x] + mask.bits[y * w + x] as u32;
        }
    }
    p
}

/// Dilation by the disk `{dx² + dy² ≤ r²}`; outside the raster counts as background.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let p = row_prefix(mask);
    let spans = disk_half_widths(radius);
    let mut out = BinaryMask::empty(w, h, mask.level);
    for y in 0..h {
        for x in 0..w {
            let hit = spans.iter().any(|&(dy, hw)| {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    return false;
                }
                let lo = x.saturating_sub(hw);
                let hi = (x + hw).min(w - 1);
                let base = yy as usize * (w + 1);
                p[base + hi + 1] > p[base + lo]
            });
            out.bits[y * w + x] = hit;
        }
    }
    out
}

/// Erosion by the same disk; outside the raster counts as foreground, which
/// makes erosion the adjoint of [`dilate`].
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let p = row_prefix(mask);
    let spans = disk_half_widths(radius);
    let mut out = BinaryMask::empty(w, h, mask.level);
    for y in 0..h {
        for x in 0..w {
            let all = spans.iter().all(|&(dy, hw)| {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    return true;
                }
                let lo = x.saturating_sub(hw);
                let hi = (x + hw).min(w - 1);
                let base = yy as usize * (w + 1);
                (p[base + hi + 1] - p[base + lo]) as usize == hi - lo + 1
            });
            out.bits[y * w + x] = all;
        }
    }
    out
}

pub fn close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

pub fn open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationLabel {
    Invasive,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPolygon {
    pub slide_id: String,
    pub label: AnnotationLabel,
    /// Level-0 pixel coordinates; the ring is implicitly closed.
    pub vertices: Vec<[f64; 2]>,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationPolygon>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Even-odd fill of all polygons at the given pyramid level, sampling each
/// mask pixel at its centre.
pub fn rasterise_annotations(polygons: &[AnnotationPolygon], meta: &SlideMeta, level: usize) -> Result<BinaryMask> {
    let lvl = meta.level(level)?;
    for (i, p) in polygons.iter().enumerate() {
        if p.vertices.len() < 3 {
            return Err(Error::invalid(format!(
                "annotation polygon #{i} of slide {} has {} vertices (need at least 3)",
                p.slide_id,
                p.vertices.len()
            )));
        }
    }
    let f = lvl.factor;
    let edges: Vec<([f64; 2], [f64; 2])> = polygons
        .iter()
        .flat_map(|p| {
            let n = p.vertices.len();
            (0..n).map(move |i| {
                let a = p.vertices[i];
                let b = p.vertices[(i + 1) % n];
                ([a[0] / f, a[1] / f], [b[0] / f, b[1] / f])
            })
        })
        .collect();
    let mut mask = BinaryMask::empty(lvl.width, lvl.height, level);
    let mut xs = Vec::new();
    for y in 0..lvl.height {
        let cy = y as f64 + 0.5;
        xs.clear();
        for &(a, b) in &edges {
            // Half-open rule on y so shared vertices are counted once.
            if (a[1] <= cy) != (b[1] <= cy) {
                let t = (cy - a[1]) / (b[1] - a[1]);
                xs.push(a[0] + t * (b[0] - a[0]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Pixel x is inside when its centre x + 0.5 lies in [x0, x1).
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(lvl.width);
            for x in start..end {
                let i = y * lvl.width + x;
                mask.bits[i] = !mask.bits[i];
            }
        }
    }
    Ok(mask)
}

/// Fills background regions not 4-connected to the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, q: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !mask.bits[i] && !outside[i] {
            outside[i] = true;
            q.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        if h > 0 {
            seed(x, h - 1, &mut outside, &mut queue);
        }
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        if w > 0 {
            seed(w - 1, y, &mut outside, &mut queue);
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            let i = ny * w + nx;
            if !mask.bits[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    BinaryMask {
        width: w,
        height: h,
        level: mask.level,
        bits: outside.iter().map(|&o| !o).collect(),
    }
}

/// Removes 8-connected foreground components with fewer than `min_area` pixels.
pub fn remove_small_objects(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = mask.clone();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if component.len() < min_area {
            for &i in &component {
                out.bits[i] = false;
            }
        }
    }
    out
}

/// Thresholds a probability raster at `score >= cutoff`, fills enclosed
/// holes and drops objects smaller than [`MIN_OBJECT_AREA`].
pub fn postprocess_probability_mask(prob: &Raster, cutoff: u8, level: usize) -> Result<BinaryMask> {
    if prob.channels() != 1 {
        return Err(Error::invalid("probability map must have one channel"));
    }
    let raw = BinaryMask {
        width: prob.width(),
        height: prob.height(),
        level,
        bits: prob.data().iter().map(|&v| v >= cutoff).collect(),
    };
    Ok(remove_small_objects(&fill_holes(&raw), MIN_OBJECT_AREA))
}
