//! Slide-level luminosity standardisation and Macenko stain normalisation.
//!
//! Stain vectors are estimated in optical-density space from the plane
//! spanned by the two leading principal axes of the chromatic pixels; the
//! extreme angular percentiles inside that plane give the hematoxylin and
//! eosin directions. Per-pixel stain saturations are recovered by
//! non-negative least squares, rescaled so the slide's 99th percentile
//! matches the global reference, and re-synthesised with the global matrix.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{histogram_percentile, percentile_mut};
use crate::raster::ColourCache;
use crate::raster::color::{lab_f64_to_rgb, rgb_to_l_f64, rgb_to_lab_f64};
use crate::raster::{from_od, to_od, OdPixel, Raster};

/// Incident light used for every optical-density conversion.
pub const BACKGROUND: [f64; 3] = [255.0; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LuminosityRef {
    pub i_ref95: u8,
}

impl LuminosityRef {
    pub fn new(i_ref95: u8) -> Result<Self> {
        if i_ref95 == 0 {
            return Err(Error::invalid("luminosity reference of 0 (degenerate slide)"));
        }
        Ok(LuminosityRef { i_ref95 })
    }
}

/// 8-bit-scaled CIELAB lightness (0..255) without quantisation.
fn lightness_255(rgb: [u8; 3]) -> f64 {
    rgb_to_l_f64(rgb) * 2.55
}

/// 95th percentile of the 8-bit L channel over all pixels of the sample.
pub fn luminosity_ref(tiles: &[Raster]) -> Result<LuminosityRef> {
    if tiles.is_empty() {
        return Err(Error::invalid("luminosity reference needs at least one tile"));
    }
    let mut hist = [0u64; 256];
    let mut cache = ColourCache::new();
    for t in tiles {
        t.require_rgb("luminosity_ref")?;
        for p in t.rgb_pixels() {
            let bin: u8 = cache.get(p, |p| lightness_255(p).round().clamp(0.0, 255.0) as u8);
            hist[bin as usize] += 1;
        }
    }
    let p95 = histogram_percentile(&hist, 95.0)
        .ok_or_else(|| Error::invalid("luminosity reference over zero pixels"))?;
    LuminosityRef::new(p95.round().clamp(0.0, 255.0) as u8)
}

/// Pixels brighter than the reference become white; the rest are stretched
/// linearly to 0..255. Chroma is carried through unquantised.
pub fn correct_luminosity_px(rgb: [u8; 3], reference: LuminosityRef) -> [u8; 3] {
    let [l, a, b] = rgb_to_lab_f64(rgb);
    let l8 = (l * 2.55).round();
    let r = reference.i_ref95 as f64;
    let l8_new = if l8 > r { 255.0 } else { (255.0 * l8 / r).round() };
    lab_f64_to_rgb([l8_new / 2.55, a, b])
}

pub fn correct_luminosity(tile: &Raster, reference: LuminosityRef) -> Result<Raster> {
    LuminosityRef::new(reference.i_ref95)?;
    tile.require_rgb("correct_luminosity")?;
    tile.map_rgb(|p| correct_luminosity_px(p, reference))
}

/// 3×2 optical-density absorbance matrix: column 0 hematoxylin, column 1 eosin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StainMatrix(pub [[f64; 2]; 3]);

impl StainMatrix {
    pub fn from_columns(h: [f64; 3], e: [f64; 3]) -> Self {
        StainMatrix([[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]])
    }

    pub fn column(&self, k: usize) -> [f64; 3] {
        [self.0[0][k], self.0[1][k], self.0[2][k]]
    }

    pub fn apply(&self, s: [f64; 2]) -> OdPixel {
        let mut od = [0.0; 3];
        for (c, row) in self.0.iter().enumerate() {
            od[c] = row[0] * s[0] + row[1] * s[1];
        }
        OdPixel(od)
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..2 {
            let c = self.column(k);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if c.iter().any(|&v| v < 0.0 || !v.is_finite()) || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("stain column {k} is not a non-negative unit vector")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainProfile {
    pub stain_matrix: StainMatrix,
    /// Per-stain 99th-percentile saturation (pseudo-maximum).
    pub sat_ref99: [f64; 2],
    pub seed: u64,
    pub n_tiles: usize,
}

impl StainProfile {
    pub fn validate(&self) -> Result<()> {
        self.stain_matrix.validate()?;
        if self.sat_ref99.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("sat_ref99 components must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let p: StainProfile = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplePlan {
    pub seed: u64,
    pub tiles_per_slide: usize,
    pub global_tiles: usize,
    /// Upper bound on pixels pooled for one estimate; pixels are drawn
    /// evenly from each sampled tile.
    pub pixel_budget: usize,
}

impl Default for SamplePlan {
    fn default() -> Self {
        SamplePlan {
            seed: 0,
            tiles_per_slide: 100,
            global_tiles: 3000,
            pixel_budget: 2_000_000,
        }
    }
}

impl SamplePlan {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_per_slide == 0 || self.global_tiles == 0 || self.pixel_budget == 0 {
            return Err(Error::invalid("sample counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacenkoParams {
    /// Pixels whose largest channel density is below this are background.
    pub od_floor: f64,
    /// Angular percentile α; stain directions sit at α and 100 − α.
    pub angle_percentile: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams {
            od_floor: 0.15,
            angle_percentile: 1.0,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for a named sampling stream under one seed.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(stream))
}

/// `k` distinct indices out of `n` (all of them when `k >= n`), ascending.
pub fn sample_indices(n: usize, k: usize, seed: u64, stream: &str) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = stream_rng(seed, stream);
    let mut v = index::sample(&mut rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Optical densities of an evenly split random pixel subsample of the tiles.
pub fn sample_od_pixels(tiles: &[Raster], budget: usize, seed: u64, stream: &str) -> Vec<OdPixel> {
    sample_od_pixels_with(tiles.len(), budget, seed, stream, |i| Ok(&tiles[i]), |_, p| p).expect("in-memory tiles")
}

/// Same sample as [`sample_od_pixels`], loading one tile at a time and
/// passing each sampled pixel of tile `i` through `px(i, rgb)` first.
/// With a per-pixel `px` this equals transforming whole tiles, then sampling.
pub fn sample_od_pixels_with<R: std::borrow::Borrow<Raster>>(
    n_tiles: usize,
    budget: usize,
    seed: u64,
    stream: &str,
    mut load: impl FnMut(usize) -> Result<R>,
    px: impl Fn(usize, [u8; 3]) -> [u8; 3],
) -> Result<Vec<OdPixel>> {
    if n_tiles == 0 {
        return Ok(Vec::new());
    }
    let per_tile = (budget / n_tiles).max(1);
    let mut out = Vec::with_capacity(per_tile * n_tiles);
    for i in 0..n_tiles {
        let t = load(i)?;
        let t = t.borrow();
        t.require_rgb("pixel sampling")?;
        let idx = sample_indices(t.pixel_count(), per_tile, seed, &format!("{stream}/px{i}"));
        let data = t.data();
        out.extend(idx.into_iter().map(|j| to_od(px(i, [data[3 * j], data[3 * j + 1], data[3 * j + 2]]), BACKGROUND)));
    }
    Ok(out)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(v, v).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// Macenko stain-vector estimation on optical-density pixels.
pub fn estimate_stain_matrix(od: &[OdPixel], params: &MacenkoParams) -> Result<StainMatrix> {
    let chromatic: Vec<[f64; 3]> = od
        .iter()
        .filter(|p| p.max_channel() >= params.od_floor)
        .map(|p| p.0)
        .collect();
    if chromatic.len() < 2 {
        return Err(Error::InsufficientChromatic(format!(
            "{} pixel(s) above OD floor {}",
            chromatic.len(),
            params.od_floor
        )));
    }
    let n = chromatic.len() as f64;
    let mut mean = [0.0; 3];
    for p in &chromatic {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &chromatic {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= 1e-4 * l1 {
        return Err(Error::InsufficientChromatic(format!(
            "optical densities span fewer than two stain directions (eigenvalues {l1:.3e}, {l2:.3e})"
        )));
    }
    let e1 = eig.eigenvectors.column(order[0]);
    let e2 = eig.eigenvectors.column(order[1]);
    let (e1, e2) = ([e1[0], e1[1], e1[2]], [e2[0], e2[1], e2[2]]);

    // Angles are measured from the mean direction projected into the plane,
    // so the non-negative cone never straddles the ±π cut.
    let m_proj = [dot(mean, e1), dot(mean, e2)];
    let m_norm = (m_proj[0].powi(2) + m_proj[1].powi(2)).sqrt();
    if m_norm < 1e-12 {
        return Err(Error::InsufficientChromatic("mean density orthogonal to stain plane".into()));
    }
    let u = [m_proj[0] / m_norm, m_proj[1] / m_norm];
    let mut angles: Vec<f64> = chromatic
        .iter()
        .map(|p| {
            let (t1, t2) = (dot(*p, e1), dot(*p, e2));
            let a = t1 * u[0] + t2 * u[1];
            let b = -t1 * u[1] + t2 * u[0];
            b.atan2(a)
        })
        .collect();
    let lo = percentile_mut(&mut angles, params.angle_percentile).expect("non-empty");
    let hi = percentile_mut(&mut angles, 100.0 - params.angle_percentile).expect("non-empty");
    let direction = |phi: f64| {
        let (c, s) = (phi.cos(), phi.sin());
        // Rotate back from the mean-aligned frame into (e1, e2).
        let (a, b) = (c * u[0] - s * u[1], c * u[1] + s * u[0]);
        let v = [a * e1[0] + b * e2[0], a * e1[1] + b * e2[1], a * e1[2] + b * e2[2]];
        unit([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)])
    };
    let (v1, v2) = match (direction(lo), direction(hi)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InsufficientChromatic("stain direction clamped to zero".into())),
    };
    if dot(v1, v2) > 1.0 - 1e-6 {
        return Err(Error::InsufficientChromatic("stain directions coincide".into()));
    }
    // Hematoxylin absorbs more in the blue channel.
    let (h, e) = if v1[2] >= v2[2] { (v1, v2) } else { (v2, v1) };
    Ok(StainMatrix::from_columns(h, e))
}

/// Per-pixel non-negative least-squares unmixing against a fixed matrix.
#[derive(Debug, Clone, Copy)]
pub struct Unmixer {
    h: [f64; 3],
    e: [f64; 3],
    hh: f64,
    ee: f64,
    he: f64,
    det: f64,
}

impl Unmixer {
    pub fn new(m: &StainMatrix) -> Result<Self> {
        let (h, e) = (m.column(0), m.column(1));
        let (hh, ee, he) = (dot(h, h), dot(e, e), dot(h, e));
        let det = hh * ee - he * he;
        if !(det > 1e-10 * hh.max(ee).max(1e-300)) || hh <= 0.0 || ee <= 0.0 {
            return Err(Error::Numerical("singular stain matrix".into()));
        }
        Ok(Unmixer { h, e, hh, ee, he, det })
    }

    fn residual(&self, od: [f64; 3], s: [f64; 2]) -> f64 {
        (0..3).map(|c| (od[c] - self.h[c] * s[0] - self.e[c] * s[1]).powi(2)).sum()
    }

    pub fn unmix(&self, od: OdPixel) -> [f64; 2] {
        let od = od.0;
        let (bh, be) = (dot(self.h, od), dot(self.e, od));
        let s0 = (self.ee * bh - self.he * be) / self.det;
        let s1 = (self.hh * be - self.he * bh) / self.det;
        if s0 >= 0.0 && s1 >= 0.0 {
            return [s0, s1];
        }
        // Optimum lies on a face of the non-negative quadrant.
        let only_h = [(bh / self.hh).max(0.0), 0.0];
        let only_e = [0.0, (be / self.ee).max(0.0)];
        if self.residual(od, only_h) <= self.residual(od, only_e) {
            only_h
        } else {
            only_e
        }
    }
}

pub fn saturation_coefficients(od: &[OdPixel], matrix: &StainMatrix) -> Result<Vec<[f64; 2]>> {
    let u = Unmixer::new(matrix)?;
    Ok(od.iter().map(|&p| u.unmix(p)).collect())
}

/// Stain matrix plus per-stain 99th-percentile saturations of a pixel pool.
pub fn estimate_profile(od: &[OdPixel], params: &MacenkoParams, seed: u64, n_tiles: usize) -> Result<StainProfile> {
    let matrix = estimate_stain_matrix(od, params)?;
    let sats = saturation_coefficients(od, &matrix)?;
    let mut sat99 = [0.0; 2];
    for (k, s) in sat99.iter_mut().enumerate() {
        let mut col: Vec<f64> = sats.iter().map(|v| v[k]).collect();
        *s = percentile_mut(&mut col, 99.0).unwrap_or(0.0);
    }
    if sat99.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InsufficientChromatic(format!("99th-percentile saturation is zero: {sat99:?}")));
    }
    Ok(StainProfile {
        stain_matrix: matrix,
        sat_ref99: sat99,
        seed,
        n_tiles,
    })
}

/// Reference profile from pooled, luminosity-corrected tiles.
pub fn global_reference(tiles: &[Raster], plan: &SamplePlan, params: &MacenkoParams) -> Result<StainProfile> {
    if tiles.is_empty() {
        return Err(Error::invalid("global reference needs at least one tile"));
    }
    let od = sample_od_pixels(tiles, plan.pixel_budget, plan.seed, "global");
    estimate_profile(&od, params, plan.seed, tiles.len())
}

/// Slide profile from that slide's sampled, luminosity-corrected tiles.
pub fn slide_profile(tiles: &[Raster], slide_id: &str, plan: &SamplePlan, params: &MacenkoParams) -> Result<StainProfile> {
    if tiles.is_empty() {
        return Err(Error::invalid(format!("slide {slide_id}: no tiles for stain estimation")));
    }
    let od = sample_od_pixels(tiles, plan.pixel_budget, plan.seed, &format!("slide/{slide_id}"));
    estimate_profile(&od, params, plan.seed, tiles.len())
}

/// Rescales slide saturations to the global pseudo-maxima and re-synthesises
/// with the global stain matrix.
pub fn normalise_tile(tile: &Raster, slide: &StainProfile, global: &StainProfile) -> Result<Raster> {
    tile.require_rgb("normalise_tile")?;
    if slide.sat_ref99.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("slide saturation pseudo-maximum is zero"));
    }
    let unmix = Unmixer::new(&slide.stain_matrix)?;
    let scale = [
        global.sat_ref99[0] / slide.sat_ref99[0],
        global.sat_ref99[1] / slide.sat_ref99[1],
    ];
    tile.map_rgb(|p| {
        let s = unmix.unmix(to_od(p, BACKGROUND));
        let od = global.stain_matrix.apply([s[0] * scale[0], s[1] * scale[1]]);
        from_od(od, BACKGROUND)
    })
}
