//! Synthetic H&E-like slides with known expression ground truth.
//!
//! Scenes are defined in micrometres, so one scene can be rendered at any
//! pixel size. Each slide carries two latent tissue traits: `a` drives
//! nuclear density and stromal haematoxylin, `b` the fraction of fibrous
//! stroma and stromal eosin. A
//! subset of genes is a linear function of these traits plus noise, the
//! rest are pure noise. Slides also vary in stain vectors and intensities
//! so that stain normalisation has something to undo.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expression::{samples_to_tsv, ExpressionMatrix, SampleInfo, Split};
use crate::lme::CountRow;
use crate::predict::{rois_to_tsv, Roi};
use crate::raster::{from_od, Raster, Slide, SlideMeta};
use crate::stain::{stream_rng, StainMatrix, BACKGROUND};
use crate::tsv::{fmt_f64, Writer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub n_slides: usize,
    /// Leading slides assigned to the training split; the rest are validation.
    pub n_train: usize,
    pub n_genes: usize,
    pub n_linked: usize,
    pub mpp: f64,
    pub size_um: f64,
    pub level_factors: Vec<f64>,
    pub rois_per_slide: usize,
    pub roi_size_um: f64,
    pub n_neg_controls: usize,
    /// Every k-th slide gets an out-of-focus region; 0 disables.
    pub defocus_every: usize,
    pub cohort: String,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 0,
            n_slides: 15,
            n_train: 10,
            n_genes: 20,
            n_linked: 5,
            mpp: 0.452,
            size_um: 678.0,
            level_factors: vec![1.0, 4.0, 16.0],
            rois_per_slide: 4,
            roi_size_um: 300.0,
            n_neg_controls: 6,
            defocus_every: 4,
            cohort: "SYN".into(),
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.n_genes == 0 {
            return Err(Error::invalid("fixture needs at least one slide and one gene"));
        }
        if self.n_train > self.n_slides || self.n_linked > self.n_genes {
            return Err(Error::invalid("n_train <= n_slides and n_linked <= n_genes required"));
        }
        if !(self.mpp > 0.0) || !(self.size_um > 0.0) || !(self.roi_size_um > 0.0) {
            return Err(Error::invalid("mpp, size_um and roi_size_um must be positive"));
        }
        if self.n_neg_controls == 0 {
            return Err(Error::invalid("at least one negative-control probe required"));
        }
        let side = (self.rois_per_slide as f64).sqrt().ceil();
        if self.rois_per_slide > 0 && side * self.roi_size_um > self.size_um {
            return Err(Error::invalid("ROIs do not fit on the slide"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTruth {
    pub gene_id: String,
    pub linked: bool,
    pub coef_a: f64,
    pub coef_b: f64,
}

/// Physical description of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub slide_id: String,
    pub seed: u64,
    pub size_um: f64,
    pub a: f64,
    pub b: f64,
    pub stain: StainMatrix,
    pub k_h: f64,
    pub k_e: f64,
    /// Tissue superellipse centre and semi-axes, µm.
    pub tissue: [f64; 4],
    /// Out-of-focus disc `(cx, cy, r)`, µm.
    pub defocus: Option<[f64; 3]>,
}

impl Scene {
    /// Probability that a 12 µm cell without a red cell holds a nucleus.
    pub fn nuclear_occupancy(&self) -> f64 {
        0.45 + 0.15 * self.a
    }

    /// Area fraction of fibrous patches.
    pub fn fibre_fraction(&self) -> f64 {
        0.3 + 0.1 * self.b
    }

    /// Haematoxylin saturation of stroma between fibre strands.
    pub fn stroma_haematoxylin(&self) -> f64 {
        0.40 + 0.05 * self.a
    }

    /// Eosin saturation of stroma between fibre strands.
    pub fn stroma_eosin(&self) -> f64 {
        (0.08 + 0.05 * self.b).max(0.0)
    }

}

const NUCLEUS_CELL_UM: f64 = 12.0;
const NUCLEUS_RADIUS_UM: f64 = 3.4;
const FIELD_SCALE_UM: f64 = 150.0;
const FIELD_GAIN: f64 = 0.35;
const GRAIN: f64 = 0.8;
const RED_CELL_P: f64 = 0.14;
const RED_CELL_RADIUS_UM: f64 = 2.8;
const GRAIN_CELL_UM: f64 = 0.8;

fn hash3(a: i64, b: i64, seed: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 31)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    h
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in [0, 1).
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (smooth(fx - ix), smooth(fy - iy));
    let (ix, iy) = (ix as i64, iy as i64);
    let v = |dx: i64, dy: i64| unit(hash3(ix + dx, iy + dy, seed));
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
    let bot = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
    top + (bot - top) * ty
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    smooth(((x - e0) / (e1 - e0)).clamp(0.0, 1.0))
}

impl Scene {
    /// Low-frequency density modulation in [−1, 1].
    pub fn field(&self, x: f64, y: f64) -> f64 {
        2.0 * value_noise(x, y, FIELD_SCALE_UM, self.seed ^ 0xf1e1d) - 1.0
    }

    fn in_tissue(&self, x: f64, y: f64) -> f64 {
        let [cx, cy, rx, ry] = self.tissue;
        let wobble = 0.06 * (value_noise(x, y, 90.0, self.seed ^ 0x70b) - 0.5);
        let d = ((x - cx) / rx).powi(4) + ((y - cy) / ry).powi(4);
        1.0 - smoothstep(0.9 + wobble, 1.0 + wobble, d.sqrt())
    }

    fn defocus_weight(&self, x: f64, y: f64) -> f64 {
        match self.defocus {
            Some([cx, cy, r]) => 1.0 - smoothstep(0.8 * r, r, ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()),
            None => 0.0,
        }
    }

    /// Body in grid cell `(ix, iy)`: centre, radius and kind (0 nucleus,
    /// 1 red cell). Red cells ignore the latents.
    fn body_in_cell(&self, ix: i64, iy: i64) -> Option<[f64; 4]> {
        let h = hash3(ix, iy, self.seed ^ 0x4e5c);
        let (ccx, ccy) = ((ix as f64 + 0.5) * NUCLEUS_CELL_UM, (iy as f64 + 0.5) * NUCLEUS_CELL_UM);
        let u = unit(h);
        let kind = if u < RED_CELL_P {
            1.0
        } else {
            let p = (self.nuclear_occupancy() * (1.0 + FIELD_GAIN * self.field(ccx, ccy))).clamp(0.0, 1.0);
            if (u - RED_CELL_P) / (1.0 - RED_CELL_P) >= p {
                return None;
            }
            0.0
        };
        let h2 = hash3(ix, iy, h);
        let ox = (unit(h2) - 0.5) * (NUCLEUS_CELL_UM - 2.0 * NUCLEUS_RADIUS_UM);
        let oy = (unit(hash3(iy, ix, h2)) - 0.5) * (NUCLEUS_CELL_UM - 2.0 * NUCLEUS_RADIUS_UM);
        let r = if kind == 1.0 { RED_CELL_RADIUS_UM } else { NUCLEUS_RADIUS_UM * (0.85 + 0.3 * unit(h2 >> 7)) };
        Some([ccx + ox, ccy + oy, r, kind])
    }

    fn body_layout(&self) -> BodyLayout {
        let n = (self.size_um / NUCLEUS_CELL_UM).ceil() as i64 + 2;
        let cells = (0..n * n).map(|k| self.body_in_cell(k % n - 1, k / n - 1)).collect();
        BodyLayout { n, cells }
    }

    /// Nuclear and red-cell coverage in [0, 1]; `soft` widens the edges.
    fn bodies(&self, x: f64, y: f64, soft: f64, layout: Option<&BodyLayout>) -> [f64; 2] {
        let (gx, gy) = ((x / NUCLEUS_CELL_UM).floor() as i64, (y / NUCLEUS_CELL_UM).floor() as i64);
        let mut cover = [0.0f64; 2];
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ix, iy) = (gx + dx, gy + dy);
                let cell = match layout {
                    Some(l) if (-1..l.n - 1).contains(&ix) && (-1..l.n - 1).contains(&iy) => l.cells[((iy + 1) * l.n + ix + 1) as usize],
                    _ => self.body_in_cell(ix, iy),
                };
                if let Some([cx, cy, r, kind]) = cell {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    let edge = 0.35 + soft;
                    let k = kind as usize;
                    cover[k] = cover[k].max(1.0 - smoothstep(r - edge, r + edge, d));
                }
            }
        }
        cover
    }

    /// Fibre strand intensity in [0, 1], nonzero inside fibrous patches.
    fn fibre(&self, x: f64, y: f64, soft: f64) -> f64 {
        let patch = value_noise(x, y, 20.0, self.seed ^ 0xf1b);
        // Patch noise is roughly symmetric around 0.5; map fraction to a cut.
        let cut = 1.0 - self.fibre_fraction();
        let inside = smoothstep(cut - 0.04, cut + 0.04, patch);
        if inside == 0.0 {
            return 0.0;
        }
        let warp = 6.0 * value_noise(x, y, 20.0, self.seed ^ 0x3a7);
        let phase = (x * 0.8 + y * 0.6 + warp) / 7.0 * std::f64::consts::TAU;
        let strand = smoothstep(0.2 - soft, 0.8 + soft, phase.sin() * 0.5 + 0.5);
        inside * strand
    }

    /// Stain saturations (H, E) at a physical point.
    pub fn saturations(&self, x: f64, y: f64) -> [f64; 2] {
        self.saturations_with(x, y, None)
    }

    fn saturations_with(&self, x: f64, y: f64, layout: Option<&BodyLayout>) -> [f64; 2] {
        let tissue = self.in_tissue(x, y);
        if tissue <= 0.0 {
            return [0.01, 0.01];
        }
        let blur = self.defocus_weight(x, y);
        let soft = 2.5 * blur;
        let [nuc, red] = self.bodies(x, y, soft, layout);
        let fib = self.fibre(x, y, soft);
        let grain_amp = GRAIN * (1.0 - blur);
        let g1 = value_noise(x, y, GRAIN_CELL_UM, self.seed ^ 0x91) - 0.5;
        let g2 = value_noise(x, y, GRAIN_CELL_UM * 1.4, self.seed ^ 0x92) - 0.5;
        let mut sh = self.stroma_haematoxylin() - 0.08 * fib + grain_amp * 0.5 * g1;
        let mut se = self.stroma_eosin() + 0.30 * fib + grain_amp * 0.3 * g2;
        let chrom = 1.0 + grain_amp * 0.3 * (value_noise(x, y, GRAIN_CELL_UM, self.seed ^ 0x93) - 0.5);
        sh = sh * (1.0 - nuc) + chrom * nuc;
        se = se * (1.0 - nuc) + 0.15 * nuc;
        sh = sh * (1.0 - red) + 0.05 * red;
        se = se * (1.0 - red) + 0.8 * red;
        let bg = 0.01;
        [bg + (sh.max(0.0) - bg) * tissue, bg + (se.max(0.0) - bg) * tissue]
    }

    pub fn colour(&self, x: f64, y: f64) -> [u8; 3] {
        self.colour_with(x, y, None)
    }

    fn colour_with(&self, x: f64, y: f64, layout: Option<&BodyLayout>) -> [u8; 3] {
        let [sh, se] = self.saturations_with(x, y, layout);
        let od = self.stain.apply([self.k_h * sh, self.k_e * se]);
        from_od(od, BACKGROUND)
    }

    pub fn width_px(&self, mpp: f64) -> usize {
        (self.size_um / mpp).round() as usize
    }

    /// Point-samples the scene at pixel centres.
    pub fn render(&self, mpp: f64) -> Raster {
        let n = self.width_px(mpp);
        let layout = self.body_layout();
        Raster::from_fn_rgb(n, n, |x, y| self.colour_with((x as f64 + 0.5) * mpp, (y as f64 + 0.5) * mpp, Some(&layout)))
    }

    pub fn render_slide(&self, mpp: f64, factors: &[f64]) -> Result<Slide> {
        let n = self.width_px(mpp);
        let meta = SlideMeta::with_factors(self.slide_id.clone(), mpp, n, n, factors);
        Slide::from_level0(meta, self.render(mpp))
    }

    /// Mean of the density field over a square, sampled on a 10×10 grid.
    pub fn field_mean(&self, x0: f64, y0: f64, size: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                s += self.field(x0 + (i as f64 + 0.5) * size / 10.0, y0 + (j as f64 + 0.5) * size / 10.0);
            }
        }
        s / 100.0
    }
}

struct BodyLayout {
    n: i64,
    cells: Vec<Option<[f64; 4]>>,
}

const RUIFROK_H: [f64; 3] = [0.65, 0.70, 0.29];
const RUIFROK_E: [f64; 3] = [0.07, 0.99, 0.11];

/// Random non-negative unit vector near `base`.
pub fn perturb_unit(base: [f64; 3], scale: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let v: Vec<f64> = base.iter().map(|&c| (c + rng.random_range(-scale..scale)).max(0.01)).collect();
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Latents spread evenly over [−1.6, 1.6] in a random order.
fn stratified(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.into_iter()
        .map(|k| -1.6 + 3.2 * (k as f64 + 0.5 + rng.random_range(-0.1..0.1)) / n as f64)
        .collect()
}

pub const LINKED_PATTERNS: [(f64, f64); 5] = [(1.0, 0.15), (0.15, 1.0), (-1.0, 0.15), (0.15, -1.0), (1.0, -0.15)];
pub const BASE_EXPRESSION: f64 = 6.0;
const LABEL_NOISE: f64 = 0.05;
const NOISE_GENE_SD: f64 = 0.7;

pub fn gene_truths(cfg: &FixtureConfig) -> Vec<GeneTruth> {
    (0..cfg.n_genes)
        .map(|g| {
            if g < cfg.n_linked {
                let (ca, cb) = LINKED_PATTERNS[g % LINKED_PATTERNS.len()];
                GeneTruth {
                    gene_id: format!("LNK{g:02}"),
                    linked: true,
                    coef_a: ca,
                    coef_b: cb,
                }
            } else {
                GeneTruth {
                    gene_id: format!("NSE{g:02}"),
                    linked: false,
                    coef_a: 0.0,
                    coef_b: 0.0,
                }
            }
        })
        .collect()
}

pub fn slide_id(i: usize) -> String {
    format!("SYN-{i:03}")
}

/// Scene parameters for every slide; training and validation slides are
/// stratified separately.
pub fn scenes(cfg: &FixtureConfig) -> Vec<Scene> {
    let mut rng = stream_rng(cfg.seed, "fixture/latents");
    let n_val = cfg.n_slides - cfg.n_train;
    let mut a = stratified(cfg.n_train, &mut rng);
    a.extend(stratified(n_val, &mut rng));
    let mut b = stratified(cfg.n_train, &mut rng);
    b.extend(stratified(n_val, &mut rng));
    (0..cfg.n_slides)
        .map(|i| {
            let id = slide_id(i);
            let mut r = stream_rng(cfg.seed, &format!("fixture/scene/{id}"));
            let s = cfg.size_um;
            let defocus = (cfg.defocus_every > 0 && i % cfg.defocus_every == cfg.defocus_every - 1)
                .then(|| [s * r.random_range(0.3..0.7), s * r.random_range(0.3..0.7), s * 0.22]);
            Scene {
                slide_id: id,
                seed: r.random(),
                size_um: s,
                a: a[i],
                b: b[i],
                stain: StainMatrix::from_columns(perturb_unit(RUIFROK_H, 0.05, &mut r), perturb_unit(RUIFROK_E, 0.05, &mut r)),
                k_h: r.random_range(0.85..1.15),
                k_e: r.random_range(0.85..1.15),
                tissue: [0.5 * s, 0.5 * s, 0.485 * s, 0.485 * s],
                defocus,
            }
        })
        .collect()
}

pub fn rois_for(scene: &Scene, cfg: &FixtureConfig, mpp: f64) -> Vec<Roi> {
    let side = (cfg.rois_per_slide as f64).sqrt().ceil() as usize;
    let block = side as f64 * cfg.roi_size_um;
    let margin = (cfg.size_um - block) / 2.0;
    (0..cfg.rois_per_slide)
        .map(|k| {
            let (i, j) = (k % side, k / side);
            Roi {
                roi_id: format!("{}-R{k}", scene.slide_id),
                slide_id: scene.slide_id.clone(),
                x0: ((margin + i as f64 * cfg.roi_size_um) / mpp).round() as usize,
                y0: ((margin + j as f64 * cfg.roi_size_um) / mpp).round() as usize,
                size_um: cfg.roi_size_um,
            }
        })
        .collect()
}

/// Everything the pipeline consumes, plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub scenes: Vec<Scene>,
    pub slides: Vec<Slide>,
    pub genes: Vec<GeneTruth>,
    pub expression: ExpressionMatrix,
    pub samples: Vec<SampleInfo>,
    pub rois: Vec<Roi>,
    pub st_counts: Vec<CountRow>,
    pub neg_controls: Vec<CountRow>,
}

pub fn generate(cfg: &FixtureConfig) -> Result<Fixture> {
    cfg.validate()?;
    let scenes = scenes(cfg);
    let genes = gene_truths(cfg);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream_rng(cfg.seed, "fixture/expression");
    let values: Vec<Vec<f64>> = genes
        .iter()
        .map(|g| {
            scenes
                .iter()
                .map(|s| {
                    if g.linked {
                        BASE_EXPRESSION + g.coef_a * s.a + g.coef_b * s.b + LABEL_NOISE * std.sample(&mut rng)
                    } else {
                        BASE_EXPRESSION + NOISE_GENE_SD * std.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect();
    let expression = ExpressionMatrix::new(
        genes.iter().map(|g| g.gene_id.clone()).collect(),
        scenes.iter().map(|s| s.slide_id.clone()).collect(),
        values,
    )?;
    let samples = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| SampleInfo {
            sample_id: s.slide_id.clone(),
            cohort: cfg.cohort.clone(),
            split: if i < cfg.n_train { Split::Train } else { Split::Validation },
        })
        .collect();

    let mut rois = Vec::new();
    let mut st_counts = Vec::new();
    let mut neg_controls = Vec::new();
    let mut st_rng = stream_rng(cfg.seed, "fixture/st");
    for s in &scenes {
        let u = 0.3 * std.sample(&mut st_rng);
        for roi in rois_for(s, cfg, cfg.mpp) {
            let (x, y) = (roi.x0 as f64 * cfg.mpp, roi.y0 as f64 * cfg.mpp);
            let local_occ = s.nuclear_occupancy() * (1.0 + FIELD_GAIN * s.field_mean(x, y, roi.size_um));
            let a_local = (local_occ - 0.45) / 0.15;
            let negs: Vec<f64> = (0..cfg.n_neg_controls).map(|_| 8.0 * (0.15 * std.sample(&mut st_rng)).exp()).collect();
            let neg_mean = negs.iter().sum::<f64>() / negs.len() as f64;
            for (k, v) in negs.iter().enumerate() {
                neg_controls.push(CountRow {
                    slide_id: s.slide_id.clone(),
                    roi_id: roi.roi_id.clone(),
                    feature: format!("NegProbe-{k}"),
                    raw_count: *v,
                });
            }
            for g in &genes {
                let signal = if g.linked {
                    g.coef_a * a_local + g.coef_b * s.b
                } else {
                    NOISE_GENE_SD * std.sample(&mut st_rng)
                };
                let log2v = 3.0 + signal + u + 0.25 * std.sample(&mut st_rng);
                st_counts.push(CountRow {
                    slide_id: s.slide_id.clone(),
                    roi_id: roi.roi_id.clone(),
                    feature: g.gene_id.clone(),
                    raw_count: neg_mean * log2v.exp2(),
                });
            }
            rois.push(roi);
        }
    }
    let slides = render_all(&scenes, cfg.mpp, &cfg.level_factors)?;
    Ok(Fixture {
        config: cfg.clone(),
        scenes,
        slides,
        genes,
        expression,
        samples,
        rois,
        st_counts,
        neg_controls,
    })
}

pub fn render_all(scenes: &[Scene], mpp: f64, factors: &[f64]) -> Result<Vec<Slide>> {
    use rayon::prelude::*;
    scenes.par_iter().map(|s| s.render_slide(mpp, factors)).collect()
}

pub fn counts_to_tsv(rows: &[CountRow], feature_col: &str) -> String {
    let mut w = Writer::new(&["slide_id", "roi_id", feature_col, "raw_count"]);
    for r in rows {
        w.row(&[r.slide_id.clone(), r.roi_id.clone(), r.feature.clone(), fmt_f64(r.raw_count)]);
    }
    w.finish()
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Fixture {
    /// Writes `slides/`, expression and sample tables, ROIs, ST counts and
    /// the ground truth under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let slides = dir.join("slides");
        std::fs::create_dir_all(&slides).map_err(|e| Error::io(&slides, e))?;
        for s in &self.slides {
            s.save(&slides)?;
        }
        self.expression.write(dir.join("expression.tsv"))?;
        write(&dir.join("samples.tsv"), samples_to_tsv(&self.samples))?;
        write(&dir.join("rois.tsv"), rois_to_tsv(&self.rois))?;
        write(&dir.join("st_counts.tsv"), counts_to_tsv(&self.st_counts, "gene_id"))?;
        write(&dir.join("neg_controls.tsv"), counts_to_tsv(&self.neg_controls, "probe"))?;
        let mut w = Writer::new(&["gene_id", "linked", "coef_a", "coef_b"]);
        for g in &self.genes {
            w.row(&[g.gene_id.clone(), g.linked.to_string(), fmt_f64(g.coef_a), fmt_f64(g.coef_b)]);
        }
        write(&dir.join("truth_genes.tsv"), w.finish())?;
        write(
            &dir.join("truth_scenes.json"),
            serde_json::to_string_pretty(&self.scenes)? + "\n",
        )?;
        write(&dir.join("fixture.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }
}
