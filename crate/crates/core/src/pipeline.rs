//! Stage orchestration over an input and an output directory, and an
//! in-memory run that yields the same artifacts without touching disk.
//!
//! Input layout: `slides/`, `expression.tsv`, `samples.tsv` and, for the
//! spatial stages, `rois.tsv`, `st_counts.tsv`, `neg_controls.tsv`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expression::{median_offsets, read_samples, test_phase_normalise, variance_filter, ExpressionMatrix, Offsets, SampleInfo, Split};
use crate::lme::{lme_batch, lme_to_tsv, normalise_st, read_counts, slide_rho_to_tsv, slide_spearman, BatchResult, GeneDesign, SlideRho};
use crate::predict::{
    aggregate_roi, fit_baseline, heatmap, load_models, models_to_json, predict_tile, predictions_to_tsv, read_predictions,
    read_rois, read_roi_values, read_slide_values, roi_values_to_tsv, run_external_predictor, slide_means,
    slide_values_to_tsv, sort_predictions, tile_features, BaselineModel, HeatmapRange, RoiValue, SlideValue, TilePrediction, TileRef,
};
use crate::raster::{sidecar_path, Raster, Slide, SlideMeta};
use crate::segmentation::{intersect, load_annotations, rasterise_annotations, tissue_mask, BinaryMask, TissueParams};
use crate::stain::{
    correct_luminosity, correct_luminosity_px, estimate_profile, luminosity_ref, normalise_tile, sample_indices, sample_od_pixels_with, LuminosityRef,
    MacenkoParams, SamplePlan, StainProfile,
};
use crate::stats::{gene_stats, read_stats, select_genes, stats_to_tsv, GenePairs, GeneStat, StatsOptions};
use crate::tiler::{manifest_to_string, read_manifest, tile_filename, tile_slide, ManifestRow, TileSpec};
use crate::tsv::{Table, Writer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    pub tiles_per_slide: usize,
    pub global_tiles: usize,
    pub pixel_budget: usize,
    pub od_floor: f64,
    pub angle_percentile: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        let plan = SamplePlan::default();
        let mac = MacenkoParams::default();
        StainConfig {
            tiles_per_slide: plan.tiles_per_slide,
            global_tiles: plan.global_tiles,
            pixel_budget: plan.pixel_budget,
            od_floor: mac.od_floor,
            angle_percentile: mac.angle_percentile,
        }
    }
}

impl StainConfig {
    pub fn plan(&self, seed: u64) -> SamplePlan {
        SamplePlan {
            seed,
            tiles_per_slide: self.tiles_per_slide,
            global_tiles: self.global_tiles,
            pixel_budget: self.pixel_budget,
        }
    }

    pub fn macenko(&self) -> MacenkoParams {
        MacenkoParams {
            od_floor: self.od_floor,
            angle_percentile: self.angle_percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpressionConfig {
    pub min_variance: f64,
    /// Cohort every other cohort is median-shifted onto; `None` skips it.
    pub reference_cohort: Option<String>,
    /// Samples used for the variance filter and the reference medians.
    pub fit_split: Split,
}

impl Default for ExpressionConfig {
    fn default() -> Self {
        ExpressionConfig {
            min_variance: 0.01,
            reference_cohort: None,
            fit_split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub ridge_lambda: f64,
    pub train_split: Split,
    pub eval_split: Split,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            ridge_lambda: 1.0,
            train_split: Split::Train,
            eval_split: Split::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmeConfig {
    pub st_min_variance: f64,
    pub alpha: f64,
}

impl Default for LmeConfig {
    fn default() -> Self {
        LmeConfig {
            st_min_variance: crate::lme::ST_MIN_VARIANCE,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    /// Target downsample factor; the nearest pyramid level is used.
    pub level_factor: f64,
    pub cell_px: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            level_factor: 16.0,
            cell_px: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub tissue: TissueParams,
    pub tile: TileSpec,
    pub stain: StainConfig,
    pub expression: ExpressionConfig,
    pub predict: PredictConfig,
    pub stats: StatsOptions,
    pub lme: LmeConfig,
    pub heatmap: HeatmapConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tile.validate()?;
        self.stain.plan(self.seed).validate()?;
        if !(self.tissue.hue_threshold >= 0.0 && self.tissue.hue_threshold <= 1.0) {
            return Err(Error::invalid("tissue.hue_threshold must be in [0, 1]"));
        }
        if !(self.tissue.level_factor >= 1.0) || !(self.heatmap.level_factor >= 1.0) {
            return Err(Error::invalid("level factors must be >= 1"));
        }
        if !(self.stain.od_floor >= 0.0) || !(self.stain.angle_percentile > 0.0 && self.stain.angle_percentile < 50.0) {
            return Err(Error::invalid("stain.od_floor >= 0 and stain.angle_percentile in (0, 50) required"));
        }
        if !(self.expression.min_variance >= 0.0) || !(self.lme.st_min_variance >= 0.0) {
            return Err(Error::invalid("variance cut-offs must be >= 0"));
        }
        if !(self.predict.ridge_lambda >= 0.0) || !self.predict.ridge_lambda.is_finite() {
            return Err(Error::invalid("predict.ridge_lambda must be finite and >= 0"));
        }
        for (name, v) in [("stats.alpha", self.stats.alpha), ("stats.padj_max", self.stats.padj_max), ("lme.alpha", self.lme.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if self.heatmap.cell_px == 0 {
            return Err(Error::invalid("heatmap.cell_px must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PipelineConfig::from_json(&read_text(path.as_ref())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Input directory layout.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub root: PathBuf,
}

impl Inputs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Inputs { root: root.into() }
    }
    pub fn slides(&self) -> PathBuf {
        self.root.join("slides")
    }
    pub fn expression(&self) -> PathBuf {
        self.root.join("expression.tsv")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.tsv")
    }
    pub fn rois(&self) -> PathBuf {
        self.root.join("rois.tsv")
    }
    pub fn st_counts(&self) -> PathBuf {
        self.root.join("st_counts.tsv")
    }
    pub fn neg_controls(&self) -> PathBuf {
        self.root.join("neg_controls.tsv")
    }
    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations")
    }
}

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn mask(&self, slide_id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{slide_id}.png"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.tsv")
    }
    /// Relative to the output root, as recorded in the manifest.
    pub fn tile_rel(slide_id: &str, x0: usize, y0: usize) -> String {
        format!("tiles/{slide_id}/{}", tile_filename(slide_id, x0, y0))
    }
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
    pub fn luminosity(&self) -> PathBuf {
        self.root.join("stain").join("luminosity.tsv")
    }
    pub fn global_profile(&self) -> PathBuf {
        self.root.join("stain").join("global.json")
    }
    pub fn slide_profile(&self, slide_id: &str) -> PathBuf {
        self.root.join("stain").join("slides").join(format!("{slide_id}.json"))
    }
    pub fn normalised(&self, slide_id: &str, x0: usize, y0: usize) -> PathBuf {
        self.root.join("norm").join(slide_id).join(format!("{slide_id}__x{x0}_y{y0}.png"))
    }
    pub fn expression(&self) -> PathBuf {
        self.root.join("expression").join("filtered.tsv")
    }
    pub fn offsets(&self, cohort: &str) -> PathBuf {
        self.root.join("expression").join(format!("offsets_{cohort}.tsv"))
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("predict").join("models.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predict").join("tiles.tsv")
    }
    pub fn slide_values(&self) -> PathBuf {
        self.root.join("aggregate").join("slides.tsv")
    }
    pub fn roi_values(&self) -> PathBuf {
        self.root.join("aggregate").join("rois.tsv")
    }
    pub fn gene_stats(&self) -> PathBuf {
        self.root.join("stats").join("genes.tsv")
    }
    pub fn selected(&self) -> PathBuf {
        self.root.join("stats").join("selected.tsv")
    }
    pub fn lme(&self) -> PathBuf {
        self.root.join("lme").join("fits.tsv")
    }
    pub fn slide_rho(&self) -> PathBuf {
        self.root.join("lme").join("slide_rho.tsv")
    }
    pub fn heatmap(&self, slide_id: &str, gene_id: &str) -> PathBuf {
        self.root.join("heatmaps").join(slide_id).join(format!("{gene_id}.png"))
    }
}

/// Slide sources in a directory, sorted by path: images with a JSON sidecar
/// and pyramid directories holding `slide.json`.
pub fn list_slides(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(require(dir)?).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_image = matches!(
            p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("png" | "jpg" | "jpeg" | "tif" | "tiff")
        );
        if (p.is_dir() && p.join("slide.json").exists()) || (is_image && sidecar_path(&p).exists()) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Metadata only, without decoding pixels.
pub fn open_meta(path: &Path) -> Result<SlideMeta> {
    if path.is_dir() {
        SlideMeta::load(path.join("slide.json"))
    } else {
        SlideMeta::load(sidecar_path(path))
    }
}

fn slide_metas(dir: &Path) -> Result<BTreeMap<String, SlideMeta>> {
    let mut out = BTreeMap::new();
    for p in list_slides(dir)? {
        let m = open_meta(&p)?;
        if out.contains_key(&m.slide_id) {
            return Err(Error::invalid(format!("duplicate slide id {}", m.slide_id)));
        }
        out.insert(m.slide_id.clone(), m);
    }
    Ok(out)
}

pub fn segment_slide(slide: &Slide, params: &TissueParams) -> Result<BinaryMask> {
    let level = slide.meta.level_nearest(params.level_factor);
    tissue_mask(&slide.levels[level], level, params)
}

pub fn stage_segment(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<usize> {
    let slides = list_slides(&inputs.slides())?;
    for p in &slides {
        let slide = Slide::open(p)?;
        let id = &slide.meta.slide_id;
        let mut mask = segment_slide(&slide, &cfg.tissue)?;
        let ann = inputs.annotations().join(format!("{id}.json"));
        if ann.exists() {
            let polys = load_annotations(&ann)?;
            mask = intersect(&mask, &rasterise_annotations(&polys, &slide.meta, mask.level)?)?;
        }
        let path = out.mask(id);
        ensure_parent(&path)?;
        mask.save_png(&path)?;
        log::info!("{id}: mask {} of {} px at level {}", mask.count(), mask.width() * mask.height(), mask.level);
    }
    Ok(slides.len())
}

/// Accepted tiles as JPEG bytes keyed by manifest path, plus every manifest row.
pub struct Tiling {
    pub rows: Vec<ManifestRow>,
    pub jpegs: Vec<(String, Vec<u8>)>,
}

pub fn tile_one(slide: &Slide, mask: &BinaryMask, spec: &TileSpec) -> Result<Tiling> {
    let records = tile_slide(slide.level0(), &slide.meta, mask, spec)?;
    let mut rows = Vec::with_capacity(records.len());
    let mut jpegs = Vec::new();
    for t in &records {
        let path = t.accepted.then(|| Layout::tile_rel(&t.slide_id, t.x0, t.y0));
        if let Some(p) = &path {
            jpegs.push((p.clone(), t.pixels.encode_jpeg(spec.jpeg_quality)?));
        }
        rows.push(ManifestRow::from_record(t, path));
    }
    Ok(Tiling { rows, jpegs })
}

pub fn stage_tile(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for p in list_slides(&inputs.slides())? {
        let slide = Slide::open(&p)?;
        let id = slide.meta.slide_id.clone();
        let mask = BinaryMask::load_for_slide(out.mask(&id), &slide.meta)?;
        let tiling = tile_one(&slide, &mask, &cfg.tile)?;
        let dir = out.root.join("tiles").join(&id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (rel, bytes) in &tiling.jpegs {
            let path = out.resolve(rel);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        log::info!("{id}: {} of {} tiles accepted", tiling.jpegs.len(), tiling.rows.len());
        rows.extend(tiling.rows);
    }
    write_text(&out.manifest(), &manifest_to_string(&rows))?;
    Ok(rows)
}

/// Luminosity references and stain profiles for every slide with accepted
/// tiles, plus the pooled global profile.
#[derive(Debug, Clone, PartialEq)]
pub struct StainSet {
    pub luminosity: BTreeMap<String, LuminosityRef>,
    pub slides: BTreeMap<String, StainProfile>,
    pub global: StainProfile,
}

fn accepted_by_slide(rows: &[ManifestRow]) -> BTreeMap<String, Vec<&ManifestRow>> {
    let mut by: BTreeMap<String, Vec<&ManifestRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.accepted) {
        by.entry(r.slide_id.clone()).or_default().push(r);
    }
    for v in by.values_mut() {
        v.sort_by(|a, b| a.key().cmp(&b.key()));
    }
    by
}

/// Per slide: sample tiles, take the 95th-percentile luminosity, correct the
/// sample and estimate the stain profile. Globally: sample corrected tiles
/// across all slides and estimate the reference profile.
pub fn estimate_stains<F>(cfg: &PipelineConfig, rows: &[ManifestRow], load: F) -> Result<StainSet>
where
    F: Fn(&ManifestRow) -> Result<Raster> + Sync,
{
    let plan = cfg.stain.plan(cfg.seed);
    let params = cfg.stain.macenko();
    let by = accepted_by_slide(rows);
    if by.is_empty() {
        return Err(Error::invalid("no accepted tiles to estimate stains from"));
    }
    let per_slide: Vec<(String, LuminosityRef, StainProfile)> = by
        .par_iter()
        .map(|(id, tiles)| {
            let idx = sample_indices(tiles.len(), plan.tiles_per_slide, plan.seed, &format!("tiles/{id}"));
            let sample: Vec<Raster> = idx.iter().map(|&i| load(tiles[i])).collect::<Result<_>>()?;
            let lum = luminosity_ref(&sample)?;
            let od = sample_od_pixels_with(
                sample.len(),
                plan.pixel_budget,
                plan.seed,
                &format!("slide/{id}"),
                |i| Ok(&sample[i]),
                |_, p| correct_luminosity_px(p, lum),
            )?;
            let profile = estimate_profile(&od, &params, plan.seed, sample.len()).map_err(|e| match e {
                Error::InsufficientChromatic(m) => Error::InsufficientChromatic(format!("slide {id}: {m}")),
                e => e,
            })?;
            Ok((id.clone(), lum, profile))
        })
        .collect::<Result<_>>()?;
    let luminosity: BTreeMap<String, LuminosityRef> = per_slide.iter().map(|(id, l, _)| (id.clone(), *l)).collect();
    let slides: BTreeMap<String, StainProfile> = per_slide.into_iter().map(|(id, _, p)| (id, p)).collect();

    let pool: Vec<&ManifestRow> = by.values().flatten().copied().collect();
    let idx = sample_indices(pool.len(), plan.global_tiles, plan.seed, "tiles/global");
    let od = sample_od_pixels_with(
        idx.len(),
        plan.pixel_budget,
        plan.seed,
        "global",
        |i| load(pool[idx[i]]),
        |i, p| correct_luminosity_px(p, luminosity[&pool[idx[i]].slide_id]),
    )?;
    let global = estimate_profile(&od, &params, plan.seed, idx.len())?;
    Ok(StainSet {
        luminosity,
        slides,
        global,
    })
}

pub fn luminosity_to_tsv(lum: &BTreeMap<String, LuminosityRef>) -> String {
    let mut w = Writer::new(&["slide_id", "i_ref95"]);
    for (id, l) in lum {
        w.row(&[id.clone(), l.i_ref95.to_string()]);
    }
    w.finish()
}

pub fn read_luminosity(path: &Path) -> Result<BTreeMap<String, LuminosityRef>> {
    let t = Table::read(path)?;
    let [c_id, c_l] = t.columns(["slide_id", "i_ref95"])?;
    let mut out = BTreeMap::new();
    for i in 0..t.rows.len() {
        let v = t.u64_at(i, c_l)?;
        let v = u8::try_from(v).map_err(|_| Error::parse(path, i + 2, format!("i_ref95 {v} out of range")))?;
        out.insert(t.rows[i][c_id].clone(), LuminosityRef::new(v)?);
    }
    Ok(out)
}

fn load_tile(out: &Layout, r: &ManifestRow) -> Result<Raster> {
    let rel = r
        .path
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("accepted tile {}@{},{} has no path", r.slide_id, r.x0, r.y0)))?;
    Raster::load(out.resolve(rel))
}

pub fn stage_stain_estimate(cfg: &PipelineConfig, out: &Layout) -> Result<StainSet> {
    let rows = read_manifest(require(&out.manifest())?)?;
    let set = estimate_stains(cfg, &rows, |r| load_tile(out, r))?;
    write_text(&out.luminosity(), &luminosity_to_tsv(&set.luminosity))?;
    set.global.save(out.global_profile())?;
    let dir = out.root.join("stain").join("slides");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (id, p) in &set.slides {
        p.save(out.slide_profile(id))?;
    }
    Ok(set)
}

pub fn load_stains(out: &Layout, slide_ids: impl IntoIterator<Item = String>) -> Result<StainSet> {
    let luminosity = read_luminosity(&out.luminosity())?;
    let global = StainProfile::load(out.global_profile())?;
    let mut slides = BTreeMap::new();
    for id in slide_ids {
        let p = StainProfile::load(out.slide_profile(&id))?;
        slides.insert(id, p);
    }
    Ok(StainSet {
        luminosity,
        slides,
        global,
    })
}

/// Luminosity correction then stain normalisation onto the global profile.
pub fn normalise(tile: &Raster, slide_id: &str, set: &StainSet) -> Result<Raster> {
    let lum = set
        .luminosity
        .get(slide_id)
        .ok_or_else(|| Error::invalid(format!("no luminosity reference for slide {slide_id}")))?;
    let prof = set
        .slides
        .get(slide_id)
        .ok_or_else(|| Error::invalid(format!("no stain profile for slide {slide_id}")))?;
    normalise_tile(&correct_luminosity(tile, *lum)?, prof, &set.global)
}

pub fn stage_stain_apply(out: &Layout) -> Result<usize> {
    let rows = read_manifest(require(&out.manifest())?)?;
    let by = accepted_by_slide(&rows);
    let set = load_stains(out, by.keys().cloned())?;
    let accepted: Vec<&ManifestRow> = by.values().flatten().copied().collect();
    for id in by.keys() {
        let dir = out.root.join("norm").join(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    accepted.par_iter().try_for_each(|r| {
        let n = normalise(&load_tile(out, r)?, &r.slide_id, &set)?;
        n.save_png(out.normalised(&r.slide_id, r.x0, r.y0))
    })?;
    Ok(accepted.len())
}

/// Variance filter over the fit split and, when a reference cohort is
/// configured, median normalisation of every other cohort onto the
/// reference medians of the fit split. Offsets are returned per cohort.
pub fn prepare_expression(
    cfg: &PipelineConfig,
    m: &ExpressionMatrix,
    samples: &[SampleInfo],
) -> Result<(ExpressionMatrix, Vec<(String, Offsets)>)> {
    let in_fit = |s: &&SampleInfo| s.split == cfg.expression.fit_split && m.sample_index(&s.sample_id).is_some();
    let fit_ids: Vec<String> = samples.iter().filter(in_fit).map(|s| s.sample_id.clone()).collect();
    if fit_ids.is_empty() {
        return Err(Error::invalid(format!("no expression samples in split {}", cfg.expression.fit_split)));
    }
    let filtered = variance_filter(m, cfg.expression.min_variance, &m.indices_of(&fit_ids)?)?;
    let Some(reference) = &cfg.expression.reference_cohort else {
        return Ok((filtered, Vec::new()));
    };
    let reference_fit: Vec<usize> = samples
        .iter()
        .filter(in_fit)
        .filter(|s| &s.cohort == reference)
        .filter_map(|s| filtered.sample_index(&s.sample_id))
        .collect();
    let mut cohorts: Vec<&str> = samples
        .iter()
        .filter(|s| &s.cohort != reference && filtered.sample_index(&s.sample_id).is_some())
        .map(|s| s.cohort.as_str())
        .collect();
    cohorts.sort_unstable();
    cohorts.dedup();
    let mut offsets = Vec::new();
    for c in cohorts {
        let mut fit_set = reference_fit.clone();
        fit_set.extend(samples.iter().filter(|s| s.cohort == c).filter_map(|s| filtered.sample_index(&s.sample_id)));
        offsets.push((c.to_string(), median_offsets(&filtered, samples, c, reference, &fit_set)?));
    }
    let normalised = test_phase_normalise(&filtered, samples, reference, &reference_fit)?;
    Ok((normalised, offsets))
}

pub fn stage_expression(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<ExpressionMatrix> {
    let m = ExpressionMatrix::read(require(&inputs.expression())?)?;
    let samples = read_samples(require(&inputs.samples())?)?;
    let (filtered, offsets) = prepare_expression(cfg, &m, &samples)?;
    log::info!("expression: kept {} of {} genes", filtered.genes.len(), m.genes.len());
    write_text(&out.expression(), &filtered.to_tsv())?;
    for (cohort, o) in offsets {
        write_text(&out.offsets(&cohort), &o.to_tsv())?;
    }
    Ok(filtered)
}

/// Tile features keyed by manifest row, in manifest order.
pub type TileFeatures = Vec<(ManifestRow, [f64; 6])>;

pub fn fit_models(cfg: &PipelineConfig, features: &TileFeatures, m: &ExpressionMatrix, samples: &[SampleInfo]) -> Result<Vec<BaselineModel>> {
    let train: Vec<&str> = samples
        .iter()
        .filter(|s| s.split == cfg.predict.train_split)
        .map(|s| s.sample_id.as_str())
        .collect();
    let tiles: Vec<(String, [f64; 6])> = features
        .iter()
        .filter(|(r, _)| train.contains(&r.slide_id.as_str()))
        .map(|(r, f)| (r.slide_id.clone(), *f))
        .collect();
    let labels: Vec<HashMap<String, f64>> = m
        .genes
        .iter()
        .map(|g| {
            train
                .iter()
                .filter_map(|s| m.value(g, s).map(|v| (s.to_string(), v)))
                .collect()
        })
        .collect();
    fit_baseline(&tiles, &m.genes, &labels, cfg.predict.ridge_lambda)
}

pub fn predict_all(models: &[BaselineModel], features: &TileFeatures) -> Vec<TilePrediction> {
    let mut out: Vec<TilePrediction> = features
        .iter()
        .flat_map(|(r, f)| predict_tile(models, &r.slide_id, r.x0, r.y0, f))
        .collect();
    sort_predictions(&mut out);
    out
}

fn accepted_rows(rows: &[ManifestRow]) -> Vec<ManifestRow> {
    accepted_by_slide(rows).into_values().flatten().cloned().collect()
}

pub fn stage_predict(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout, command: Option<&str>) -> Result<Vec<TilePrediction>> {
    let rows = accepted_rows(&read_manifest(require(&out.manifest())?)?);
    let m = ExpressionMatrix::read(require(&out.expression())?)?;
    let preds = match command {
        Some(cmd) => {
            let refs: Vec<TileRef> = rows
                .iter()
                .map(|r| {
                    let p = out.normalised(&r.slide_id, r.x0, r.y0);
                    require(&p)?;
                    Ok(TileRef {
                        slide_id: r.slide_id.clone(),
                        x0: r.x0,
                        y0: r.y0,
                        path: p.display().to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            let mut p = run_external_predictor(&refs, cmd, &m.genes)?;
            sort_predictions(&mut p);
            p
        }
        None => {
            let samples = read_samples(require(&inputs.samples())?)?;
            let features: TileFeatures = rows
                .par_iter()
                .map(|r| Ok((r.clone(), tile_features(&Raster::load(out.normalised(&r.slide_id, r.x0, r.y0))?)?)))
                .collect::<Result<_>>()?;
            let models = fit_models(cfg, &features, &m, &samples)?;
            write_text(&out.models(), &models_to_json(&models)?)?;
            predict_all(&models, &features)
        }
    };
    write_text(&out.predictions(), &predictions_to_tsv(&preds))?;
    Ok(preds)
}

/// Baseline predictions for tiles already on disk, using saved models.
pub fn predict_with_models(models_path: &Path, tiles: &[TileRef]) -> Result<Vec<TilePrediction>> {
    let models = load_models(models_path)?;
    let mut out: Vec<TilePrediction> = tiles
        .par_iter()
        .map(|t| Ok(predict_tile(&models, &t.slide_id, t.x0, t.y0, &tile_features(&Raster::load(&t.path)?)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    sort_predictions(&mut out);
    Ok(out)
}

fn gene_ids(preds: &[TilePrediction]) -> Vec<String> {
    let mut g: Vec<String> = preds.iter().map(|p| p.gene_id.clone()).collect();
    g.sort_unstable();
    g.dedup();
    g
}

pub fn roi_values(preds: &[TilePrediction], rois: &[crate::predict::Roi], metas: &BTreeMap<String, SlideMeta>, src_px: &HashMap<String, usize>) -> Result<Vec<RoiValue>> {
    let genes = gene_ids(preds);
    let mut by_slide: HashMap<&str, Vec<TilePrediction>> = HashMap::new();
    for p in preds {
        by_slide.entry(&p.slide_id).or_default().push(p.clone());
    }
    let mut out = Vec::new();
    for roi in rois {
        let meta = metas
            .get(&roi.slide_id)
            .ok_or_else(|| Error::invalid(format!("ROI {} refers to unknown slide {}", roi.roi_id, roi.slide_id)))?;
        roi.validate(meta)?;
        let preds = by_slide.get(roi.slide_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let tile_px = src_px.get(&roi.slide_id).copied().unwrap_or(0);
        for g in &genes {
            out.push(RoiValue {
                roi_id: roi.roi_id.clone(),
                slide_id: roi.slide_id.clone(),
                gene_id: g.clone(),
                value: if tile_px == 0 { None } else { aggregate_roi(preds, g, roi, meta.mpp, tile_px) },
            });
        }
    }
    Ok(out)
}

pub fn stage_aggregate(inputs: &Inputs, out: &Layout) -> Result<(Vec<SlideValue>, Option<Vec<RoiValue>>)> {
    let rows = read_manifest(require(&out.manifest())?)?;
    let preds = read_predictions(require(&out.predictions())?)?;
    let mut slides: Vec<String> = rows.iter().map(|r| r.slide_id.clone()).collect();
    slides.sort_unstable();
    slides.dedup();
    let values = slide_means(&preds, &slides, &gene_ids(&preds));
    write_text(&out.slide_values(), &slide_values_to_tsv(&values))?;
    let rois_path = inputs.rois();
    let roi_out = if rois_path.exists() {
        let rois = read_rois(&rois_path)?;
        let metas = slide_metas(&inputs.slides())?;
        let src_px: HashMap<String, usize> = rows.iter().map(|r| (r.slide_id.clone(), r.src_px)).collect();
        let v = roi_values(&preds, &rois, &metas, &src_px)?;
        write_text(&out.roi_values(), &roi_values_to_tsv(&v))?;
        Some(v)
    } else {
        log::info!("{} not found; skipping ROI aggregation", rois_path.display());
        None
    };
    Ok((values, roi_out))
}

/// Slide-level predictions against measured expression for the samples of
/// the evaluation split.
pub fn evaluate(cfg: &PipelineConfig, values: &[SlideValue], m: &ExpressionMatrix, samples: &[SampleInfo]) -> Result<Vec<GeneStat>> {
    let eval: Vec<&str> = samples
        .iter()
        .filter(|s| s.split == cfg.predict.eval_split)
        .map(|s| s.sample_id.as_str())
        .collect();
    let lookup: HashMap<(&str, &str), Option<f64>> = values.iter().map(|v| ((v.slide_id.as_str(), v.gene_id.as_str()), v.value)).collect();
    let mut genes: Vec<GenePairs> = Vec::new();
    for g in &m.genes {
        let pairs: Vec<(Option<f64>, f64)> = eval
            .iter()
            .filter_map(|s| {
                let obs = m.value(g, s)?;
                let pred = lookup.get(&(*s, g.as_str())).copied().flatten();
                Some((pred, obs))
            })
            .collect();
        if pairs.is_empty() {
            continue;
        }
        genes.push(GenePairs {
            gene_id: g.clone(),
            pairs,
        });
    }
    if genes.is_empty() {
        return Err(Error::invalid(format!("no samples of split {} have both predictions and expression", cfg.predict.eval_split)));
    }
    Ok(gene_stats(&genes, &cfg.stats))
}

pub fn stage_stats(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<Vec<GeneStat>> {
    let values = read_slide_values(require(&out.slide_values())?)?;
    let m = ExpressionMatrix::read(require(&out.expression())?)?;
    let samples = read_samples(require(&inputs.samples())?)?;
    let stats = evaluate(cfg, &values, &m, &samples)?;
    write_text(&out.gene_stats(), &stats_to_tsv(&stats))?;
    Ok(stats)
}

pub fn stage_select(cfg: &PipelineConfig, out: &Layout) -> Result<Vec<GeneStat>> {
    let stats = read_stats(require(&out.gene_stats())?)?;
    let sel = select_genes(&stats, cfg.stats.r2_min, cfg.stats.padj_max);
    write_text(&out.selected(), &stats_to_tsv(&sel))?;
    Ok(sel)
}

/// Per-gene mixed-model designs pairing ST measurements with ROI predictions,
/// plus per-slide Spearman summaries.
pub fn lme_designs(st: &[crate::lme::StMeasurement], preds: &[RoiValue]) -> (Vec<GeneDesign>, Vec<SlideRho>) {
    let lookup: HashMap<(&str, &str), f64> = preds
        .iter()
        .filter_map(|p| p.value.map(|v| ((p.roi_id.as_str(), p.gene_id.as_str()), v)))
        .collect();
    let mut by_gene: BTreeMap<&str, Vec<(&str, f64, f64)>> = BTreeMap::new();
    for m in st {
        if let Some(&x) = lookup.get(&(m.roi_id.as_str(), m.gene_id.as_str())) {
            by_gene.entry(&m.gene_id).or_default().push((&m.slide_id, m.value, x));
        }
    }
    let mut designs = Vec::new();
    let mut rhos = Vec::new();
    for (g, rows) in by_gene {
        designs.push(GeneDesign {
            gene_id: g.to_string(),
            y: rows.iter().map(|r| r.1).collect(),
            x: rows.iter().map(|r| r.2).collect(),
            groups: rows.iter().map(|r| r.0.to_string()).collect(),
        });
        let mut by_slide: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (s, y, x) in &rows {
            let e = by_slide.entry(s).or_default();
            e.0.push(*x);
            e.1.push(*y);
        }
        for (s, (x, y)) in by_slide {
            rhos.push(slide_spearman(s, g, &x, &y));
        }
    }
    (designs, rhos)
}

pub fn stage_lme(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<Vec<BatchResult>> {
    let counts = read_counts(require(&inputs.st_counts())?, "gene_id")?;
    let negs = read_counts(require(&inputs.neg_controls())?, "probe")?;
    let preds = read_roi_values(require(&out.roi_values())?)?;
    let st = normalise_st(&counts, &negs, cfg.lme.st_min_variance)?;
    let (designs, rhos) = lme_designs(&st, &preds);
    let fits = lme_batch(&designs);
    write_text(&out.lme(), &lme_to_tsv(&fits, cfg.lme.alpha))?;
    write_text(&out.slide_rho(), &slide_rho_to_tsv(&rhos))?;
    Ok(fits)
}

/// Heatmaps for the given slide/gene pairs, or every pair when both are `None`.
pub fn stage_heatmap(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout, slide: Option<&str>, gene: Option<&str>) -> Result<usize> {
    let rows = read_manifest(require(&out.manifest())?)?;
    let preds = read_predictions(require(&out.predictions())?)?;
    let metas = slide_metas(&inputs.slides())?;
    let src_px: HashMap<&str, usize> = rows.iter().map(|r| (r.slide_id.as_str(), r.src_px)).collect();
    let mut groups: BTreeMap<(&str, &str), Vec<TilePrediction>> = BTreeMap::new();
    for p in &preds {
        if slide.is_some_and(|s| s != p.slide_id) || gene.is_some_and(|g| g != p.gene_id) {
            continue;
        }
        groups.entry((&p.slide_id, &p.gene_id)).or_default().push(p.clone());
    }
    if groups.is_empty() {
        return Err(Error::invalid("no predictions match the requested slide/gene"));
    }
    for ((s, g), ps) in &groups {
        let meta = metas.get(*s).ok_or_else(|| Error::invalid(format!("no slide metadata for {s}")))?;
        let level = meta.level_nearest(cfg.heatmap.level_factor);
        let (img, range) = heatmap(ps, meta, level, cfg.heatmap.cell_px, src_px[s])?;
        let path = out.heatmap(s, g);
        ensure_parent(&path)?;
        img.save_png(&path)?;
        write_text(&sidecar_path(&path), &heatmap_sidecar(&range)?)?;
    }
    Ok(groups.len())
}

pub fn heatmap_sidecar(range: &HeatmapRange) -> Result<String> {
    Ok(serde_json::to_string_pretty(range)? + "\n")
}

/// Everything through `stats`, one stage after another.
pub fn run_all(cfg: &PipelineConfig, inputs: &Inputs, out: &Layout) -> Result<Vec<GeneStat>> {
    stage_segment(cfg, inputs, out)?;
    stage_tile(cfg, inputs, out)?;
    stage_stain_estimate(cfg, out)?;
    stage_stain_apply(out)?;
    stage_expression(cfg, inputs, out)?;
    stage_predict(cfg, inputs, out, None)?;
    stage_aggregate(inputs, out)?;
    stage_stats(cfg, inputs, out)
}

/// Artifacts of an in-memory run.
#[derive(Debug, Clone)]
pub struct Run {
    pub manifest: Vec<ManifestRow>,
    pub stains: StainSet,
    pub expression: ExpressionMatrix,
    pub models: Vec<BaselineModel>,
    pub predictions: Vec<TilePrediction>,
    pub slide_values: Vec<SlideValue>,
    pub stats: Vec<GeneStat>,
}

/// The file-based stages without the files: tiles pass through the same
/// JPEG encoding, normalised tiles are kept losslessly.
pub fn run_in_memory(cfg: &PipelineConfig, slides: &[Slide], m: &ExpressionMatrix, samples: &[SampleInfo]) -> Result<Run> {
    cfg.validate()?;
    let mut slides: Vec<&Slide> = slides.iter().collect();
    slides.sort_by(|a, b| a.meta.slide_id.cmp(&b.meta.slide_id));
    let mut manifest = Vec::new();
    let mut tiles: HashMap<String, Raster> = HashMap::new();
    for s in &slides {
        let mask = segment_slide(s, &cfg.tissue)?;
        let t = tile_one(s, &mask, &cfg.tile)?;
        for (rel, bytes) in t.jpegs {
            tiles.insert(rel, Raster::decode_jpeg(&bytes)?);
        }
        manifest.extend(t.rows);
    }
    let lookup = |r: &ManifestRow| -> Result<Raster> {
        r.path
            .as_ref()
            .and_then(|p| tiles.get(p))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("tile {}@{},{} missing", r.slide_id, r.x0, r.y0)))
    };
    let stains = estimate_stains(cfg, &manifest, lookup)?;
    let accepted = accepted_rows(&manifest);
    let features: TileFeatures = accepted
        .par_iter()
        .map(|r| Ok((r.clone(), tile_features(&normalise(&lookup(r)?, &r.slide_id, &stains)?)?)))
        .collect::<Result<_>>()?;
    let (expression, _) = prepare_expression(cfg, m, samples)?;
    let models = fit_models(cfg, &features, &expression, samples)?;
    let predictions = predict_all(&models, &features);
    let mut ids: Vec<String> = manifest.iter().map(|r| r.slide_id.clone()).collect();
    ids.dedup();
    let slide_values = slide_means(&predictions, &ids, &gene_ids(&predictions));
    let stats = evaluate(cfg, &slide_values, &expression, samples)?;
    Ok(Run {
        manifest,
        stains,
        expression,
        models,
        predictions,
        slide_values,
        stats,
    })
}
