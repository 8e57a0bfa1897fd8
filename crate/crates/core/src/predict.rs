//! Tile-level expression prediction and its aggregation.
//!
//! Predictions come either from the built-in colour-statistics ridge
//! baseline or from an external process speaking a line protocol:
//! it reads `slide_id, x0, y0, path` rows on stdin and answers with
//! `slide_id, x0, y0, gene_id, value` rows on stdout.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Raster, SlideMeta};
use crate::tsv::{fmt_f64, fmt_opt, Table, Writer};

#[derive(Debug, Clone, PartialEq)]
pub struct TilePrediction {
    pub slide_id: String,
    pub x0: usize,
    pub y0: usize,
    pub gene_id: String,
    pub value: f64,
}

impl TilePrediction {
    fn key(&self) -> (&str, usize, usize, &str) {
        (&self.slide_id, self.y0, self.x0, &self.gene_id)
    }
}

pub const PREDICTION_HEADER: [&str; 5] = ["slide_id", "x0", "y0", "gene_id", "value"];

pub fn sort_predictions(p: &mut [TilePrediction]) {
    p.sort_by(|a, b| a.key().cmp(&b.key()));
}

pub fn predictions_to_tsv(p: &[TilePrediction]) -> String {
    let mut rows = p.to_vec();
    sort_predictions(&mut rows);
    let mut w = Writer::new(&PREDICTION_HEADER);
    for r in &rows {
        w.row(&[r.slide_id.clone(), r.x0.to_string(), r.y0.to_string(), r.gene_id.clone(), fmt_f64(r.value)]);
    }
    w.finish()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<TilePrediction>> {
    let t = Table::read(path)?;
    let [c_s, c_x, c_y, c_g, c_v] = t.columns(PREDICTION_HEADER)?;
    (0..t.rows.len())
        .map(|i| {
            Ok(TilePrediction {
                slide_id: t.rows[i][c_s].clone(),
                x0: t.u64_at(i, c_x)? as usize,
                y0: t.u64_at(i, c_y)? as usize,
                gene_id: t.rows[i][c_g].clone(),
                value: t.f64_at(i, c_v)?,
            })
        })
        .collect()
}

pub const FEATURE_NAMES: [&str; 6] = ["mean_r", "mean_g", "mean_b", "std_r", "std_g", "std_b"];

/// Per-channel mean and population standard deviation.
pub fn tile_features(tile: &Raster) -> Result<[f64; 6]> {
    tile.require_rgb("tile_features")?;
    let n = tile.pixel_count();
    if n == 0 {
        return Err(Error::invalid("tile_features: empty tile"));
    }
    let mut sum = [0u64; 3];
    let mut sq = [0u64; 3];
    for p in tile.rgb_pixels() {
        for c in 0..3 {
            sum[c] += p[c] as u64;
            sq[c] += (p[c] as u64) * (p[c] as u64);
        }
    }
    let mut f = [0.0; 6];
    for c in 0..3 {
        let m = sum[c] as f64 / n as f64;
        f[c] = m;
        f[3 + c] = (sq[c] as f64 / n as f64 - m * m).max(0.0).sqrt();
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineModel {
    pub gene_id: String,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

impl BaselineModel {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.features.len() || self.features.len() != FEATURE_NAMES.len() {
            return Err(Error::invalid(format!("model {}: weights/features length mismatch", self.gene_id)));
        }
        if self.features.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b) {
            return Err(Error::invalid(format!("model {}: unexpected feature spec", self.gene_id)));
        }
        Ok(())
    }

    pub fn predict(&self, f: &[f64; 6]) -> f64 {
        self.bias + self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
    }
}

pub fn load_models(path: impl AsRef<Path>) -> Result<Vec<BaselineModel>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let models: Vec<BaselineModel> = serde_json::from_str(&text)?;
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

pub fn models_to_json(models: &[BaselineModel]) -> Result<String> {
    Ok(serde_json::to_string_pretty(models)? + "\n")
}

/// Ridge regression of slide labels on tile features, one model per gene.
/// Features are standardised for the penalty and the scaling is folded back
/// into the returned weights; the intercept is not penalised.
///
/// `tiles` pairs a slide id with tile features; `labels[g]` maps slide ids to
/// the label of gene `genes[g]`. Tiles of unlabelled slides are skipped.
pub fn fit_baseline(
    tiles: &[(String, [f64; 6])],
    genes: &[String],
    labels: &[HashMap<String, f64>],
    lambda: f64,
) -> Result<Vec<BaselineModel>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge penalty must be finite and >= 0, got {lambda}")));
    }
    if genes.len() != labels.len() {
        return Err(Error::invalid("one label map per gene required"));
    }
    let mut out = Vec::with_capacity(genes.len());
    for (gene, lab) in genes.iter().zip(labels) {
        let rows: Vec<(&[f64; 6], f64)> = tiles
            .iter()
            .filter_map(|(s, f)| lab.get(s).map(|&y| (f, y)))
            .collect();
        let slides: HashSet<&str> = tiles.iter().filter(|(s, _)| lab.contains_key(s)).map(|(s, _)| s.as_str()).collect();
        if slides.len() < 2 {
            return Err(Error::invalid(format!(
                "{gene}: baseline needs tiles from at least 2 labelled slides, found {}",
                slides.len()
            )));
        }
        if rows.iter().any(|(_, y)| !y.is_finite()) {
            return Err(Error::invalid(format!("{gene}: non-finite label")));
        }
        out.push(fit_one(gene, &rows, lambda)?);
    }
    Ok(out)
}

fn fit_one(gene: &str, rows: &[(&[f64; 6], f64)], lambda: f64) -> Result<BaselineModel> {
    let n = rows.len() as f64;
    let mut mu = [0.0; 6];
    for (f, _) in rows {
        for k in 0..6 {
            mu[k] += f[k] / n;
        }
    }
    let mut sd = [0.0; 6];
    for (f, _) in rows {
        for k in 0..6 {
            sd[k] += (f[k] - mu[k]).powi(2) / n;
        }
    }
    let sd = sd.map(f64::sqrt);
    let active: Vec<usize> = (0..6).filter(|&k| sd[k] > 1e-12).collect();
    let y_mean = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let p = active.len();
    let mut weights = [0.0; 6];
    if p > 0 {
        let mut g = DMatrix::<f64>::zeros(p, p);
        let mut b = DVector::<f64>::zeros(p);
        for (f, y) in rows {
            let z: Vec<f64> = active.iter().map(|&k| (f[k] - mu[k]) / sd[k]).collect();
            for i in 0..p {
                b[i] += z[i] * (y - y_mean);
                for j in 0..p {
                    g[(i, j)] += z[i] * z[j];
                }
            }
        }
        for i in 0..p {
            g[(i, i)] += lambda;
        }
        let w = g
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("{gene}: degenerate baseline design")))?
            .solve(&b);
        for (i, &k) in active.iter().enumerate() {
            weights[k] = w[i] / sd[k];
        }
    }
    let bias = y_mean - (0..6).map(|k| weights[k] * mu[k]).sum::<f64>();
    Ok(BaselineModel {
        gene_id: gene.to_string(),
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        weights: weights.to_vec(),
        bias,
        lambda,
    })
}

/// Predictions of every model for one tile.
pub fn predict_tile(models: &[BaselineModel], slide_id: &str, x0: usize, y0: usize, f: &[f64; 6]) -> Vec<TilePrediction> {
    models
        .iter()
        .map(|m| TilePrediction {
            slide_id: slide_id.to_string(),
            x0,
            y0,
            gene_id: m.gene_id.clone(),
            value: m.predict(f),
        })
        .collect()
}

/// Tile handed to an external predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRef {
    pub slide_id: String,
    pub x0: usize,
    pub y0: usize,
    pub path: String,
}

pub fn format_request(t: &TileRef) -> String {
    format!("{}\t{}\t{}\t{}", t.slide_id, t.x0, t.y0, t.path)
}

pub fn parse_request(line: &str) -> Option<TileRef> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 4 {
        return None;
    }
    Some(TileRef {
        slide_id: f[0].to_string(),
        x0: f[1].parse().ok()?,
        y0: f[2].parse().ok()?,
        path: f[3].to_string(),
    })
}

pub fn format_response(p: &TilePrediction) -> String {
    format!("{}\t{}\t{}\t{}\t{}", p.slide_id, p.x0, p.y0, p.gene_id, fmt_f64(p.value))
}

fn parse_response(line: &str) -> Option<TilePrediction> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return None;
    }
    let value: f64 = f[4].trim().parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    Some(TilePrediction {
        slide_id: f[0].to_string(),
        x0: f[1].parse().ok()?,
        y0: f[2].parse().ok()?,
        gene_id: f[3].to_string(),
        value,
    })
}

/// Maximum tolerated share of malformed response lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Runs `command` through `sh -c`, streaming tile requests to its stdin.
/// `{genes}` in the command is replaced by the comma-joined gene set, which
/// is also exported as `EMO_GENES`.
pub fn run_external_predictor(tiles: &[TileRef], command: &str, genes: &[String]) -> Result<Vec<TilePrediction>> {
    let gene_list = genes.join(",");
    let cmd = command.replace("{genes}", &gene_list);
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .env("EMO_GENES", &gene_list)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Predictor(format!("cannot start `{cmd}`: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let requests: Vec<String> = tiles.iter().map(format_request).collect();
    let writer = std::thread::spawn(move || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(&mut stdin);
        for r in requests {
            writeln!(w, "{r}")?;
        }
        w.flush()
    });
    let known: HashSet<(&str, usize, usize)> = tiles.iter().map(|t| (t.slide_id.as_str(), t.x0, t.y0)).collect();
    let wanted: HashSet<&str> = genes.iter().map(String::as_str).collect();
    let mut seen: HashSet<(String, usize, usize, String)> = HashSet::new();
    let mut out = Vec::new();
    let (mut total, mut malformed) = (0usize, 0usize);
    let mut last_good: Option<(usize, String)> = None;
    let reader = BufReader::new(child.stdout.take().expect("piped stdout"));
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Predictor(format!("reading predictor output: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let ok = parse_response(&line).filter(|p| {
            known.contains(&(p.slide_id.as_str(), p.x0, p.y0))
                && (wanted.is_empty() || wanted.contains(p.gene_id.as_str()))
                && seen.insert((p.slide_id.clone(), p.x0, p.y0, p.gene_id.clone()))
        });
        match ok {
            Some(p) => {
                last_good = Some((i + 1, line.clone()));
                out.push(p);
            }
            None => {
                malformed += 1;
                log::warn!("predictor output line {}: malformed: {line}", i + 1);
            }
        }
    }
    // A child that exits early closes its stdin; that surfaces via the status.
    let _ = writer.join();
    let status = child.wait().map_err(|e| Error::Predictor(format!("waiting for predictor: {e}")))?;
    if !status.success() {
        let last = match &last_good {
            Some((n, l)) => format!("last good line {n}: `{l}`"),
            None => "no good lines".to_string(),
        };
        return Err(Error::Predictor(format!("predictor exited with {status}; {last}")));
    }
    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::Predictor(format!("{malformed} of {total} predictor lines malformed")));
    }
    if malformed > 0 {
        log::warn!("{malformed} of {total} predictor lines malformed and ignored");
    }
    sort_predictions(&mut out);
    Ok(out)
}

/// Compensated (Neumaier) mean; `None` for no values.
pub fn aggregate_slide(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    Some((sum + comp) / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideValue {
    pub slide_id: String,
    pub gene_id: String,
    pub value: Option<f64>,
}

/// Slide means per gene. Every slide in `slides` appears for every gene;
/// slides without tiles get a missing value.
pub fn slide_means(preds: &[TilePrediction], slides: &[String], genes: &[String]) -> Vec<SlideValue> {
    let mut groups: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    for p in preds {
        groups.entry((&p.slide_id, &p.gene_id)).or_default().push(p.value);
    }
    let mut out = Vec::with_capacity(slides.len() * genes.len());
    for s in slides {
        for g in genes {
            out.push(SlideValue {
                slide_id: s.clone(),
                gene_id: g.clone(),
                value: groups.get(&(s.as_str(), g.as_str())).and_then(|v| aggregate_slide(v)),
            });
        }
    }
    out
}

pub fn slide_values_to_tsv(rows: &[SlideValue]) -> String {
    let mut w = Writer::new(&["slide_id", "gene_id", "value"]);
    for r in rows {
        w.row(&[r.slide_id.clone(), r.gene_id.clone(), fmt_opt(r.value)]);
    }
    w.finish()
}

pub fn read_slide_values(path: impl AsRef<Path>) -> Result<Vec<SlideValue>> {
    let t = Table::read(path)?;
    let [c_s, c_g, c_v] = t.columns(["slide_id", "gene_id", "value"])?;
    (0..t.rows.len())
        .map(|i| {
            Ok(SlideValue {
                slide_id: t.rows[i][c_s].clone(),
                gene_id: t.rows[i][c_g].clone(),
                value: t.opt_f64_at(i, c_v)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub roi_id: String,
    pub slide_id: String,
    pub x0: usize,
    pub y0: usize,
    pub size_um: f64,
}

impl Roi {
    pub fn size_px(&self, mpp: f64) -> f64 {
        self.size_um / mpp
    }

    pub fn validate(&self, meta: &SlideMeta) -> Result<()> {
        if !(self.size_um > 0.0) {
            return Err(Error::invalid(format!("ROI {}: size_um must be positive", self.roi_id)));
        }
        let s = self.size_px(meta.mpp);
        if self.x0 as f64 + s > meta.width() as f64 + 1e-9 || self.y0 as f64 + s > meta.height() as f64 + 1e-9 {
            return Err(Error::invalid(format!("ROI {} extends beyond slide {}", self.roi_id, self.slide_id)));
        }
        Ok(())
    }

    /// Half-open membership test for a level-0 point.
    pub fn contains(&self, x: f64, y: f64, mpp: f64) -> bool {
        let s = self.size_px(mpp);
        x >= self.x0 as f64 && x < self.x0 as f64 + s && y >= self.y0 as f64 && y < self.y0 as f64 + s
    }
}

pub const ROI_HEADER: [&str; 5] = ["roi_id", "slide_id", "x0", "y0", "size_um"];

pub fn read_rois(path: impl AsRef<Path>) -> Result<Vec<Roi>> {
    let t = Table::read(path)?;
    let c = t.columns(ROI_HEADER)?;
    (0..t.rows.len())
        .map(|i| {
            Ok(Roi {
                roi_id: t.rows[i][c[0]].clone(),
                slide_id: t.rows[i][c[1]].clone(),
                x0: t.u64_at(i, c[2])? as usize,
                y0: t.u64_at(i, c[3])? as usize,
                size_um: t.f64_at(i, c[4])?,
            })
        })
        .collect()
}

pub fn rois_to_tsv(rois: &[Roi]) -> String {
    let mut w = Writer::new(&ROI_HEADER);
    for r in rois {
        w.row(&[r.roi_id.clone(), r.slide_id.clone(), r.x0.to_string(), r.y0.to_string(), fmt_f64(r.size_um)]);
    }
    w.finish()
}

/// Mean of the predictions whose tile centre lies inside the ROI.
/// `tile_px` is the level-0 side of a tile footprint.
pub fn aggregate_roi(preds: &[TilePrediction], gene_id: &str, roi: &Roi, mpp: f64, tile_px: usize) -> Option<f64> {
    let half = tile_px as f64 / 2.0;
    let vals: Vec<f64> = preds
        .iter()
        .filter(|p| p.slide_id == roi.slide_id && p.gene_id == gene_id)
        .filter(|p| roi.contains(p.x0 as f64 + half, p.y0 as f64 + half, mpp))
        .map(|p| p.value)
        .collect();
    aggregate_slide(&vals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiValue {
    pub roi_id: String,
    pub slide_id: String,
    pub gene_id: String,
    pub value: Option<f64>,
}

pub fn roi_values_to_tsv(rows: &[RoiValue]) -> String {
    let mut w = Writer::new(&["roi_id", "slide_id", "gene_id", "value"]);
    for r in rows {
        w.row(&[r.roi_id.clone(), r.slide_id.clone(), r.gene_id.clone(), fmt_opt(r.value)]);
    }
    w.finish()
}

pub fn read_roi_values(path: impl AsRef<Path>) -> Result<Vec<RoiValue>> {
    let t = Table::read(path)?;
    let [c_r, c_s, c_g, c_v] = t.columns(["roi_id", "slide_id", "gene_id", "value"])?;
    (0..t.rows.len())
        .map(|i| {
            Ok(RoiValue {
                roi_id: t.rows[i][c_r].clone(),
                slide_id: t.rows[i][c_s].clone(),
                gene_id: t.rows[i][c_g].clone(),
                value: t.opt_f64_at(i, c_v)?,
            })
        })
        .collect()
}

/// Per-tile sum over member genes, emitted under `name`.
pub fn composite_probe(preds: &[TilePrediction], members: &[String], name: &str) -> Result<Vec<TilePrediction>> {
    if members.is_empty() {
        return Err(Error::invalid(format!("probe {name}: no member genes")));
    }
    let present: HashSet<&str> = preds.iter().map(|p| p.gene_id.as_str()).collect();
    let missing: Vec<&str> = members.iter().map(String::as_str).filter(|m| !present.contains(m)).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("probe {name}: missing member gene(s) {}", missing.join(", "))));
    }
    let member_set: HashSet<&str> = members.iter().map(String::as_str).collect();
    let mut tiles: BTreeMap<(&str, usize, usize), (f64, usize)> = BTreeMap::new();
    for p in preds.iter().filter(|p| member_set.contains(p.gene_id.as_str())) {
        let e = tiles.entry((&p.slide_id, p.y0, p.x0)).or_insert((0.0, 0));
        e.0 += p.value;
        e.1 += 1;
    }
    tiles
        .into_iter()
        .map(|((s, y0, x0), (sum, count))| {
            if count != members.len() {
                return Err(Error::invalid(format!(
                    "probe {name}: tile {s} ({x0},{y0}) has {count} of {} members",
                    members.len()
                )));
            }
            Ok(TilePrediction {
                slide_id: s.to_string(),
                x0,
                y0,
                gene_id: name.to_string(),
                value: sum,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRange {
    pub min: f64,
    pub max: f64,
    pub degenerate_range: bool,
}

/// Paints each tile footprint onto a grid of `cell_px`-pixel cells at the
/// given pyramid level, averaging overlaps, and min–max scales to 0..255.
/// Cells no tile covers stay 0.
pub fn heatmap(
    preds: &[TilePrediction],
    meta: &SlideMeta,
    level: usize,
    cell_px: usize,
    tile_px: usize,
) -> Result<(Raster, HeatmapRange)> {
    if preds.is_empty() {
        return Err(Error::invalid("heatmap needs at least one prediction"));
    }
    if cell_px == 0 {
        return Err(Error::invalid("cell_px must be at least 1"));
    }
    let lv = meta.level(level)?;
    let (w, h) = (lv.width.div_ceil(cell_px), lv.height.div_ceil(cell_px));
    let scale = lv.factor * cell_px as f64;
    let mut sum = vec![0.0; w * h];
    let mut cnt = vec![0u32; w * h];
    for p in preds {
        // Cells whose centre falls in the footprint.
        let span = |o: usize, len: usize| {
            let lo = (o as f64 / scale - 0.5).ceil().max(0.0) as usize;
            let hi = (((o + tile_px) as f64 / scale - 0.5).ceil().max(0.0) as usize).min(len);
            (lo, hi)
        };
        let (x_lo, x_hi) = span(p.x0, w);
        let (y_lo, y_hi) = span(p.y0, h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                sum[y * w + x] += p.value;
                cnt[y * w + x] += 1;
            }
        }
    }
    let vals: Vec<Option<f64>> = sum.iter().zip(&cnt).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let painted: Vec<f64> = vals.iter().flatten().copied().collect();
    let (min, max) = if painted.is_empty() {
        let v: Vec<f64> = preds.iter().map(|p| p.value).collect();
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    } else {
        (painted.iter().copied().fold(f64::INFINITY, f64::min), painted.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let degenerate = !(max > min);
    let data = vals
        .iter()
        .map(|v| match v {
            None => 0,
            Some(_) if degenerate => 255,
            Some(v) => (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8,
        })
        .collect();
    Ok((
        Raster::from_vec(w, h, 1, data)?,
        HeatmapRange {
            min,
            max,
            degenerate_range: degenerate,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(s: &str, x0: usize, y0: usize, g: &str, v: f64) -> TilePrediction {
        TilePrediction {
            slide_id: s.into(),
            x0,
            y0,
            gene_id: g.into(),
            value: v,
        }
    }

    #[test]
    fn slide_mean_examples() {
        assert_eq!(aggregate_slide(&[1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(aggregate_slide(&[4.5]), Some(4.5));
        assert_eq!(aggregate_slide(&[]), None);
    }

    #[test]
    fn slide_mean_matches_kahan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1e6..1e6) * rng.random::<f64>().powi(3)).collect();
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &x in &v {
            let y = x - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        let want = s / v.len() as f64;
        let got = aggregate_slide(&v).unwrap();
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-300));
    }

    #[test]
    fn missing_slides_are_na() {
        let p = vec![pred("a", 0, 0, "g", 1.0)];
        let m = slide_means(&p, &["a".into(), "b".into()], &["g".into()]);
        assert_eq!(m[1].value, None);
        assert!(slide_values_to_tsv(&m).contains("b\tg\tNA"));
    }

    fn meta() -> SlideMeta {
        SlideMeta::with_factors("s", 0.5, 1000, 1000, &[1.0, 4.0])
    }

    #[test]
    fn roi_membership_by_centre() {
        let roi = Roi {
            roi_id: "r".into(),
            slide_id: "s".into(),
            x0: 100,
            y0: 100,
            size_um: 100.0,
        };
        // ROI spans [100, 300) at 0.5 µm/px; tiles are 100 px.
        let p = vec![pred("s", 60, 60, "g", 7.0), pred("s", 0, 0, "g", 1.0), pred("s", 250, 60, "g", 3.0)];
        assert_eq!(aggregate_roi(&p, "g", &roi, 0.5, 100), Some(7.0));
        assert_eq!(aggregate_roi(&p[1..2], "g", &roi, 0.5, 100), None);
        roi.validate(&meta()).unwrap();
        let big = Roi { size_um: 451.0, ..roi };
        assert!(big.validate(&meta()).is_err());
    }

    #[test]
    fn roi_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<TilePrediction> = (0..300).map(|_| pred("s", rng.random_range(0..900), rng.random_range(0..900), "g", rng.random())).collect();
        for _ in 0..50 {
            let roi = Roi {
                roi_id: "r".into(),
                slide_id: "s".into(),
                x0: rng.random_range(0..500),
                y0: rng.random_range(0..500),
                size_um: rng.random_range(10.0..200.0),
            };
            let s = roi.size_um / 0.5;
            let inside: Vec<f64> = p
                .iter()
                .filter(|t| {
                    let (cx, cy) = (t.x0 as f64 + 50.0, t.y0 as f64 + 50.0);
                    cx >= roi.x0 as f64 && cx < roi.x0 as f64 + s && cy >= roi.y0 as f64 && cy < roi.y0 as f64 + s
                })
                .map(|t| t.value)
                .collect();
            let want = if inside.is_empty() { None } else { Some(inside.iter().sum::<f64>() / inside.len() as f64) };
            let got = aggregate_roi(&p, "g", &roi, 0.5, 100);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn composite_examples() {
        let p = vec![pred("s", 0, 0, "a", 1.0), pred("s", 0, 0, "b", 2.0), pred("s", 10, 0, "a", 5.0), pred("s", 10, 0, "b", -1.0)];
        let c = composite_probe(&p, &["a".into(), "b".into()], "ab").unwrap();
        assert_eq!(c.iter().map(|t| t.value).collect::<Vec<_>>(), vec![3.0, 4.0]);
        let single = composite_probe(&p, &["a".into()], "a2").unwrap();
        assert_eq!(single.iter().map(|t| t.value).collect::<Vec<_>>(), vec![1.0, 5.0]);
        let err = composite_probe(&p, &["a".into(), "KRT5".into()], "x").unwrap_err();
        assert!(err.to_string().contains("KRT5"));
    }

    #[test]
    fn composite_of_nine_matches_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let members: Vec<String> = (0..9).map(|i| format!("KRT{i}")).collect();
        let mut p = Vec::new();
        let mut want = Vec::new();
        for t in 0..20 {
            let mut s = 0.0;
            for m in &members {
                let v: f64 = rng.random();
                s += v;
                p.push(pred("s", 0, t, m, v));
            }
            want.push(s);
        }
        let c = composite_probe(&p, &members, "multi-KRT").unwrap();
        for (a, b) in c.iter().zip(&want) {
            assert!((a.value - b).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_recovers_linear_signal() {
        // Labels linear in mean red; tiles carry that mean plus noise.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tiles = Vec::new();
        let mut lab = HashMap::new();
        for s in 0..12 {
            let red = 100.0 + 10.0 * s as f64;
            lab.insert(format!("s{s}"), 0.05 * red + 1.0);
            for _ in 0..20 {
                let f = [red + rng.random_range(-2.0..2.0), rng.random_range(90.0..110.0), 150.0, 20.0, rng.random_range(5.0..9.0), 10.0];
                tiles.push((format!("s{s}"), f));
            }
        }
        let held_out = |id: &str| id[1..].parse::<usize>().unwrap() % 2 == 1;
        let train: Vec<_> = tiles.iter().filter(|(s, _)| !held_out(s)).cloned().collect();
        let m = &fit_baseline(&train, &["g".into()], &[lab.clone()], 1e-3).unwrap()[0];
        m.validate().unwrap();
        let mut pred_v = Vec::new();
        let mut obs = Vec::new();
        for s in (1..12).step_by(2) {
            let id = format!("s{s}");
            let v: Vec<f64> = tiles.iter().filter(|(t, _)| *t == id).map(|(_, f)| m.predict(f)).collect();
            pred_v.push(aggregate_slide(&v).unwrap());
            obs.push(lab[&id]);
        }
        assert!(crate::stats::spearman(&pred_v, &obs).unwrap().rho >= 0.95);
    }

    #[test]
    fn ridge_matches_closed_form() {
        // min Σ(y − ȳ − z·w)² + λ‖w‖² over standardised features z.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tiles = Vec::new();
        let mut lab = HashMap::new();
        for s in 0..6 {
            lab.insert(format!("s{s}"), rng.random_range(0.0..5.0));
            for _ in 0..7 {
                let f: [f64; 6] = std::array::from_fn(|k| rng.random_range(0.0..50.0) + (k * s) as f64);
                tiles.push((format!("s{s}"), f));
            }
        }
        let lambda = 3.5;
        let m = &fit_baseline(&tiles, &["g".into()], &[lab.clone()], lambda).unwrap()[0];
        let n = tiles.len();
        let col = |k: usize| DVector::from_iterator(n, tiles.iter().map(|t| t.1[k]));
        let mut z = DMatrix::zeros(n, 6);
        let mut scale = [0.0; 6];
        for k in 0..6 {
            let c = col(k);
            let mean = c.mean();
            let sd = (c.map(|v| (v - mean).powi(2)).sum() / n as f64).sqrt();
            scale[k] = sd;
            z.set_column(k, &c.map(|v| (v - mean) / sd));
        }
        let y = DVector::from_iterator(n, tiles.iter().map(|t| lab[&t.0]));
        let yc = y.map(|v| v - y.mean());
        let w = (z.transpose() * &z + DMatrix::identity(6, 6) * lambda).lu().solve(&(z.transpose() * yc)).unwrap();
        for k in 0..6 {
            assert!((m.weights[k] - w[k] / scale[k]).abs() < 1e-10, "{k}: {} vs {}", m.weights[k], w[k] / scale[k]);
        }
    }

    #[test]
    fn baseline_limits() {
        let tiles: Vec<(String, [f64; 6])> = (0..10).map(|i| (format!("s{}", i % 2), [i as f64, 2.0 * i as f64, 1.0, 0.0, 3.0, i as f64 * 0.5])).collect();
        let constant: HashMap<String, f64> = [("s0".to_string(), 4.0), ("s1".to_string(), 4.0)].into();
        let m = &fit_baseline(&tiles, &["g".into()], &[constant], 0.1).unwrap()[0];
        assert!(m.weights.iter().all(|w| w.abs() < 1e-12));
        assert!((m.predict(&tiles[3].1) - 4.0).abs() < 1e-12);
        let lab: HashMap<String, f64> = [("s0".to_string(), 1.0), ("s1".to_string(), 3.0)].into();
        let m = &fit_baseline(&tiles, &["g".into()], &[lab.clone()], 1e12).unwrap()[0];
        assert!((m.predict(&tiles[3].1) - 2.0).abs() < 1e-6);
        let one: HashMap<String, f64> = [("s0".to_string(), 1.0)].into();
        assert!(fit_baseline(&tiles, &["g".into()], &[one], 0.1).is_err());
        assert!(fit_baseline(&tiles, &["g".into()], &[lab], -1.0).is_err());
    }

    #[test]
    fn features_of_constant_tile() {
        let t = Raster::from_fn_rgb(4, 4, |x, _| [10, 20, if x < 2 { 0 } else { 100 }]);
        assert_eq!(tile_features(&t).unwrap(), [10.0, 20.0, 50.0, 0.0, 0.0, 50.0]);
    }

    #[test]
    fn heatmap_examples() {
        let m = meta();
        let (r, range) = heatmap(&[pred("s", 0, 0, "g", 3.0)], &m, 1, 1, 400).unwrap();
        assert!(range.degenerate_range);
        assert_eq!((r.width(), r.height()), (250, 250));
        assert_eq!(r.get(50, 50, 0), 255);
        assert_eq!(r.get(200, 200, 0), 0);
        let (r, range) = heatmap(&[pred("s", 0, 0, "g", 0.0), pred("s", 400, 0, "g", 1.0)], &m, 1, 1, 400).unwrap();
        assert!(!range.degenerate_range);
        assert_eq!((r.get(10, 10, 0), r.get(110, 10, 0)), (0, 255));
        let (r, _) = heatmap(&[pred("s", 0, 0, "g", 0.0), pred("s", 200, 0, "g", 1.0)], &m, 1, 1, 400).unwrap();
        assert!([127, 128].contains(&r.get(75, 10, 0)));
        assert_eq!(r.get(10, 10, 0), 0);
        assert_eq!(r.get(120, 10, 0), 255);
    }

    #[test]
    fn protocol_roundtrip_lines() {
        let t = TileRef {
            slide_id: "s".into(),
            x0: 3,
            y0: 4,
            path: "/tmp/a b.jpg".into(),
        };
        assert_eq!(parse_request(&format_request(&t)), Some(t));
        let p = pred("s", 3, 4, "g", 0.1 + 0.2);
        assert_eq!(parse_response(&format_response(&p)), Some(p));
        assert_eq!(parse_response("s\t1\t2\tg\tnan"), None);
    }

    fn refs(n: usize) -> Vec<TileRef> {
        (0..n)
            .map(|i| TileRef {
                slide_id: "s".into(),
                x0: i,
                y0: 0,
                path: format!("t{i}.jpg"),
            })
            .collect()
    }

    #[test]
    fn external_echo_predictor() {
        let cmd = r#"while IFS="$(printf '\t')" read s x y p; do for g in $(echo "$EMO_GENES" | tr , ' '); do printf '%s\t%s\t%s\t%s\t0.0\n' "$s" "$x" "$y" "$g"; done; done"#;
        let genes = vec!["A".to_string(), "B".to_string()];
        let out = run_external_predictor(&refs(50), cmd, &genes).unwrap();
        assert_eq!(out.len(), 100);
        assert!(out.iter().all(|p| p.value == 0.0));
    }

    #[test]
    fn external_failures() {
        let crash = r#"n=0; while IFS="$(printf '\t')" read s x y p; do n=$((n+1)); if [ $n -gt 3 ]; then exit 3; fi; printf '%s\t%s\t%s\tA\t1\n' "$s" "$x" "$y"; done"#;
        let err = run_external_predictor(&refs(10), crash, &["A".into()]).unwrap_err().to_string();
        assert!(err.contains("last good line 3"), "{err}");
        let garbage = r#"while read l; do echo "garbage"; done"#;
        assert!(run_external_predictor(&refs(10), garbage, &["A".into()]).is_err());
    }

    proptest! {
        #[test]
        fn slide_mean_permutation_invariant(mut v in proptest::collection::vec(-1e3f64..1e3, 1..100), seed in any::<u64>()) {
            let a = aggregate_slide(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            let b = aggregate_slide(&v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn composite_commutes_with_mean(vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let mut p = Vec::new();
            for (i, (a, b)) in vals.iter().enumerate() {
                p.push(pred("s", i, 0, "a", *a));
                p.push(pred("s", i, 0, "b", *b));
            }
            let c = composite_probe(&p, &["a".into(), "b".into()], "c").unwrap();
            let mean_of_sum = aggregate_slide(&c.iter().map(|t| t.value).collect::<Vec<_>>()).unwrap();
            let sum_of_means = aggregate_slide(&vals.iter().map(|v| v.0).collect::<Vec<_>>()).unwrap()
                + aggregate_slide(&vals.iter().map(|v| v.1).collect::<Vec<_>>()).unwrap();
            prop_assert!((mean_of_sum - sum_of_means).abs() < 1e-9);
        }

        #[test]
        fn full_slide_roi_equals_slide_mean(vals in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let p: Vec<TilePrediction> = vals.iter().enumerate().map(|(i, &v)| pred("s", (i % 6) * 100, (i / 6) * 100, "g", v)).collect();
            let roi = Roi { roi_id: "r".into(), slide_id: "s".into(), x0: 0, y0: 0, size_um: 500.0 };
            let a = aggregate_roi(&p, "g", &roi, 0.5, 100).unwrap();
            let b = aggregate_slide(&vals).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
