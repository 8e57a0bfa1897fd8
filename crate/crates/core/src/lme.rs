//! Random-intercept linear mixed model fitted by maximum likelihood, with a
//! likelihood-ratio test of the fixed slope, plus the spatial-validation
//! helpers around it (probe normalisation, per-slide rank correlation).
//!
//! For a variance ratio θ = σu²/σe² the covariance of group j is
//! σe²(I + θ11ᵀ), whose inverse is σe⁻²(I − c·11ᵀ) with c = θ/(1 + nθ).
//! Everything needed per θ reduces to per-group sums, so the profiled
//! likelihood costs O(groups) to evaluate.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::numeric::{mean, percentile, sample_variance};
use crate::stats::{bh_adjust, midranks, spearman};
use crate::tsv::{fmt_f64, fmt_opt, Table, Writer};

const LOG_THETA_MIN: f64 = -12.0;
const LOG_THETA_MAX: f64 = 12.0;
const Z975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, Default)]
struct GroupSums {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

/// Sufficient statistics of a centred design, grouped.
#[derive(Debug, Clone)]
struct Design {
    groups: Vec<GroupSums>,
    n: f64,
    x_mean: f64,
    y_mean: f64,
}

impl Design {
    fn new(y: &[f64], x: &[f64], groups: &[&str]) -> Design {
        let x_mean = mean(x).unwrap_or(0.0);
        let y_mean = mean(y).unwrap_or(0.0);
        let mut map: BTreeMap<&str, GroupSums> = BTreeMap::new();
        for i in 0..y.len() {
            let (xi, yi) = (x[i] - x_mean, y[i] - y_mean);
            let g = map.entry(groups[i]).or_default();
            g.n += 1.0;
            g.sx += xi;
            g.sy += yi;
            g.sxx += xi * xi;
            g.sxy += xi * yi;
            g.syy += yi * yi;
        }
        Design {
            groups: map.into_values().collect(),
            n: y.len() as f64,
            x_mean,
            y_mean,
        }
    }
}

/// GLS solution at a fixed θ. `slope` selects the full model.
#[derive(Debug, Clone, Copy)]
struct Profile {
    loglik: f64,
    beta: [f64; 2],
    sigma_e2: f64,
    /// (A⁻¹)₁₁ for the slope, A = Σ XᵀWX.
    a_inv_11: f64,
}

fn profile(d: &Design, theta: f64, slope: bool) -> Option<Profile> {
    // A = [[a00, a01], [a01, a11]], b = [b0, b1]
    let (mut a00, mut a01, mut a11, mut b0, mut b1, mut yy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut logdet = 0.0;
    for g in &d.groups {
        let c = theta / (1.0 + g.n * theta);
        a00 += g.n - c * g.n * g.n;
        a01 += g.sx - c * g.n * g.sx;
        a11 += g.sxx - c * g.sx * g.sx;
        b0 += g.sy - c * g.n * g.sy;
        b1 += g.sxy - c * g.sx * g.sy;
        yy += g.syy - c * g.sy * g.sy;
        logdet += (1.0 + g.n * theta).ln();
    }
    let (beta, rss, a_inv_11) = if slope {
        let det = a00 * a11 - a01 * a01;
        if !(det > 1e-12 * a00 * a11) {
            return None;
        }
        let beta0 = (a11 * b0 - a01 * b1) / det;
        let beta1 = (a00 * b1 - a01 * b0) / det;
        ([beta0, beta1], yy - beta0 * b0 - beta1 * b1, a00 / det)
    } else {
        if !(a00 > 0.0) {
            return None;
        }
        let beta0 = b0 / a00;
        ([beta0, 0.0], yy - beta0 * b0, f64::NAN)
    };
    let sigma_e2 = rss.max(0.0) / d.n;
    if !(sigma_e2 > 0.0) {
        return None;
    }
    let loglik = -0.5 * d.n * ((2.0 * std::f64::consts::PI).ln() + 1.0 + sigma_e2.ln()) - 0.5 * logdet;
    Some(Profile {
        loglik,
        beta,
        sigma_e2,
        a_inv_11,
    })
}

#[derive(Debug, Clone, Copy)]
struct Optimum {
    theta: f64,
    profile: Profile,
    boundary: bool,
}

fn optimise(d: &Design, slope: bool) -> Result<Optimum> {
    let eval = |t: f64| profile(d, t.exp(), slope).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY);
    let steps = 96;
    let h = (LOG_THETA_MAX - LOG_THETA_MIN) / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|i| eval(LOG_THETA_MIN + h * i as f64)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| grid[a].total_cmp(&grid[b])).unwrap();
    if !grid[best].is_finite() {
        return Err(Error::Numerical("profiled likelihood undefined over the whole θ range".into()));
    }
    let (mut lo, mut hi) = (
        LOG_THETA_MIN + h * best.saturating_sub(1) as f64,
        LOG_THETA_MIN + h * (best + 1).min(steps) as f64,
    );
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut e) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut fc, mut fe) = (eval(c), eval(e));
    let mut iters = 0;
    while hi - lo > 1e-9 && iters < 200 {
        if fc >= fe {
            hi = e;
            e = c;
            fe = fc;
            c = hi - phi * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = e;
            fc = fe;
            e = lo + phi * (hi - lo);
            fe = eval(e);
        }
        iters += 1;
    }
    let t = if fc >= fe { c } else { e };
    let interior = profile(d, t.exp(), slope);
    let at_zero = profile(d, 0.0, slope);
    let pick = match (interior, at_zero) {
        (Some(a), Some(z)) if z.loglik >= a.loglik - 1e-10 => Optimum {
            theta: 0.0,
            profile: z,
            boundary: true,
        },
        (Some(a), _) => Optimum {
            theta: t.exp(),
            profile: a,
            boundary: false,
        },
        (None, Some(z)) => Optimum {
            theta: 0.0,
            profile: z,
            boundary: true,
        },
        (None, None) => return Err(Error::Numerical("profiled likelihood undefined at optimum".into())),
    };
    if pick.theta > 0.0 && t >= LOG_THETA_MAX - 1e-6 {
        return Err(Error::Numerical(format!(
            "variance ratio search did not converge: optimum at log θ = {t:.3} (upper bound), loglik {:.6}",
            pick.profile.loglik
        )));
    }
    Ok(pick)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmeFit {
    pub gene_id: String,
    pub n_obs: usize,
    pub n_groups: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub se_beta1: f64,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub loglik_full: f64,
    pub loglik_null: f64,
    pub lrt_stat: f64,
    pub p: f64,
    pub p_adj: Option<f64>,
    pub ci95_beta1: (f64, f64),
    /// σu² estimated on the boundary 0.
    pub boundary: bool,
}

/// Fits y = β0 + β1·x + u_group + ε by ML and tests β1 with an LRT.
pub fn fit_lme(gene_id: &str, y: &[f64], x: &[f64], groups: &[&str]) -> Result<LmeFit> {
    if y.len() != x.len() || y.len() != groups.len() {
        return Err(Error::invalid(format!("{gene_id}: y, x and groups differ in length")));
    }
    if y.iter().chain(x).any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{gene_id}: non-finite input")));
    }
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for g in groups {
        *sizes.entry(g).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::invalid(format!("{gene_id}: need at least 2 groups, got {}", sizes.len())));
    }
    if sizes.values().all(|&n| n == 1) {
        return Err(Error::invalid(format!(
            "{gene_id}: one observation per group; σu² and σe² are not identifiable"
        )));
    }
    if (y.len() as f64) < 2.0 * sizes.len() as f64 {
        return Err(Error::invalid(format!(
            "{gene_id}: fewer than 2 observations per group on average ({} over {} groups)",
            y.len(),
            sizes.len()
        )));
    }
    if sample_variance(x).is_none_or(|v| v == 0.0) {
        return Err(Error::invalid(format!("{gene_id}: x is constant")));
    }
    let d = Design::new(y, x, groups);
    let null = optimise(&d, false)?;
    let mut full = optimise(&d, true)?;
    // Nested models: the full model evaluated at the null's θ is feasible.
    if let Some(p) = profile(&d, null.theta, true) {
        if p.loglik > full.profile.loglik {
            full = Optimum {
                theta: null.theta,
                profile: p,
                boundary: null.boundary,
            };
        }
    }
    let pf = full.profile;
    let lrt = (2.0 * (pf.loglik - null.profile.loglik)).max(0.0);
    let p = 1.0 - ChiSquared::new(1.0).expect("df 1").cdf(lrt);
    let beta1 = pf.beta[1];
    let beta0 = d.y_mean + pf.beta[0] - beta1 * d.x_mean;
    let se = (pf.sigma_e2 * pf.a_inv_11).sqrt();
    Ok(LmeFit {
        gene_id: gene_id.to_string(),
        n_obs: y.len(),
        n_groups: sizes.len(),
        beta0,
        beta1,
        se_beta1: se,
        sigma_u2: full.theta * pf.sigma_e2,
        sigma_e2: pf.sigma_e2,
        loglik_full: pf.loglik,
        loglik_null: null.profile.loglik,
        lrt_stat: lrt,
        p: p.clamp(0.0, 1.0),
        p_adj: None,
        ci95_beta1: (beta1 - Z975 * se, beta1 + Z975 * se),
        boundary: full.boundary,
    })
}

/// Ordinary least-squares slope, for comparison.
pub fn ols_slope(y: &[f64], x: &[f64]) -> f64 {
    let mx = mean(x).unwrap_or(0.0);
    let my = mean(y).unwrap_or(0.0);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub struct GeneDesign {
    pub gene_id: String,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchResult {
    Fit(LmeFit),
    Failed { gene_id: String, reason: String },
}

impl BatchResult {
    pub fn gene_id(&self) -> &str {
        match self {
            BatchResult::Fit(f) => &f.gene_id,
            BatchResult::Failed { gene_id, .. } => gene_id,
        }
    }

    pub fn significant(&self, alpha: f64) -> bool {
        matches!(self, BatchResult::Fit(f) if f.p_adj.is_some_and(|p| p < alpha))
    }
}

/// Per-gene fits with BH adjustment over the successful fits.
pub fn lme_batch(designs: &[GeneDesign]) -> Vec<BatchResult> {
    use rayon::prelude::*;
    let mut out: Vec<BatchResult> = designs
        .par_iter()
        .map(|g| {
            let groups: Vec<&str> = g.groups.iter().map(String::as_str).collect();
            match fit_lme(&g.gene_id, &g.y, &g.x, &groups) {
                Ok(f) => BatchResult::Fit(f),
                Err(e) => {
                    log::warn!("{}: excluded from adjustment: {e}", g.gene_id);
                    BatchResult::Failed {
                        gene_id: g.gene_id.clone(),
                        reason: e.to_string(),
                    }
                }
            }
        })
        .collect();
    out.sort_by(|a, b| a.gene_id().cmp(b.gene_id()));
    let idx: Vec<usize> = (0..out.len()).filter(|&i| matches!(out[i], BatchResult::Fit(_))).collect();
    let ps: Vec<f64> = idx
        .iter()
        .map(|&i| match &out[i] {
            BatchResult::Fit(f) => f.p,
            _ => unreachable!(),
        })
        .collect();
    let adj = bh_adjust(&ps);
    for (k, &i) in idx.iter().enumerate() {
        if let BatchResult::Fit(f) = &mut out[i] {
            f.p_adj = Some(adj[k]);
        }
    }
    out
}

pub const LME_HEADER: [&str; 11] = [
    "gene_id", "beta0", "beta1", "ci_lo", "ci_hi", "sigma_u2", "sigma_e2", "lrt", "p", "p_adj", "significant",
];

pub fn lme_to_tsv(results: &[BatchResult], alpha: f64) -> String {
    let mut w = Writer::new(&LME_HEADER);
    for r in results {
        match r {
            BatchResult::Fit(f) => w.row(&[
                f.gene_id.clone(),
                fmt_f64(f.beta0),
                fmt_f64(f.beta1),
                fmt_f64(f.ci95_beta1.0),
                fmt_f64(f.ci95_beta1.1),
                fmt_f64(f.sigma_u2),
                fmt_f64(f.sigma_e2),
                fmt_f64(f.lrt_stat),
                fmt_f64(f.p),
                fmt_opt(f.p_adj),
                r.significant(alpha).to_string(),
            ]),
            BatchResult::Failed { gene_id, .. } => {
                let mut row = vec![gene_id.clone()];
                row.extend(std::iter::repeat_n(crate::tsv::NA.to_string(), 9));
                row.push("false".into());
                w.row(&row);
            }
        }
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StMeasurement {
    pub slide_id: String,
    pub roi_id: String,
    pub gene_id: String,
    pub raw_count: f64,
    pub neg_ctrl_mean: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub slide_id: String,
    pub roi_id: String,
    /// Gene id for target counts, probe id for negative controls.
    pub feature: String,
    pub raw_count: f64,
}

pub fn read_counts(path: impl AsRef<Path>, feature_col: &str) -> Result<Vec<CountRow>> {
    let t = Table::read(path)?;
    let [c_s, c_r, c_f, c_v] = t.columns(["slide_id", "roi_id", feature_col, "raw_count"])?;
    (0..t.rows.len())
        .map(|i| {
            Ok(CountRow {
                slide_id: t.rows[i][c_s].clone(),
                roi_id: t.rows[i][c_r].clone(),
                feature: t.rows[i][c_f].clone(),
                raw_count: t.f64_at(i, c_v)?,
            })
        })
        .collect()
}

/// Default cut for the across-ROI variance of a normalised gene.
pub const ST_MIN_VARIANCE: f64 = 0.001;

/// log2(count / mean negative control) per ROI; genes whose variance across
/// ROIs is below `min_variance` are dropped.
pub fn normalise_st(counts: &[CountRow], negatives: &[CountRow], min_variance: f64) -> Result<Vec<StMeasurement>> {
    let mut neg: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    for r in negatives {
        if !(r.raw_count > 0.0) {
            return Err(Error::invalid(format!(
                "ROI {}/{}: negative-control probe {} has non-positive count {}",
                r.slide_id, r.roi_id, r.feature, r.raw_count
            )));
        }
        neg.entry((&r.slide_id, &r.roi_id)).or_default().push(r.raw_count);
    }
    let mut out = Vec::with_capacity(counts.len());
    for r in counts {
        if !(r.raw_count > 0.0) {
            return Err(Error::invalid(format!(
                "ROI {}/{}: gene {} has non-positive count {}",
                r.slide_id, r.roi_id, r.feature, r.raw_count
            )));
        }
        let nm = neg
            .get(&(r.slide_id.as_str(), r.roi_id.as_str()))
            .and_then(|v| mean(v))
            .ok_or_else(|| Error::invalid(format!("ROI {}/{}: no negative-control probes", r.slide_id, r.roi_id)))?;
        out.push(StMeasurement {
            slide_id: r.slide_id.clone(),
            roi_id: r.roi_id.clone(),
            gene_id: r.feature.clone(),
            raw_count: r.raw_count,
            neg_ctrl_mean: nm,
            value: (r.raw_count / nm).log2(),
        });
    }
    let mut by_gene: HashMap<&str, Vec<f64>> = HashMap::new();
    for m in &out {
        by_gene.entry(&m.gene_id).or_default().push(m.value);
    }
    let low: Vec<String> = by_gene
        .iter()
        .filter(|(_, v)| sample_variance(v).is_none_or(|s| s < min_variance))
        .map(|(g, _)| g.to_string())
        .collect();
    for g in &low {
        log::info!("dropping low-variance ST gene {g}");
    }
    out.retain(|m| !low.contains(&m.gene_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRho {
    pub slide_id: String,
    pub gene_id: String,
    pub n: usize,
    pub rho: Option<f64>,
    /// Fewer than four ROIs.
    pub small_n: bool,
}

/// Within-slide Spearman ρ between predictions and measurements.
pub fn slide_spearman(slide_id: &str, gene_id: &str, pred: &[f64], obs: &[f64]) -> SlideRho {
    let n = pred.len();
    let rho = if n >= 4 {
        spearman(pred, obs).ok().map(|s| s.rho)
    } else if n >= 2 {
        small_n_rho(pred, obs)
    } else {
        None
    };
    SlideRho {
        slide_id: slide_id.to_string(),
        gene_id: gene_id.to_string(),
        n,
        rho,
        small_n: n < 4,
    }
}

fn small_n_rho(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (midranks(a), midranks(b));
    let (ma, mb) = (mean(&ra)?, mean(&rb)?);
    let sab: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let saa: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let sbb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Quartiles of the defined per-slide ρ values for one gene.
pub fn rho_quartiles(rhos: &[SlideRho]) -> Option<[f64; 3]> {
    let v: Vec<f64> = rhos.iter().filter_map(|r| r.rho).collect();
    Some([percentile(&v, 25.0)?, percentile(&v, 50.0)?, percentile(&v, 75.0)?])
}

pub fn slide_rho_to_tsv(rows: &[SlideRho]) -> String {
    let mut w = Writer::new(&["slide_id", "gene_id", "n", "rho", "small_n"]);
    for r in rows {
        w.row(&[r.slide_id.clone(), r.gene_id.clone(), r.n.to_string(), fmt_opt(r.rho), r.small_n.to_string()]);
    }
    w.finish()
}
