//! Gene-level evaluation of predicted against measured expression.

use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tsv::{fmt_opt, Table, Writer};

/// Mid-ranks (1-based); tied values share the mean of their positions.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided p-value for a Spearman ρ from the t approximation.
pub fn spearman_t_pvalue(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("spearman: lengths differ ({} vs {})", x.len(), y.len())));
    }
    if x.len() < 4 {
        return Err(Error::invalid(format!("spearman needs n >= 4, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman: non-finite input"));
    }
    let rho = pearson(&midranks(x), &midranks(y))
        .ok_or_else(|| Error::UndefinedCorrelation("constant input vector".into()))?;
    Ok(Spearman {
        rho,
        p: spearman_t_pvalue(rho, x.len()),
        n: x.len(),
    })
}

/// Exact two-sided permutation p-value; only offered for n ≤ 9.
pub fn spearman_exact_p(x: &[f64], y: &[f64]) -> Result<f64> {
    let s = spearman(x, y)?;
    if x.len() > 9 {
        return Err(Error::invalid("exact spearman p is limited to n <= 9"));
    }
    let rx = midranks(x);
    let mut ry = midranks(y);
    let n = ry.len();
    let target = s.rho.abs() - 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    // Heap's algorithm over all n! orderings of y's ranks.
    let mut c = vec![0usize; n];
    let mut visit = |ry: &[f64]| {
        total += 1;
        if pearson(&rx, ry).is_some_and(|r| r.abs() >= target) {
            hits += 1;
        }
    };
    visit(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            visit(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        running = running.min(m as f64 / (pos + 1) as f64 * p[i]);
        out[i] = running.min(1.0);
    }
    out
}

pub fn bonferroni_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter().map(|&v| (m * v).min(1.0)).collect()
}

/// 1 − SS_res / SS_tot; unbounded below.
pub fn r2_pred(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() || observed.len() < 2 {
        return Err(Error::invalid("r2_pred needs two equal-length vectors with n >= 2"));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedCorrelation("constant observed vector".into()));
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(y, f)| (y - f).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneStat {
    pub gene_id: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub p_adj_bh: Option<f64>,
    pub p_adj_bonf: Option<f64>,
    pub r2_pred: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsOptions {
    pub r2_min: f64,
    pub padj_max: f64,
    pub alpha: f64,
    /// Permutation p-values for genes with n ≤ 9.
    pub exact_small_n: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            r2_min: 0.2,
            padj_max: 0.001,
            alpha: 0.05,
            exact_small_n: false,
        }
    }
}

/// Paired (predicted, observed) values for one gene; `None` predictions are
/// dropped pairwise.
pub struct GenePairs {
    pub gene_id: String,
    pub pairs: Vec<(Option<f64>, f64)>,
}

/// Per-gene ρ, p and R², then BH and Bonferroni across the genes whose
/// statistics are defined. Output is sorted by gene id.
pub fn gene_stats(genes: &[GenePairs], opts: &StatsOptions) -> Vec<GeneStat> {
    let mut out: Vec<GeneStat> = genes
        .iter()
        .map(|g| {
            let kept: Vec<(f64, f64)> = g.pairs.iter().filter_map(|&(p, o)| p.map(|p| (p, o))).collect();
            let dropped = g.pairs.len() - kept.len();
            if dropped > 0 {
                log::info!("{}: dropped {dropped} missing prediction(s)", g.gene_id);
            }
            let pred: Vec<f64> = kept.iter().map(|v| v.0).collect();
            let obs: Vec<f64> = kept.iter().map(|v| v.1).collect();
            let mut st = GeneStat {
                gene_id: g.gene_id.clone(),
                n: kept.len(),
                rho: None,
                p: None,
                p_adj_bh: None,
                p_adj_bonf: None,
                r2_pred: r2_pred(&obs, &pred).ok(),
                selected: false,
            };
            match spearman(&pred, &obs) {
                Ok(s) => {
                    st.rho = Some(s.rho);
                    st.p = Some(if opts.exact_small_n && s.n <= 9 {
                        spearman_exact_p(&pred, &obs).unwrap_or(s.p)
                    } else {
                        s.p
                    });
                }
                Err(e) => log::warn!("{}: {e}", g.gene_id),
            }
            st
        })
        .collect();
    out.sort_by(|a, b| a.gene_id.cmp(&b.gene_id));
    let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].p.is_some()).collect();
    let ps: Vec<f64> = idx.iter().map(|&i| out[i].p.unwrap()).collect();
    let bh = bh_adjust(&ps);
    let bonf = bonferroni_adjust(&ps);
    for (k, &i) in idx.iter().enumerate() {
        out[i].p_adj_bh = Some(bh[k]);
        out[i].p_adj_bonf = Some(bonf[k]);
    }
    for s in &mut out {
        s.selected = is_selected(s, opts.r2_min, opts.padj_max);
    }
    out
}

fn is_selected(s: &GeneStat, r2_min: f64, padj_max: f64) -> bool {
    matches!((s.r2_pred, s.p_adj_bh), (Some(r2), Some(p)) if r2 > r2_min && p < padj_max)
}

/// Genes with R² strictly above `r2_min` and BH p strictly below `padj_max`,
/// ordered by gene id.
pub fn select_genes(stats: &[GeneStat], r2_min: f64, padj_max: f64) -> Vec<GeneStat> {
    let mut out: Vec<GeneStat> = stats
        .iter()
        .filter(|s| is_selected(s, r2_min, padj_max))
        .cloned()
        .map(|mut s| {
            s.selected = true;
            s
        })
        .collect();
    out.sort_by(|a, b| a.gene_id.cmp(&b.gene_id));
    out
}

/// Count and fraction of genes with BH-adjusted p below `alpha`.
pub fn significance_count(stats: &[GeneStat], alpha: f64) -> (usize, f64) {
    let count = stats.iter().filter(|s| s.p_adj_bh.is_some_and(|p| p < alpha)).count();
    let frac = if stats.is_empty() { 0.0 } else { count as f64 / stats.len() as f64 };
    (count, frac)
}

pub const STATS_HEADER: [&str; 8] = ["gene_id", "n", "rho", "p", "p_adj_bh", "p_adj_bonf", "r2_pred", "selected"];

pub fn stats_to_tsv(stats: &[GeneStat]) -> String {
    let mut w = Writer::new(&STATS_HEADER);
    for s in stats {
        w.row(&[
            s.gene_id.clone(),
            s.n.to_string(),
            fmt_opt(s.rho),
            fmt_opt(s.p),
            fmt_opt(s.p_adj_bh),
            fmt_opt(s.p_adj_bonf),
            fmt_opt(s.r2_pred),
            s.selected.to_string(),
        ]);
    }
    w.finish()
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<Vec<GeneStat>> {
    let t = Table::read(path)?;
    let c = t.columns(STATS_HEADER)?;
    (0..t.rows.len())
        .map(|i| {
            let r = &t.rows[i];
            Ok(GeneStat {
                gene_id: r[c[0]].clone(),
                n: t.u64_at(i, c[1])? as usize,
                rho: t.opt_f64_at(i, c[2])?,
                p: t.opt_f64_at(i, c[3])?,
                p_adj_bh: t.opt_f64_at(i, c[4])?,
                p_adj_bonf: t.opt_f64_at(i, c[5])?,
                r2_pred: t.opt_f64_at(i, c[6])?,
                selected: match r[c[7]].as_str() {
                    "true" => true,
                    "false" => false,
                    other => return Err(Error::parse(&t.path, i + 2, format!("bad bool `{other}`"))),
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values below the first edge (R² is unbounded below).
    pub below: usize,
}

pub fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Histogram {
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    let mut below = 0;
    for v in values {
        if v < lo {
            below += 1;
        } else {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Histogram { edges, counts, below }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub n_genes: usize,
    pub n_tested: usize,
    pub n_significant: usize,
    pub fraction_significant: f64,
    pub alpha: f64,
    pub n_selected: usize,
    pub rho_histogram: Histogram,
    pub p_histogram: Histogram,
    pub r2_histogram: Histogram,
}

pub fn summarise(stats: &[GeneStat], opts: &StatsOptions) -> Summary {
    let (n_sig, frac) = significance_count(stats, opts.alpha);
    Summary {
        n_genes: stats.len(),
        n_tested: stats.iter().filter(|s| s.p.is_some()).count(),
        n_significant: n_sig,
        fraction_significant: frac,
        alpha: opts.alpha,
        n_selected: stats.iter().filter(|s| s.selected).count(),
        rho_histogram: histogram(stats.iter().filter_map(|s| s.rho), -1.0, 1.0, 20),
        p_histogram: histogram(stats.iter().filter_map(|s| s.p), 0.0, 1.0, 20),
        r2_histogram: histogram(stats.iter().filter_map(|s| s.r2_pred), -1.0, 1.0, 20),
    }
}
