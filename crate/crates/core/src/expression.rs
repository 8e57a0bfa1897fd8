//! Bulk expression tables: low-variance gene filtering and cross-cohort
//! median normalisation.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{median, sample_variance};
use crate::tsv::{fmt_f64, Table, Writer};

/// Genes × samples matrix of log-scale expression values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub genes: Vec<String>,
    pub samples: Vec<String>,
    /// Row-major, one row per gene.
    pub values: Vec<Vec<f64>>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

impl ExpressionMatrix {
    pub fn new(genes: Vec<String>, samples: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_unique(&genes, "gene")?;
        check_unique(&samples, "sample")?;
        if values.len() != genes.len() || values.iter().any(|r| r.len() != samples.len()) {
            return Err(Error::invalid("expression matrix shape does not match its ids"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("expression values must be finite"));
        }
        Ok(ExpressionMatrix { genes, samples, values })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let t = Table::read(path)?;
        if t.header.first().map(String::as_str) != Some("gene_id") {
            return Err(Error::parse(&t.path, 1, "first column must be `gene_id`"));
        }
        let samples = t.header[1..].to_vec();
        let mut genes = Vec::with_capacity(t.rows.len());
        let mut values = Vec::with_capacity(t.rows.len());
        for (i, row) in t.rows.iter().enumerate() {
            genes.push(row[0].clone());
            values.push((1..row.len()).map(|c| t.f64_at(i, c)).collect::<Result<Vec<_>>>()?);
        }
        ExpressionMatrix::new(genes, samples, values)
    }

    pub fn to_tsv(&self) -> String {
        let mut header = vec!["gene_id"];
        header.extend(self.samples.iter().map(String::as_str));
        let mut w = Writer::new(&header);
        for (g, row) in self.genes.iter().zip(&self.values) {
            let mut fields = vec![g.clone()];
            fields.extend(row.iter().map(|&v| fmt_f64(v)));
            w.row(&fields);
        }
        w.finish()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn sample_index(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s == id)
    }

    pub fn gene_index(&self, id: &str) -> Option<usize> {
        self.genes.iter().position(|g| g == id)
    }

    /// Column indices of the given sample ids; unknown ids are an error.
    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = self.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        ids.iter()
            .map(|id| lookup.get(id.as_str()).copied().ok_or_else(|| Error::invalid(format!("unknown sample `{id}`"))))
            .collect()
    }

    pub fn value(&self, gene: &str, sample: &str) -> Option<f64> {
        Some(self.values[self.gene_index(gene)?][self.sample_index(sample)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Tune,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "tune" => Ok(Split::Tune),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Tune => "tune",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleInfo {
    pub sample_id: String,
    pub cohort: String,
    pub split: Split,
}

pub const SAMPLE_HEADER: [&str; 3] = ["sample_id", "cohort", "split"];

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SampleInfo>> {
    let t = Table::read(path)?;
    let [c_id, c_cohort, c_split] = t.columns(SAMPLE_HEADER)?;
    let out: Vec<SampleInfo> = t
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(SampleInfo {
                sample_id: r[c_id].clone(),
                cohort: r[c_cohort].clone(),
                split: r[c_split].parse().map_err(|e: Error| Error::parse(&t.path, i + 2, e.to_string()))?,
            })
        })
        .collect::<Result<_>>()?;
    check_unique(&out.iter().map(|s| s.sample_id.clone()).collect::<Vec<_>>(), "sample")?;
    Ok(out)
}

pub fn samples_to_tsv(samples: &[SampleInfo]) -> String {
    let mut w = Writer::new(&SAMPLE_HEADER);
    for s in samples {
        w.row(&[s.sample_id.clone(), s.cohort.clone(), s.split.to_string()]);
    }
    w.finish()
}

/// Keeps genes whose unbiased variance over `subset` is strictly above `min_var`.
pub fn variance_filter(m: &ExpressionMatrix, min_var: f64, subset: &[usize]) -> Result<ExpressionMatrix> {
    if subset.is_empty() {
        return Err(Error::invalid("variance filter needs a non-empty sample subset"));
    }
    let mut genes = Vec::new();
    let mut values = Vec::new();
    for (g, row) in m.genes.iter().zip(&m.values) {
        let sub: Vec<f64> = subset.iter().map(|&j| row[j]).collect();
        if sample_variance(&sub).is_some_and(|v| v > min_var) {
            genes.push(g.clone());
            values.push(row.clone());
        }
    }
    Ok(ExpressionMatrix {
        genes,
        samples: m.samples.clone(),
        values,
    })
}

/// Per-gene additive offsets, in gene order.
#[derive(Debug, Clone, PartialEq)]
pub struct Offsets {
    pub genes: Vec<String>,
    pub offsets: Vec<f64>,
}

impl Offsets {
    pub fn to_tsv(&self) -> String {
        let mut w = Writer::new(&["gene_id", "offset"]);
        for (g, o) in self.genes.iter().zip(&self.offsets) {
            w.row(&[g.clone(), fmt_f64(*o)]);
        }
        w.finish()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let t = Table::read(path)?;
        let [c_g, c_o] = t.columns(["gene_id", "offset"])?;
        let mut genes = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..t.rows.len() {
            genes.push(t.rows[i][c_g].clone());
            offsets.push(t.f64_at(i, c_o)?);
        }
        Ok(Offsets { genes, offsets })
    }
}

fn gene_medians(m: &ExpressionMatrix, cols: &[usize]) -> Vec<f64> {
    m.values
        .iter()
        .map(|row| median(&cols.iter().map(|&j| row[j]).collect::<Vec<_>>()).expect("non-empty"))
        .collect()
}

fn cohort_columns(m: &ExpressionMatrix, samples: &[SampleInfo], cohort: &str, among: &[usize]) -> Result<Vec<usize>> {
    let cohort_of: HashMap<&str, &str> = samples.iter().map(|s| (s.sample_id.as_str(), s.cohort.as_str())).collect();
    let cols: Vec<usize> = among
        .iter()
        .copied()
        .filter(|&j| cohort_of.get(m.samples[j].as_str()) == Some(&cohort))
        .collect();
    if cols.is_empty() {
        return Err(Error::invalid(format!("cohort `{cohort}` has no samples in the fit set")));
    }
    Ok(cols)
}

/// offset_g = median over reference − median over source, both restricted
/// to `fit_samples`.
pub fn median_offsets(
    m: &ExpressionMatrix,
    samples: &[SampleInfo],
    source: &str,
    reference: &str,
    fit_samples: &[usize],
) -> Result<Offsets> {
    let src = cohort_columns(m, samples, source, fit_samples)?;
    let refc = cohort_columns(m, samples, reference, fit_samples)?;
    let ms = gene_medians(m, &src);
    let mr = gene_medians(m, &refc);
    Ok(Offsets {
        genes: m.genes.clone(),
        offsets: mr.iter().zip(&ms).map(|(r, s)| r - s).collect(),
    })
}

pub fn apply_offsets(m: &ExpressionMatrix, offsets: &Offsets, targets: &[usize]) -> Result<ExpressionMatrix> {
    let lookup: HashMap<&str, f64> = offsets.genes.iter().map(String::as_str).zip(offsets.offsets.iter().copied()).collect();
    let mut out = m.clone();
    for (g, row) in out.genes.iter().zip(out.values.iter_mut()) {
        let o = *lookup
            .get(g.as_str())
            .ok_or_else(|| Error::invalid(format!("no offset for gene `{g}`")))?;
        for &j in targets {
            row[j] += o;
        }
    }
    Ok(out)
}

/// Shifts every cohort other than `reference` so its per-gene medians match
/// the reference medians frozen on `reference_fit` (sample indices).
pub fn test_phase_normalise(
    m: &ExpressionMatrix,
    samples: &[SampleInfo],
    reference: &str,
    reference_fit: &[usize],
) -> Result<ExpressionMatrix> {
    let refc = cohort_columns(m, samples, reference, reference_fit)?;
    let frozen = gene_medians(m, &refc);
    let cohort_of: HashMap<&str, &str> = samples.iter().map(|s| (s.sample_id.as_str(), s.cohort.as_str())).collect();
    let mut cohorts: Vec<&str> = Vec::new();
    for s in &m.samples {
        let c = *cohort_of
            .get(s.as_str())
            .ok_or_else(|| Error::invalid(format!("sample `{s}` missing from the sample manifest")))?;
        if c != reference && !cohorts.contains(&c) {
            cohorts.push(c);
        }
    }
    let all: Vec<usize> = (0..m.samples.len()).collect();
    let mut out = m.clone();
    for c in cohorts {
        let cols = cohort_columns(m, samples, c, &all)?;
        let med = gene_medians(m, &cols);
        for (g, row) in out.values.iter_mut().enumerate() {
            let o = frozen[g] - med[g];
            for &j in &cols {
                row[j] += o;
            }
        }
    }
    Ok(out)
}
