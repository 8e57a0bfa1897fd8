//! Python bindings: statistics, mixed models, stain estimation, mask
//! post-processing, the synthetic fixture and the full pipeline.

use std::path::PathBuf;

use emo_core::pipeline::{self, Inputs, Layout, PipelineConfig};
use emo_core::raster::Raster;
use emo_core::stain::{slide_profile, SamplePlan};
use emo_core::synth::{generate, FixtureConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: emo_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Spearman's rho with its two-sided t-approximation p-value.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = emo_core::stats::spearman(&x, &y).map_err(err)?;
    Ok((s.rho, s.p))
}

/// Benjamini-Hochberg adjusted p-values, in input order.
#[pyfunction]
fn bh_adjust(p: Vec<f64>) -> Vec<f64> {
    emo_core::stats::bh_adjust(&p)
}

#[pyfunction]
fn bonferroni_adjust(p: Vec<f64>) -> Vec<f64> {
    emo_core::stats::bonferroni_adjust(&p)
}

/// 1 − SS_res / SS_tot of predictions against observations.
#[pyfunction]
fn r2_pred(observed: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    emo_core::stats::r2_pred(&observed, &predicted).map_err(err)
}

/// Random-intercept model y = b0 + b1·x + u_group + e fitted by maximum
/// likelihood, with a likelihood-ratio test of b1.
#[pyfunction]
#[pyo3(signature = (y, x, groups, gene_id = "gene"))]
fn fit_lme<'py>(py: Python<'py>, y: Vec<f64>, x: Vec<f64>, groups: Vec<String>, gene_id: &str) -> PyResult<Bound<'py, PyDict>> {
    let g: Vec<&str> = groups.iter().map(String::as_str).collect();
    let f = emo_core::lme::fit_lme(gene_id, &y, &x, &g).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("gene_id", f.gene_id)?;
    d.set_item("n_obs", f.n_obs)?;
    d.set_item("n_groups", f.n_groups)?;
    d.set_item("beta0", f.beta0)?;
    d.set_item("beta1", f.beta1)?;
    d.set_item("se_beta1", f.se_beta1)?;
    d.set_item("sigma_u2", f.sigma_u2)?;
    d.set_item("sigma_e2", f.sigma_e2)?;
    d.set_item("loglik_full", f.loglik_full)?;
    d.set_item("loglik_null", f.loglik_null)?;
    d.set_item("lrt_stat", f.lrt_stat)?;
    d.set_item("p", f.p)?;
    d.set_item("ci95_beta1", f.ci95_beta1)?;
    d.set_item("boundary", f.boundary)?;
    Ok(d)
}

/// Stain matrix (columns H, E) and 99th-percentile saturations of an
/// interleaved 8-bit RGB image.
#[pyfunction]
#[pyo3(signature = (rgb, width, height, seed = 0))]
fn stain_profile<'py>(py: Python<'py>, rgb: &[u8], width: usize, height: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let tile = Raster::from_vec(width, height, 3, rgb.to_vec()).map_err(err)?;
    let plan = SamplePlan {
        seed,
        ..SamplePlan::default()
    };
    let p = py
        .detach(|| slide_profile(std::slice::from_ref(&tile), "image", &plan, &Default::default()))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("h", p.stain_matrix.column(0).to_vec())?;
    d.set_item("e", p.stain_matrix.column(1).to_vec())?;
    d.set_item("sat_ref99", p.sat_ref99.to_vec())?;
    Ok(d)
}

/// Thresholds an 8-bit probability map, fills holes and drops small
/// objects. Returns one byte per pixel, 0 or 1.
#[pyfunction]
fn tissue_mask<'py>(py: Python<'py>, prob: &[u8], width: usize, height: usize, cutoff: u8) -> PyResult<Bound<'py, PyBytes>> {
    let r = Raster::from_vec(width, height, 1, prob.to_vec()).map_err(err)?;
    let m = emo_core::segmentation::postprocess_probability_mask(&r, cutoff, 0).map_err(err)?;
    let bytes: Vec<u8> = m.bits().iter().map(|&b| b as u8).collect();
    Ok(PyBytes::new(py, &bytes))
}

/// Writes a synthetic dataset with known ground truth to `output`.
#[pyfunction]
#[pyo3(signature = (output, seed = 0, slides = 15, train = 10, genes = 20, linked = 5, mpp = 0.452, size_um = 678.0, rois = 4, roi_size_um = 300.0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    py: Python<'_>,
    output: PathBuf,
    seed: u64,
    slides: usize,
    train: usize,
    genes: usize,
    linked: usize,
    mpp: f64,
    size_um: f64,
    rois: usize,
    roi_size_um: f64,
) -> PyResult<()> {
    let cfg = FixtureConfig {
        seed,
        n_slides: slides,
        n_train: train.min(slides),
        n_genes: genes,
        n_linked: linked.min(genes),
        mpp,
        size_um,
        rois_per_slide: rois,
        roi_size_um,
        ..FixtureConfig::default()
    };
    py.detach(|| generate(&cfg)?.write(&output)).map_err(err)
}

/// Runs every stage from segmentation to statistics and returns the
/// per-gene statistics as dicts.
#[pyfunction]
#[pyo3(signature = (input, output, seed = 0, config = None))]
fn run<'py>(py: Python<'py>, input: PathBuf, output: PathBuf, seed: u64, config: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p).map_err(err)?,
        None => PipelineConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate().map_err(err)?;
    let stats = py
        .detach(|| pipeline::run_all(&cfg, &Inputs::new(input), &Layout::new(output)))
        .map_err(err)?;
    stats
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("gene_id", s.gene_id)?;
            d.set_item("n", s.n)?;
            d.set_item("rho", s.rho)?;
            d.set_item("p", s.p)?;
            d.set_item("p_adj_bh", s.p_adj_bh)?;
            d.set_item("p_adj_bonf", s.p_adj_bonf)?;
            d.set_item("r2_pred", s.r2_pred)?;
            d.set_item("selected", s.selected)?;
            Ok(d)
        })
        .collect()
}

/// The default pipeline configuration as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    PipelineConfig::default().to_json().map_err(err)
}

#[pymodule]
fn emopy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(bh_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(r2_pred, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lme, m)?)?;
    m.add_function(wrap_pyfunction!(stain_profile, m)?)?;
    m.add_function(wrap_pyfunction!(tissue_mask, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
