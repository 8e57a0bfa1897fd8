use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Raster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Lanczos,
    Nearest,
}

const LANCZOS_A: f64 = 3.0;

fn lanczos(x: f64) -> f64 {
    let x = x.abs();
    if x < 1e-12 {
        1.0
    } else if x >= LANCZOS_A {
        0.0
    } else {
        let px = PI * x;
        LANCZOS_A * px.sin() * (px / LANCZOS_A).sin() / (px * px)
    }
}

/// Per output sample: first source index and normalised weights over a
/// contiguous, edge-clamped source window.
struct Taps {
    start: Vec<usize>,
    weights: Vec<Vec<f32>>,
}

fn lanczos_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = LANCZOS_A * stretch;
    let mut start = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale;
        let lo = (center - support).floor() as i64;
        let hi = (center + support).ceil() as i64;
        // Accumulate weights on clamped indices (edge replication).
        let first = lo.clamp(0, in_len as i64 - 1) as usize;
        let last = hi.clamp(0, in_len as i64 - 1) as usize;
        let mut w = vec![0.0f64; last - first + 1];
        for j in lo..=hi {
            let wj = lanczos((j as f64 + 0.5 - center) / stretch);
            if wj != 0.0 {
                let k = j.clamp(0, in_len as i64 - 1) as usize;
                w[k - first] += wj;
            }
        }
        let sum: f64 = w.iter().sum();
        start.push(first);
        weights.push(w.iter().map(|v| (v / sum) as f32).collect());
    }
    Taps { start, weights }
}

/// Resizes to exact output dimensions.
pub fn resize(raster: &Raster, out_w: usize, out_h: usize, method: Method) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!("degenerate output size {out_w}x{out_h}")));
    }
    if raster.width() == 0 || raster.height() == 0 {
        return Err(Error::invalid("cannot resample an empty raster"));
    }
    if out_w == raster.width() && out_h == raster.height() {
        return Ok(raster.clone());
    }
    match method {
        Method::Nearest => Ok(resize_nearest(raster, out_w, out_h)),
        Method::Lanczos => Ok(resize_lanczos(raster, out_w, out_h)),
    }
}

/// Resamples by a scale factor; output dimensions are `round(input / factor)`.
pub fn resample(raster: &Raster, factor: f64, method: Method) -> Result<Raster> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("resample factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(raster.clone());
    }
    let w = (raster.width() as f64 / factor).round() as usize;
    let h = (raster.height() as f64 / factor).round() as usize;
    resize(raster, w, h, method)
}

fn resize_nearest(src: &Raster, out_w: usize, out_h: usize) -> Raster {
    let c = src.channels();
    let sx = src.width() as f64 / out_w as f64;
    let sy = src.height() as f64 / out_h as f64;
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let yy = ((y as f64 * sy).floor() as usize).min(src.height() - 1);
        for x in 0..out_w {
            let xx = ((x as f64 * sx).floor() as usize).min(src.width() - 1);
            data.extend_from_slice(src.pixel(xx, yy));
        }
    }
    Raster::from_vec(out_w, out_h, c, data).expect("dims")
}

fn resize_lanczos(src: &Raster, out_w: usize, out_h: usize) -> Raster {
    let c = src.channels();
    let (in_w, in_h) = (src.width(), src.height());
    let hx = lanczos_taps(in_w, out_w);
    let hy = lanczos_taps(in_h, out_h);
    let data = src.data();

    // Horizontal pass into a float buffer of in_h rows × out_w columns.
    let mut tmp = vec![0.0f32; in_h * out_w * c];
    for y in 0..in_h {
        let row = &data[y * in_w * c..(y + 1) * in_w * c];
        let out_row = &mut tmp[y * out_w * c..(y + 1) * out_w * c];
        for x in 0..out_w {
            let s = hx.start[x];
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (k, w) in hx.weights[x].iter().enumerate() {
                    acc += w * row[(s + k) * c + ch] as f32;
                }
                out_row[x * c + ch] = acc;
            }
        }
    }

    let mut out = vec![0u8; out_w * out_h * c];
    let stride = out_w * c;
    for y in 0..out_h {
        let s = hy.start[y];
        let out_row = &mut out[y * stride..(y + 1) * stride];
        let mut acc = vec![0.0f32; stride];
        for (k, w) in hy.weights[y].iter().enumerate() {
            let src_row = &tmp[(s + k) * stride..(s + k + 1) * stride];
            for (a, v) in acc.iter_mut().zip(src_row) {
                *a += w * v;
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a.round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::from_vec(out_w, out_h, c, out).expect("dims")
}
