use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{resize, Method, Raster};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub factor: f64,
    pub width: usize,
    pub height: usize,
}

/// Slide geometry: physical pixel size at full resolution plus the pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMeta {
    pub slide_id: String,
    /// Micrometres per pixel at level 0.
    pub mpp: f64,
    pub levels: Vec<Level>,
}

impl SlideMeta {
    /// Builds a pyramid with the given downsample factors over a level-0 size.
    pub fn with_factors(slide_id: impl Into<String>, mpp: f64, width: usize, height: usize, factors: &[f64]) -> Self {
        let levels = factors
            .iter()
            .map(|&f| Level {
                factor: f,
                width: ((width as f64 / f).round() as usize).max(1),
                height: ((height as f64 / f).round() as usize).max(1),
            })
            .collect();
        SlideMeta {
            slide_id: slide_id.into(),
            mpp,
            levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mpp > 0.0) || !self.mpp.is_finite() {
            return Err(Error::invalid(format!("slide {}: mpp must be positive", self.slide_id)));
        }
        let first = self
            .levels
            .first()
            .ok_or_else(|| Error::invalid(format!("slide {}: no levels", self.slide_id)))?;
        if first.factor != 1.0 {
            return Err(Error::invalid(format!(
                "slide {}: level 0 downsample factor must be 1",
                self.slide_id
            )));
        }
        for pair in self.levels.windows(2) {
            if pair[1].factor <= pair[0].factor {
                return Err(Error::invalid(format!(
                    "slide {}: level factors must be strictly increasing",
                    self.slide_id
                )));
            }
        }
        if self.levels.iter().any(|l| l.width == 0 || l.height == 0) {
            return Err(Error::invalid(format!("slide {}: zero-sized level", self.slide_id)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    pub fn level(&self, k: usize) -> Result<&Level> {
        self.levels
            .get(k)
            .ok_or_else(|| Error::invalid(format!("slide {}: no level {k}", self.slide_id)))
    }

    /// Index of the level whose factor is closest to `target` on a log scale.
    pub fn level_nearest(&self, target: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, l) in self.levels.iter().enumerate() {
            let d = (l.factor.ln() - target.ln()).abs();
            if d < best_d - 1e-12 {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Level whose dimensions match a raster, for masks written without metadata.
    pub fn level_for_dims(&self, width: usize, height: usize) -> Option<usize> {
        self.levels
            .iter()
            .position(|l| l.width == width && l.height == height)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SlideMeta> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let meta: SlideMeta = serde_json::from_str(&text)?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A slide with every pyramid level materialised.
#[derive(Debug, Clone)]
pub struct Slide {
    pub meta: SlideMeta,
    pub levels: Vec<Raster>,
}

impl Slide {
    /// Builds the lower levels from level 0 with Lanczos resampling.
    pub fn from_level0(meta: SlideMeta, level0: Raster) -> Result<Slide> {
        meta.validate()?;
        if level0.width() != meta.width() || level0.height() != meta.height() {
            return Err(Error::invalid(format!(
                "slide {}: image is {}x{}, metadata says {}x{}",
                meta.slide_id,
                level0.width(),
                level0.height(),
                meta.width(),
                meta.height()
            )));
        }
        level0.require_rgb("slide")?;
        let mut levels = vec![level0];
        for l in &meta.levels[1..] {
            let r = resize(&levels[0], l.width, l.height, Method::Lanczos)?;
            levels.push(r);
        }
        Ok(Slide { meta, levels })
    }

    pub fn level0(&self) -> &Raster {
        &self.levels[0]
    }

    /// Opens either `<stem>.png|.jpg` with a `<stem>.json` sidecar, or a
    /// pyramid directory holding `slide.json` and `level_<k>/image.png`.
    /// Pyramid levels without an image are generated from level 0.
    pub fn open(path: impl AsRef<Path>) -> Result<Slide> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        if path.is_dir() {
            let meta = SlideMeta::load(path.join("slide.json"))?;
            let level0 = Raster::load(path.join("level_0").join("image.png"))?;
            let mut slide = Slide::from_level0(meta, level0)?;
            for k in 1..slide.meta.levels.len() {
                let p = path.join(format!("level_{k}")).join("image.png");
                if p.exists() {
                    let r = Raster::load(&p)?;
                    let l = slide.meta.levels[k];
                    if r.width() != l.width || r.height() != l.height {
                        return Err(Error::invalid(format!("{}: dimensions disagree with slide.json", p.display())));
                    }
                    slide.levels[k] = r;
                }
            }
            Ok(slide)
        } else {
            let meta = SlideMeta::load(sidecar_path(path))?;
            let level0 = Raster::load(path)?;
            Slide::from_level0(meta, level0)
        }
    }

    /// Writes `<dir>/<slide_id>.png` plus its JSON sidecar.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let png = dir.join(format!("{}.png", self.meta.slide_id));
        self.level0().save_png(&png)?;
        self.meta.save(sidecar_path(&png))?;
        Ok(png)
    }
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}
