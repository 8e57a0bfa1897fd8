//! 8-bit raster model, colour conversions, optical density and resampling.
//!
//! Every image in the pipeline is a [`Raster`]: row-major interleaved 8-bit
//! samples with one (masks, probability maps, heatmaps) or three (RGB)
//! channels.

pub(crate) mod color;
mod resample;
mod slide;

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub use color::{
    from_od, lab_to_rgb, lab_to_rgb_px, rgb_to_hsv, rgb_to_hsv_px, rgb_to_lab, rgb_to_lab_px,
    to_od, OdPixel,
};
pub use resample::{resample, resize, Method};
pub use slide::{sidecar_path, Level, Slide, SlideMeta};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a 3-channel raster by evaluating `f(x, y)` for every pixel.
    pub fn from_fn_rgb(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let p = self.pixel(x, y);
        [p[0], p[1], p[2]]
    }

    /// Iterates RGB triples in row-major order. Panics on 1-channel rasters.
    pub fn rgb_pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        assert_eq!(self.channels, 3);
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn require_rgb(&self, what: &str) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::invalid(format!(
                "{what} requires a 3-channel raster, got {} channel(s)",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Applies a pure per-colour function to every RGB pixel, memoised by colour.
    pub fn map_rgb(&self, f: impl Fn([u8; 3]) -> [u8; 3]) -> Result<Raster> {
        self.require_rgb("map_rgb")?;
        let mut out = self.clone();
        let mut cache = ColourCache::new();
        for p in out.data.chunks_exact_mut(3) {
            let q = cache.get([p[0], p[1], p[2]], &f);
            p.copy_from_slice(&q);
        }
        Ok(out)
    }
    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).expect("dims"))
        } else {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).expect("dims"))
        }
    }

    pub fn from_dynamic(img: DynamicImage) -> Raster {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data: g.into_raw(),
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Raster {
                    width: w as usize,
                    height: h as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Raster::from_dynamic(img))
    }

    /// Writes a PNG (lossless).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_dynamic()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let mut enc = JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
        enc.encode_image(&self.to_dynamic()).map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
        Ok(buf)
    }

    pub fn decode_jpeg(bytes: &[u8]) -> Result<Raster> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Jpeg).map_err(|source| {
            Error::Image {
                path: "<memory>".into(),
                source,
            }
        })?;
        Ok(Raster::from_dynamic(img))
    }

    /// Encodes and decodes through JPEG, yielding exactly what a reader of
    /// the written file would see.
    pub fn jpeg_roundtrip(&self, quality: u8) -> Result<Raster> {
        Raster::decode_jpeg(&self.encode_jpeg(quality)?)
    }

    pub fn save_jpeg(&self, path: impl AsRef<Path>, quality: u8) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_jpeg(quality)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Direct-mapped memo of a pure function of an RGB colour.
pub(crate) struct ColourCache<T> {
    keys: Vec<u32>,
    vals: Vec<T>,
}

impl<T: Copy + Default> ColourCache<T> {
    const BITS: u32 = 14;

    pub(crate) fn new() -> Self {
        ColourCache {
            keys: vec![u32::MAX; 1 << Self::BITS],
            vals: vec![T::default(); 1 << Self::BITS],
        }
    }

    #[inline]
    pub(crate) fn get(&mut self, rgb: [u8; 3], f: impl Fn([u8; 3]) -> T) -> T {
        let key = (rgb[0] as u32) << 16 | (rgb[1] as u32) << 8 | rgb[2] as u32;
        let slot = (key.wrapping_mul(0x9e37_79b1) >> (32 - Self::BITS)) as usize;
        if self.keys[slot] != key {
            self.keys[slot] = key;
            self.vals[slot] = f(rgb);
        }
        self.vals[slot]
    }
}
