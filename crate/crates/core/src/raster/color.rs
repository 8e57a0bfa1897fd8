use std::sync::OnceLock;

use super::Raster;
use crate::error::Result;

/// Hue, saturation and value of one pixel, each scaled to `0..=255`.
///
/// Achromatic pixels get hue 0.
pub fn rgb_to_hsv_px([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        ((gf - bf) / delta).rem_euclid(6.0) / 6.0
    } else if max == gf {
        ((bf - rf) / delta + 2.0) / 6.0
    } else {
        ((rf - gf) / delta + 4.0) / 6.0
    };
    [
        (h * 255.0).round() as u8,
        (s * 255.0).round() as u8,
        max as u8,
    ]
}

pub fn rgb_to_hsv(raster: &Raster) -> Result<Raster> {
    raster.require_rgb("rgb_to_hsv")?;
    raster.map_rgb(rgb_to_hsv_px)
}

// sRGB primaries, D65 white.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

fn white() -> [f64; 3] {
    let mut w = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
}

fn srgb_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            let c = i as f64 / 255.0;
            *v = if c <= 0.040_45 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            };
        }
        t
    })
}

fn srgb_encode_thresholds() -> &'static [f64; 255] {
    static T: OnceLock<[f64; 255]> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = [0.0; 255];
        for (k, v) in t.iter_mut().enumerate() {
            let c = (k as f64 + 0.5) / 255.0;
            *v = if c <= 0.040_45 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            };
        }
        t
    })
}

/// `round(255 * srgb(c))` by counting the linear-light rounding thresholds
/// at or below `c`.
fn linear_to_srgb8(c: f64) -> u8 {
    srgb_encode_thresholds().partition_point(|&t| t <= c) as u8
}

#[cfg(test)]
fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn lab_f(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPS {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// CIELAB lightness alone, 0..100.
pub(crate) fn rgb_to_l_f64(rgb: [u8; 3]) -> f64 {
    let lut = srgb_lut();
    let y = RGB_TO_XYZ[1][0] * lut[rgb[0] as usize] + RGB_TO_XYZ[1][1] * lut[rgb[1] as usize] + RGB_TO_XYZ[1][2] * lut[rgb[2] as usize];
    116.0 * lab_f(y / white()[1]) - 16.0
}

/// CIELAB (D65) of one pixel as floats: `L` in 0..100, `a`/`b` unbounded.
pub(crate) fn rgb_to_lab_f64(rgb: [u8; 3]) -> [f64; 3] {
    let lut = srgb_lut();
    let lin = [lut[rgb[0] as usize], lut[rgb[1] as usize], lut[rgb[2] as usize]];
    let w = white();
    let mut xyz = [0.0; 3];
    for i in 0..3 {
        xyz[i] = (RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2])
            / w[i];
    }
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub(crate) fn lab_f64_to_rgb([l, a, b]: [f64; 3]) -> [u8; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let w = white();
    let xyz = [lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]];
    let mut out = [0u8; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let lin = XYZ_TO_RGB[i][0] * xyz[0] + XYZ_TO_RGB[i][1] * xyz[1] + XYZ_TO_RGB[i][2] * xyz[2];
        *o = linear_to_srgb8(lin);
    }
    out
}

/// 8-bit LAB encoding: `L` rescaled 0..100 → 0..255, `a`/`b` offset by 128.
pub fn rgb_to_lab_px(rgb: [u8; 3]) -> [u8; 3] {
    let [l, a, b] = rgb_to_lab_f64(rgb);
    [
        (l * 255.0 / 100.0).round().clamp(0.0, 255.0) as u8,
        (a + 128.0).round().clamp(0.0, 255.0) as u8,
        (b + 128.0).round().clamp(0.0, 255.0) as u8,
    ]
}

pub fn lab_to_rgb_px([l, a, b]: [u8; 3]) -> [u8; 3] {
    lab_f64_to_rgb([l as f64 * 100.0 / 255.0, a as f64 - 128.0, b as f64 - 128.0])
}

pub fn rgb_to_lab(raster: &Raster) -> Result<Raster> {
    raster.require_rgb("rgb_to_lab")?;
    raster.map_rgb(rgb_to_lab_px)
}

pub fn lab_to_rgb(raster: &Raster) -> Result<Raster> {
    raster.require_rgb("lab_to_rgb")?;
    raster.map_rgb(lab_to_rgb_px)
}

/// Optical density of one RGB pixel, `-log10(I / I0)` per channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdPixel(pub [f64; 3]);

impl OdPixel {
    pub fn max_channel(&self) -> f64 {
        self.0[0].max(self.0[1]).max(self.0[2])
    }
}

/// Intensities are clamped to at least 1 so that black pixels have a finite
/// density; intensities above `I0` give zero density.
pub fn to_od(rgb: [u8; 3], background: [f64; 3]) -> OdPixel {
    if background == [255.0; 3] {
        let lut = od_lut();
        return OdPixel([lut[rgb[0] as usize], lut[rgb[1] as usize], lut[rgb[2] as usize]]);
    }
    let mut od = [0.0; 3];
    for c in 0..3 {
        od[c] = od_of(rgb[c], background[c]);
    }
    OdPixel(od)
}

fn od_of(v: u8, background: f64) -> f64 {
    let i = (v as f64).max(1.0);
    (-(i / background).log10()).max(0.0)
}

fn od_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| std::array::from_fn(|v| od_of(v as u8, 255.0)))
}

/// Densities at which `round(255 * 10^-od)` steps down, decreasing.
fn od_thresholds() -> &'static [f64; 255] {
    static T: OnceLock<[f64; 255]> = OnceLock::new();
    T.get_or_init(|| std::array::from_fn(|k| -((k as f64 + 0.5) / 255.0).log10()))
}

pub fn from_od(od: OdPixel, background: [f64; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    if background == [255.0; 3] {
        let t = od_thresholds();
        for c in 0..3 {
            out[c] = t.partition_point(|&d| d >= od.0[c]) as u8;
        }
        return out;
    }
    for c in 0..3 {
        let i = background[c] * 10f64.powf(-od.0[c]);
        out[c] = i.round().clamp(0.0, 255.0) as u8;
    }
    out
}
