//! sRGB ⇄ CIELAB / HSV conversions and statistic-jitter stain augmentation.
//!
//! LAB uses the D65 white point with the 2° observer. HSV is the hexcone
//! model with hue in degrees `[0, 360)` and saturation/value in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RngStream;
use crate::raster::Raster;

/// Three float channels per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ChannelImage {
    /// Population mean and standard deviation of each channel.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.data.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for px in &self.data {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for px in &self.data {
            for c in 0..3 {
                var[c] += (px[c] - mean[c]).powi(2);
            }
        }
        (mean, var.map(|v| (v / n).sqrt()))
    }
}

// sRGB (D65) to XYZ.
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

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

// White point as the image of RGB (1,1,1), so white maps to a = b = 0 exactly.
fn white_point() -> [f64; 3] {
    [
        RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
        RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
        RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
    ]
}

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > LAB_EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let xyz = [0, 1, 2].map(|r| {
        RGB_TO_XYZ[r][0] * lin[0] + RGB_TO_XYZ[r][1] * lin[1] + RGB_TO_XYZ[r][2] * lin[2]
    });
    let wp = white_point();
    let (xr, yr, zr) = (xyz[0] / wp[0], xyz[1] / wp[1], xyz[2] / wp[2]);
    let l = if yr > LAB_EPSILON {
        116.0 * yr.cbrt() - 16.0
    } else {
        LAB_KAPPA * yr
    };
    let (fx, fy, fz) = (lab_f(xr), lab_f(yr), lab_f(zr));
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let [l, a, b] = lab;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let yr = if l > LAB_KAPPA * LAB_EPSILON {
        fy * fy * fy
    } else {
        l / LAB_KAPPA
    };
    let wp = white_point();
    let xyz = [lab_f_inv(fx) * wp[0], yr * wp[1], lab_f_inv(fz) * wp[2]];
    [0, 1, 2].map(|r| {
        let lin = XYZ_TO_RGB[r][0] * xyz[0] + XYZ_TO_RGB[r][1] * xyz[1] + XYZ_TO_RGB[r][2] * xyz[2];
        to_byte(linear_to_srgb(lin.clamp(0.0, 1.0)))
    })
}

pub fn rgb_pixel_to_hsv(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h >= 360.0 { h - 360.0 } else { h };
    [h, s, max]
}

pub fn hsv_pixel_to_rgb(hsv: [f64; 3]) -> [u8; 3] {
    let h = hsv[0].rem_euclid(360.0);
    let s = hsv[1].clamp(0.0, 1.0);
    let v = hsv[2].clamp(0.0, 1.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [to_byte(r + m), to_byte(g + m), to_byte(b + m)]
}

fn map_raster(r: &Raster, f: impl Fn([u8; 3]) -> [f64; 3]) -> ChannelImage {
    ChannelImage {
        width: r.width(),
        height: r.height(),
        data: r
            .pixels()
            .chunks_exact(3)
            .map(|p| f([p[0], p[1], p[2]]))
            .collect(),
    }
}

fn unmap_raster(img: &ChannelImage, f: impl Fn([f64; 3]) -> [u8; 3]) -> Raster {
    let mut pixels = Vec::with_capacity(3 * img.data.len());
    for px in &img.data {
        pixels.extend_from_slice(&f(*px));
    }
    Raster::new(img.width, img.height, pixels).expect("channel image dimensions are consistent")
}

pub fn rgb_to_lab(r: &Raster) -> ChannelImage {
    map_raster(r, rgb_pixel_to_lab)
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut colours are clamped.
pub fn lab_to_rgb(img: &ChannelImage) -> Raster {
    unmap_raster(img, lab_pixel_to_rgb)
}

pub fn rgb_to_hsv(r: &Raster) -> ChannelImage {
    map_raster(r, rgb_pixel_to_hsv)
}

pub fn hsv_to_rgb(img: &ChannelImage) -> Raster {
    unmap_raster(img, hsv_pixel_to_rgb)
}

/// Which colour space(s) the augmentation perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StainSpace {
    Lab,
    Hsv,
    /// LAB then HSV, independent draws.
    Both,
    /// One of LAB or HSV picked uniformly per call.
    Either,
}

/// Per-channel jitter magnitudes for one colour space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelJitter {
    /// σ of the additive shift applied to the channel mean.
    pub mean_sigma: [f64; 3],
    /// σ of the multiplicative factor (centred on 1) applied to the channel spread.
    pub std_sigma: [f64; 3],
}

impl ChannelJitter {
    pub const ZERO: ChannelJitter = ChannelJitter {
        mean_sigma: [0.0; 3],
        std_sigma: [0.0; 3],
    };

    fn validate(&self, what: &str) -> Result<()> {
        if self
            .mean_sigma
            .iter()
            .chain(&self.std_sigma)
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(Error::Parameter(format!("{what} jitter sigmas must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainAugConfig {
    pub enabled: bool,
    pub space: StainSpace,
    pub lab: ChannelJitter,
    pub hsv: ChannelJitter,
}

impl Default for StainAugConfig {
    fn default() -> Self {
        StainAugConfig {
            enabled: true,
            space: StainSpace::Either,
            lab: ChannelJitter {
                mean_sigma: [2.0, 1.5, 1.5],
                std_sigma: [0.08, 0.08, 0.08],
            },
            hsv: ChannelJitter {
                mean_sigma: [4.0, 0.03, 0.03],
                std_sigma: [0.05, 0.05, 0.05],
            },
        }
    }
}

impl StainAugConfig {
    pub fn disabled() -> Self {
        StainAugConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lab.validate("lab")?;
        self.hsv.validate("hsv")
    }
}

/// Smallest spread factor a draw may produce.
pub const MIN_STD_RATIO: f64 = 0.05;

/// The random quantities drawn for one colour-space pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainDraw {
    pub space: StainSpace,
    pub channel_mean: [f64; 3],
    pub mean_shift: [f64; 3],
    pub std_ratio: [f64; 3],
}

/// Perturbs per-channel statistics in LAB and/or HSV space.
pub fn stain_augment(r: &Raster, cfg: &StainAugConfig, rng: &mut RngStream) -> Result<Raster> {
    stain_augment_traced(r, cfg, rng).map(|(out, _)| out)
}

/// [`stain_augment`] that also returns the draws it applied, in order.
pub fn stain_augment_traced(
    r: &Raster,
    cfg: &StainAugConfig,
    rng: &mut RngStream,
) -> Result<(Raster, Vec<StainDraw>)> {
    if r.is_empty() {
        return Err(Error::Parameter("cannot augment an empty raster".into()));
    }
    cfg.validate()?;
    if !cfg.enabled {
        return Ok((r.clone(), Vec::new()));
    }
    let passes: Vec<StainSpace> = match cfg.space {
        StainSpace::Lab => vec![StainSpace::Lab],
        StainSpace::Hsv => vec![StainSpace::Hsv],
        StainSpace::Both => vec![StainSpace::Lab, StainSpace::Hsv],
        StainSpace::Either => {
            if rng.uniform() < 0.5 {
                vec![StainSpace::Lab]
            } else {
                vec![StainSpace::Hsv]
            }
        }
    };
    let mut current = r.clone();
    let mut draws = Vec::with_capacity(passes.len());
    for space in passes {
        let (next, draw) = match space {
            StainSpace::Lab => jitter_pass(&current, &cfg.lab, StainSpace::Lab, rng),
            _ => jitter_pass(&current, &cfg.hsv, StainSpace::Hsv, rng),
        };
        current = next;
        draws.push(draw);
    }
    Ok((current, draws))
}

fn jitter_pass(
    r: &Raster,
    jitter: &ChannelJitter,
    space: StainSpace,
    rng: &mut RngStream,
) -> (Raster, StainDraw) {
    let hsv = space == StainSpace::Hsv;
    let mut img = if hsv { rgb_to_hsv(r) } else { rgb_to_lab(r) };
    let (mean, _) = img.channel_stats();
    let mean_shift = [0, 1, 2].map(|c| rng.normal(0.0, jitter.mean_sigma[c]));
    let mut std_ratio = [0, 1, 2].map(|c| rng.normal(1.0, jitter.std_sigma[c]).max(MIN_STD_RATIO));
    if hsv {
        // Hue is circular: shifted only, never rescaled.
        std_ratio[0] = 1.0;
    }
    for px in &mut img.data {
        for c in 0..3 {
            if hsv && c == 0 {
                px[0] = (px[0] + mean_shift[0]).rem_euclid(360.0);
            } else {
                px[c] = (px[c] - mean[c]) * std_ratio[c] + mean[c] + mean_shift[c];
            }
        }
    }
    let out = if hsv { hsv_to_rgb(&img) } else { lab_to_rgb(&img) };
    (
        out,
        StainDraw {
            space,
            channel_mean: mean,
            mean_shift,
            std_ratio,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_raster(seed: u64, w: usize, h: usize) -> Raster {
        let mut rng = RngStream::new(seed, 0);
        Raster::from_fn(w, h, |_, _| [0, 0, 0].map(|_: u8| rng.below(256) as u8))
    }

    #[test]
    fn lab_anchor_points() {
        let white = rgb_pixel_to_lab([255, 255, 255]);
        assert!((white[0] - 100.0).abs() < 1e-12);
        assert!(white[1].abs() < 0.01 && white[2].abs() < 0.01);
        assert_eq!(rgb_pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
        assert_eq!(lab_pixel_to_rgb([100.0, 0.0, 0.0]), [255, 255, 255]);
        assert_eq!(lab_pixel_to_rgb([0.0, 0.0, 0.0]), [0, 0, 0]);
    }

    #[test]
    fn lab_mid_gray_against_reference() {
        // Reference CIE L* for sRGB 119 gray, from an independent colorimetry
        // implementation (scikit-image rgb2lab, D65/2°).
        let reference_l = 50.034_438_8;
        let lab = rgb_pixel_to_lab([119, 119, 119]);
        assert!((lab[0] - reference_l).abs() < 0.05, "L = {}", lab[0]);
        assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6);
    }

    #[test]
    fn hsv_anchor_points() {
        assert_eq!(rgb_pixel_to_hsv([255, 0, 0]), [0.0, 1.0, 1.0]);
        let g = rgb_pixel_to_hsv([90, 90, 90]);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 90.0 / 255.0).abs() < 1e-15);
        assert_eq!(hsv_pixel_to_rgb([0.0, 1.0, 1.0]), [255, 0, 0]);
    }

    #[test]
    fn round_trips_on_random_raster() {
        let r = random_raster(3, 64, 64);
        for (a, b) in r.pixels().iter().zip(lab_to_rgb(&rgb_to_lab(&r)).pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        for (a, b) in r.pixels().iter().zip(hsv_to_rgb(&rgb_to_hsv(&r)).pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn disabled_is_exact_identity() {
        let r = random_raster(4, 8, 8);
        let mut rng = RngStream::new(0, 0);
        let out = stain_augment(&r, &StainAugConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, r);
        assert_eq!(rng.counter(), 0);
    }

    #[test]
    fn zero_sigma_is_round_trip() {
        let r = random_raster(5, 16, 16);
        let cfg = StainAugConfig {
            enabled: true,
            space: StainSpace::Both,
            lab: ChannelJitter::ZERO,
            hsv: ChannelJitter::ZERO,
        };
        let out = stain_augment(&r, &cfg, &mut RngStream::new(1, 1)).unwrap();
        for (a, b) in r.pixels().iter().zip(out.pixels()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn empty_raster_rejected() {
        let r = Raster::new(0, 0, vec![]).unwrap();
        let err = stain_augment(&r, &StainAugConfig::default(), &mut RngStream::new(0, 0));
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut cfg = StainAugConfig::default();
        cfg.hsv.std_sigma[1] = -0.1;
        let r = random_raster(1, 2, 2);
        assert!(stain_augment(&r, &cfg, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn deterministic_given_stream() {
        let r = random_raster(6, 32, 32);
        let cfg = StainAugConfig {
            space: StainSpace::Both,
            ..Default::default()
        };
        let a = stain_augment(&r, &cfg, &mut RngStream::new(9, 2)).unwrap();
        let b = stain_augment(&r, &cfg, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lab_mean_moves_by_drawn_shift() {
        // Mid-tone pinkish patch so that no channel clamps after shifting.
        let mut rng = RngStream::new(77, 0);
        let r = Raster::from_fn(64, 64, |_, _| {
            [
                150 + rng.below(40) as u8,
                100 + rng.below(40) as u8,
                140 + rng.below(40) as u8,
            ]
        });
        let cfg = StainAugConfig {
            enabled: true,
            space: StainSpace::Lab,
            lab: ChannelJitter {
                mean_sigma: [2.0, 1.5, 1.5],
                std_sigma: [0.0; 3],
            },
            hsv: ChannelJitter::ZERO,
        };
        let (out, draws) = stain_augment_traced(&r, &cfg, &mut RngStream::new(5, 0)).unwrap();
        let (before, _) = rgb_to_lab(&r).channel_stats();
        let (after, _) = rgb_to_lab(&out).channel_stats();
        for c in 0..3 {
            let moved = after[c] - before[c];
            assert!(
                (moved - draws[0].mean_shift[c]).abs() < 0.1,
                "channel {c}: moved {moved}, drew {}",
                draws[0].mean_shift[c]
            );
        }
    }

    #[test]
    fn hue_shift_wraps() {
        let r = Raster::filled(4, 4, [255, 0, 10]);
        let cfg = StainAugConfig {
            enabled: true,
            space: StainSpace::Hsv,
            lab: ChannelJitter::ZERO,
            hsv: ChannelJitter {
                mean_sigma: [30.0, 0.0, 0.0],
                std_sigma: [0.5, 0.0, 0.0],
            },
        };
        let (out, draws) = stain_augment_traced(&r, &cfg, &mut RngStream::new(2, 2)).unwrap();
        assert_eq!(draws[0].std_ratio[0], 1.0);
        let h_in = rgb_pixel_to_hsv([255, 0, 10])[0];
        let h_out = rgb_pixel_to_hsv(out.get(0, 0))[0];
        let expect = (h_in + draws[0].mean_shift[0]).rem_euclid(360.0);
        let diff = (h_out - expect).rem_euclid(360.0);
        assert!(diff.min(360.0 - diff) < 1.5, "{h_out} vs {expect}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shifted_mean_follows_draw(seed in any::<u64>()) {
                let mut rng = RngStream::new(seed, 0);
                let r = Raster::from_fn(24, 24, |_, _| {
                    [120 + rng.below(30) as u8, 90 + rng.below(30) as u8, 120 + rng.below(30) as u8]
                });
                let cfg = StainAugConfig {
                    enabled: true,
                    space: StainSpace::Lab,
                    lab: ChannelJitter { mean_sigma: [3.0, 3.0, 3.0], std_sigma: [0.0; 3] },
                    hsv: ChannelJitter::ZERO,
                };
                let (out, draws) = stain_augment_traced(&r, &cfg, &mut RngStream::new(seed, 1)).unwrap();
                let clamped = out.pixels().iter().any(|&p| p == 0 || p == 255);
                let (before, _) = rgb_to_lab(&r).channel_stats();
                let (after, _) = rgb_to_lab(&out).channel_stats();
                for c in 0..3 {
                    let shift = draws[0].mean_shift[c];
                    if shift.abs() > 0.5 && !clamped {
                        prop_assert_eq!((after[c] - before[c]).signum(), shift.signum());
                    }
                }
            }
        }
    }
}
