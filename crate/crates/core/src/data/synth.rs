//! Procedural images with graded synthetic distortions and a proxy quality
//! score that is a fixed decreasing function of distortion severity.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{Manifest, ManifestRow};
use super::Image;
use crate::error::{Error, Result};

/// Side length of rendered images; loading resamples to each branch.
pub const RENDER_SIZE: usize = 48;
pub const MAX_BLUR_SIGMA: f64 = 4.0;
pub const MAX_NOISE_SIGMA: f64 = 0.3;
pub const MAX_BLOCK_LEVEL: usize = 8;
/// Exposure gain at full severity (`×` for over-, `÷` for under-exposure).
pub const MAX_EXPOSURE_GAIN: f64 = 3.0;
/// Curvature of the severity → score map.
pub const MOS_CURVATURE: f64 = 1.5;

/// Proxy opinion score in `[0, 1]`: 1 for a pristine image, 0 at full
/// severity, strictly decreasing in between.
pub fn proxy_mos(severity: f64) -> f64 {
    let s = severity.clamp(0.0, 1.0);
    let floor = (-MOS_CURVATURE).exp();
    ((-MOS_CURVATURE * s).exp() - floor) / (1.0 - floor)
}

/// Procedural content. Every base spans roughly the same intensity range,
/// so contrast differences come from the distortion rather than the
/// content. Periods are real-valued and patterns rotated so that no base
/// lines up with the block grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Base {
    Checkerboard {
        angle: f64,
        period: f64,
        lo: f64,
        hi: f64,
    },
    Stripes {
        angle: f64,
        period: f64,
        lo: f64,
        hi: f64,
    },
    /// Sum of a few random plane waves thresholded into hard-edged blobs;
    /// without edges, blur and blocking would leave the field unchanged.
    SmoothField {
        waves: [(f64, f64, f64); 3],
        lo: f64,
        hi: f64,
    },
    /// Linear ramp overlaid with a faint checkerboard.
    GradientChecker { angle: f64, period: f64 },
}

impl Base {
    pub fn random(rng: &mut impl Rng) -> Self {
        let lo = rng.random_range(0.15..0.25);
        let hi = rng.random_range(0.75..0.85);
        match rng.random_range(0..4) {
            0 => Base::Checkerboard {
                angle: rng.random_range(0.0..PI),
                period: rng.random_range(4.0..9.0),
                lo,
                hi,
            },
            1 => Base::Stripes {
                angle: rng.random_range(0.0..PI),
                period: rng.random_range(4.5..12.0),
                lo,
                hi,
            },
            2 => {
                let mut wave = || {
                    (
                        rng.random_range(0.0..PI),
                        rng.random_range(0.07..0.4),
                        rng.random_range(0.0..2.0 * PI),
                    )
                };
                Base::SmoothField {
                    waves: [wave(), wave(), wave()],
                    lo,
                    hi,
                }
            }
            _ => Base::GradientChecker {
                angle: rng.random_range(0.0..2.0 * PI),
                period: rng.random_range(4.5..12.0),
            },
        }
    }

    pub fn render(&self, size: usize) -> Image {
        let rotate = |angle: f64, x: usize, y: usize| {
            let (c, s) = (angle.cos(), angle.sin());
            let (x, y) = (x as f64, y as f64);
            (x * c + y * s, y * c - x * s)
        };
        let checker = |u: f64, v: f64, period: f64| {
            ((u / period).floor() + (v / period).floor()).rem_euclid(2.0) == 0.0
        };
        match *self {
            Base::Checkerboard {
                angle,
                period,
                lo,
                hi,
            } => Image::from_fn(size, size, |x, y| {
                let (u, v) = rotate(angle, x, y);
                if checker(u, v, period) {
                    lo
                } else {
                    hi
                }
            }),
            Base::Stripes {
                angle,
                period,
                lo,
                hi,
            } => Image::from_fn(size, size, |x, y| {
                let (u, _) = rotate(angle, x, y);
                if (u / period).rem_euclid(1.0) < 0.5 {
                    lo
                } else {
                    hi
                }
            }),
            Base::SmoothField { waves, lo, hi } => Image::from_fn(size, size, |x, y| {
                let v: f64 = waves
                    .iter()
                    .map(|&(a, f, p)| (f * (x as f64 * a.cos() + y as f64 * a.sin()) + p).sin())
                    .sum::<f64>()
                    / 3.0;
                if v > 0.0 {
                    hi
                } else {
                    lo
                }
            }),
            Base::GradientChecker { angle, period } => {
                let half = size as f64 / 2.0;
                Image::from_fn(size, size, |x, y| {
                    let (u, _) = rotate(angle, x, y);
                    let (c, s) = (angle.cos(), angle.sin());
                    let ramp = 0.5 + 0.25 * (u - half * (c + s)) / half;
                    let check = if checker(x as f64, y as f64, period) {
                        -0.15
                    } else {
                        0.15
                    };
                    ramp + check
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    Blur {
        sigma: f64,
    },
    Noise {
        sigma: f64,
    },
    /// Replaces each `level × level` block by its mean; level 1 is lossless.
    /// The block grid is shifted by `offset` pixels in both directions.
    Block {
        level: usize,
        offset: (usize, usize),
    },
    /// Multiplies intensities by `gain` and clips.
    Exposure {
        gain: f64,
    },
}

impl Distortion {
    /// Draws a family uniformly and a severity uniformly in `[0, 1]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let s: f64 = rng.random();
        match rng.random_range(0..4) {
            0 => Distortion::Blur {
                sigma: s * MAX_BLUR_SIGMA,
            },
            1 => Distortion::Noise {
                sigma: s * MAX_NOISE_SIGMA,
            },
            2 => {
                let level = 1 + (s * (MAX_BLOCK_LEVEL - 1) as f64).round() as usize;
                Distortion::Block {
                    level,
                    offset: (rng.random_range(0..level), rng.random_range(0..level)),
                }
            }
            _ => {
                let gain = 1.0 + s * (MAX_EXPOSURE_GAIN - 1.0);
                Distortion::Exposure {
                    gain: if rng.random_bool(0.5) {
                        gain
                    } else {
                        1.0 / gain
                    },
                }
            }
        }
    }

    /// Severity in `[0, 1]`, 0 meaning no change to the image.
    pub fn severity(&self) -> f64 {
        match *self {
            Distortion::Blur { sigma } => sigma / MAX_BLUR_SIGMA,
            Distortion::Noise { sigma } => sigma / MAX_NOISE_SIGMA,
            Distortion::Block { level, .. } => (level - 1) as f64 / (MAX_BLOCK_LEVEL - 1) as f64,
            Distortion::Exposure { gain } => {
                let g = if gain >= 1.0 { gain } else { 1.0 / gain };
                (g - 1.0) / (MAX_EXPOSURE_GAIN - 1.0)
            }
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Image {
        let mut out = match *self {
            Distortion::Blur { sigma } => gaussian_blur(img, sigma),
            Distortion::Noise { sigma } => {
                let mut out = img.clone();
                for v in &mut out.data {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sigma * z;
                }
                out
            }
            Distortion::Block { level, offset } => block_average(img, level, offset),
            Distortion::Exposure { gain } => {
                let mut out = img.clone();
                out.data.iter_mut().for_each(|v| *v *= gain);
                out
            }
        };
        out.clamp01();
        out
    }
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` is identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h, ch) = (img.width as isize, img.height as isize, img.channels);
    let pass = |src: &Image, horizontal: bool| {
        let mut dst = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, i) in kernel.iter().zip(-radius..=radius) {
                        let (sx, sy) = if horizontal {
                            ((x + i).clamp(0, w - 1), y)
                        } else {
                            (x, (y + i).clamp(0, h - 1))
                        };
                        acc += k * src.at(sx as usize, sy as usize, c);
                    }
                    dst.set(x as usize, y as usize, c, acc);
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Replaces each cell of a `level × level` grid, shifted right and down
/// by `offset`, with its mean. Cells clipped by the border are smaller.
pub fn block_average(img: &Image, level: usize, offset: (usize, usize)) -> Image {
    let mut out = img.clone();
    if level <= 1 {
        return out;
    }
    let cuts = |len: usize, off: usize| {
        let mut c: Vec<usize> = (0..)
            .map(|i| (off % level) + i * level)
            .take_while(|&v| v < len)
            .filter(|&v| v > 0)
            .collect();
        c.insert(0, 0);
        c.push(len);
        c
    };
    let (xs, ys) = (cuts(img.width, offset.0), cuts(img.height, offset.1));
    for yw in ys.windows(2) {
        for xw in xs.windows(2) {
            let ((bx, ex), (by, ey)) = ((xw[0], xw[1]), (yw[0], yw[1]));
            for c in 0..img.channels {
                let mut sum = 0.0;
                for y in by..ey {
                    for x in bx..ex {
                        sum += img.at(x, y, c);
                    }
                }
                let mean = sum / ((ey - by) * (ex - bx)) as f64;
                for y in by..ey {
                    for x in bx..ex {
                        out.set(x, y, c, mean);
                    }
                }
            }
        }
    }
    out
}

/// One generated sample before it is written.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub base: Base,
    pub distortion: Distortion,
    pub image: Image,
    pub mos: f64,
}

/// Draws the next sample from `rng`.
pub fn synth_sample(rng: &mut ChaCha8Rng) -> SynthSample {
    let base = Base::random(rng);
    let distortion = Distortion::random(rng);
    let image = distortion.apply(&base.render(RENDER_SIZE), rng);
    SynthSample {
        base,
        distortion,
        image,
        mos: proxy_mos(distortion.severity()),
    }
}

/// Writes `n` greyscale PGM images and `manifest.csv` into `out_dir`.
pub fn synth_generate(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("synth-data needs n >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(4);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let sample = synth_sample(&mut rng);
        let name = format!("img_{i:0width$}.pgm");
        sample.image.write_pnm(&out_dir.join(&name))?;
        rows.push(ManifestRow {
            path: name,
            mos: sample.mos,
        });
    }
    let manifest = Manifest::new(rows);
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_scores_one_and_map_is_decreasing() {
        assert_eq!(proxy_mos(0.0), 1.0);
        assert!(proxy_mos(1.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let m = proxy_mos(i as f64 / 100.0);
            assert!(m < prev && (0.0..=1.0).contains(&m));
            prev = m;
        }
    }

    #[test]
    fn zero_severity_leaves_image_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Base::Checkerboard {
            angle: 0.3,
            period: 4.0,
            lo: 0.2,
            hi: 0.8,
        }
        .render(16);
        for d in [
            Distortion::Blur { sigma: 0.0 },
            Distortion::Noise { sigma: 0.0 },
            Distortion::Block {
                level: 1,
                offset: (0, 0),
            },
            Distortion::Exposure { gain: 1.0 },
        ] {
            assert_eq!(d.severity(), 0.0);
            assert_eq!(d.apply(&img, &mut rng), img);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(9, 7, 1, 0.4);
        let out = gaussian_blur(&img, 2.0);
        assert!(out.data.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn block_average_keeps_block_means() {
        let img = Image::from_fn(4, 4, |x, y| (x + 4 * y) as f64 / 16.0);
        let out = block_average(&img, 2, (0, 0));
        let mean = (0.0 + 1.0 + 4.0 + 5.0) / 64.0;
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert!((out.at(x, y, 0) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn shifted_grid_cells_are_clipped_at_the_border() {
        let img = Image::from_fn(5, 1, |x, _| x as f64);
        let out = block_average(&img, 3, (1, 0));
        let row: Vec<f64> = (0..5).map(|x| out.at(x, 0, 0)).collect();
        assert_eq!(row, vec![0.0, 2.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn stronger_blur_scores_lower() {
        let mut prev = f64::INFINITY;
        for k in 0..=8 {
            let d = Distortion::Blur {
                sigma: k as f64 * 0.5,
            };
            let m = proxy_mos(d.severity());
            assert!(m < prev);
            prev = m;
        }
    }
}
