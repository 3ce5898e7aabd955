//! Training-time image synthesis: mild geometric augmentation of normal
//! images and local texture corruption with a binary anomaly mask.

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{fractal_noise, TextureProvider};
use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, sample_bilinear};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Rotation range in degrees; positive is counterclockwise on screen.
    pub rotation_deg: [f64; 2],
    /// Maximum translation as a fraction of each side.
    pub translate_frac: f64,
    pub scale: [f64; 2],
    pub shear_deg: [f64; 2],
    pub p_affine: f64,
    /// Elastic displacement amplitude in pixels.
    pub elastic_alpha: f64,
    /// Smoothing of the elastic displacement field in pixels.
    pub elastic_sigma: f64,
    pub p_elastic: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            rotation_deg: [-5.0, 5.0],
            translate_frac: 0.03,
            scale: [0.97, 1.03],
            shear_deg: [-2.0, 2.0],
            p_affine: 0.8,
            elastic_alpha: 20.0,
            elastic_sigma: 6.0,
            p_elastic: 0.5,
        }
    }
}

fn ordered(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

fn unit(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

fn draw<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl AugmentSpec {
    /// No transform ever applies.
    pub fn identity() -> Self {
        AugmentSpec {
            p_affine: 0.0,
            p_elastic: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = ordered(self.rotation_deg)
            && ordered(self.scale)
            && ordered(self.shear_deg)
            && self.scale[0] > 0.0
            && self.translate_frac >= 0.0
            && self.elastic_alpha >= 0.0
            && self.elastic_sigma >= 0.0
            && unit(self.p_affine)
            && unit(self.p_elastic);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation spec {self:?}")))
        }
    }
}

/// Snap coordinates that are integers up to rounding noise.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn warp(img: &Array3<f32>, map: impl Fn(usize, usize) -> (f64, f64)) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            let (sy, sx) = (snap(sy), snap(sx));
            for ch in 0..c {
                out[[y, x, ch]] = sample_bilinear(img.index_axis(Axis(2), ch), sy, sx, 0.0);
            }
        }
    }
    out
}

/// Random affine about the image centre followed by elastic deformation.
/// Pixels mapped from outside the image read 0; output is clamped to [0, 1].
pub fn augment<R: Rng + ?Sized>(img: &Array3<f32>, spec: &AugmentSpec, rng: &mut R) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut out = img.clone();
    let mut touched = false;
    if spec.p_affine > 0.0 && rng.random::<f64>() < spec.p_affine {
        let theta = draw(spec.rotation_deg, rng).to_radians();
        let s = draw(spec.scale, rng);
        let sh = draw(spec.shear_deg, rng).to_radians().tan();
        let t = spec.translate_frac;
        let ty = draw([-t, t], rng) * h as f64;
        let tx = draw([-t, t], rng) * w as f64;
        // forward (x, y) -> rotation * shear * scale; invert analytically
        let (c, sn) = (theta.cos(), theta.sin());
        let a = [[c * s, (c * sh + sn) * s], [-sn * s, (-sn * sh + c) * s]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        out = warp(&out, |y, x| {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            (sy, sx)
        });
        touched = true;
    }
    if spec.p_elastic > 0.0 && rng.random::<f64>() < spec.p_elastic {
        let mut field = || {
            let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..=1.0));
            gaussian_blur(raw.view(), spec.elastic_sigma) * spec.elastic_alpha
        };
        let dy = field();
        let dx = field();
        out = warp(&out, |y, x| (y as f64 + dy[[y, x]], x as f64 + dx[[y, x]]));
        touched = true;
    }
    if touched {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalAnomalySpec {
    /// Blend opacity range.
    pub beta: [f64; 2],
    /// Mask area as a fraction of the image.
    pub area_min: f64,
    pub area_max: f64,
    /// Noise base period range as a fraction of the longer side.
    pub period_frac: [f64; 2],
    pub octaves: usize,
    /// Pixels at or below this mean intensity count as background.
    pub foreground_floor: f32,
    pub max_retries: usize,
}

impl Default for LocalAnomalySpec {
    fn default() -> Self {
        LocalAnomalySpec {
            beta: [0.5, 1.0],
            area_min: 0.01,
            area_max: 0.1,
            period_frac: [0.15, 0.4],
            octaves: 3,
            foreground_floor: 0.02,
            max_retries: 10,
        }
    }
}

impl LocalAnomalySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = ordered(self.beta)
            && self.beta[0] > 0.0
            && self.beta[1] <= 1.0
            && self.area_min > 0.0
            && self.area_min <= self.area_max
            && self.area_max < 1.0
            && ordered(self.period_frac)
            && self.period_frac[0] > 0.0
            && self.octaves >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid local anomaly spec {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corrupted {
    pub image: Array3<f32>,
    pub mask: Array2<bool>,
    pub beta: f64,
    /// No usable mask was found; the image is returned unmodified.
    pub failed: bool,
}

fn morph(mask: &Array2<bool>, erode: bool) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = erode;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                if erode {
                    acc &= mask[[yy, xx]];
                } else {
                    acc |= mask[[yy, xx]];
                }
            }
        }
        acc
    })
}

/// 3x3 morphological opening.
pub fn open3(mask: &Array2<bool>) -> Array2<bool> {
    morph(&morph(mask, true), false)
}

pub fn foreground(img: &Array3<f32>, floor: f32) -> Array2<bool> {
    img.mean_axis(Axis(2)).expect("channels").mapv(|v| v > floor)
}

fn propose_mask<R: Rng + ?Sized>(fg: &Array2<bool>, spec: &LocalAnomalySpec, rng: &mut R) -> Array2<bool> {
    let (h, w) = fg.dim();
    let period = draw(spec.period_frac, rng) * h.max(w) as f64;
    let noise = fractal_noise(h, w, period, spec.octaves, 0.5, rng);
    let target = (draw([spec.area_min, spec.area_max], rng) * (h * w) as f64).round() as usize;
    let mut vals: Vec<f64> = Zip::from(&noise).and(fg).fold(Vec::new(), |mut v, &n, &f| {
        if f {
            v.push(n);
        }
        v
    });
    if vals.is_empty() || target == 0 {
        return Array2::from_elem((h, w), false);
    }
    let k = target.min(vals.len());
    // threshold at the noise quantile leaving `k` foreground pixels above it
    vals.sort_by(|a, b| b.total_cmp(a));
    let thr = vals[k - 1];
    let raw = Zip::from(&noise).and(fg).map_collect(|&n, &f| f && n >= thr);
    let opened = open3(&raw);
    Zip::from(&opened).and(fg).map_collect(|&o, &f| o && f)
}

/// Paste a texture through a noise-derived mask onto the foreground.
pub fn corrupt<R: Rng + ?Sized>(
    img: &Array3<f32>,
    tex: &TextureProvider,
    spec: &LocalAnomalySpec,
    rng: &mut R,
) -> Corrupted {
    let (h, w, c) = img.dim();
    let fg = foreground(img, spec.foreground_floor);
    let n = (h * w) as f64;
    let lo = (spec.area_min * n).ceil() as usize;
    let hi = (spec.area_max * n).floor() as usize;
    for _ in 0..spec.max_retries.max(1) {
        let mask = propose_mask(&fg, spec, rng);
        let area = mask.iter().filter(|&&m| m).count();
        if area == 0 || area < lo || area > hi {
            continue;
        }
        let beta = draw(spec.beta, rng);
        let texture = tex.sample((h, w, c), rng);
        let mut image = img.clone();
        let b = beta as f32;
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] {
                    for ch in 0..c {
                        let v = if beta == 1.0 {
                            texture[[y, x, ch]]
                        } else {
                            (1.0 - b) * img[[y, x, ch]] + b * texture[[y, x, ch]]
                        };
                        image[[y, x, ch]] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        return Corrupted {
            image,
            mask,
            beta,
            failed: false,
        };
    }
    Corrupted {
        image: img.clone(),
        mask: Array2::from_elem((h, w), false),
        beta: 0.0,
        failed: true,
    }
}
