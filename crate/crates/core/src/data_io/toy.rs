//! Deterministic synthetic "anatomy" images: a smooth elliptical body with
//! two darker inner structures and low-amplitude texture on a black
//! background. Anomalous test images get one bright elliptical blob whose
//! pixels are exactly the ground-truth mask.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{noise::fractal_noise, write_image, write_mask, ImageSample};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng as StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub size: usize,
    pub k_shots: usize,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Blob area bounds in pixels.
    pub blob_area_min: usize,
    pub blob_area_max: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            size: 64,
            k_shots: 2,
            n_normal: 20,
            n_anomalous: 20,
            blob_area_min: 40,
            blob_area_max: 160,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config("toy size must be at least 16".into()));
        }
        if self.blob_area_min == 0 || self.blob_area_min > self.blob_area_max {
            return Err(Error::Config("toy blob area range must satisfy 0 < min <= max".into()));
        }
        // the blob must fit comfortably inside the body
        if self.blob_area_max * 8 > self.size * self.size {
            return Err(Error::Config("toy blob_area_max too large for image size".into()));
        }
        Ok(())
    }
}

struct Body {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Body {
    fn radius2(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)
    }
}

fn normal_image(size: usize, rng: &mut StreamRng) -> (Array3<f32>, Body) {
    let s = size as f64;
    let body = Body {
        cy: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        cx: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        ry: s * rng.random_range(0.40..0.44),
        rx: s * rng.random_range(0.34..0.38),
    };
    let tex = fractal_noise(size, size, s / 4.0, 4, 0.5, rng);
    let lobe_dy = rng.random_range(-0.02..0.02) * s;
    let lobes = [
        Body { cy: body.cy + lobe_dy, cx: body.cx - 0.12 * s, ry: 0.10 * s, rx: 0.05 * s },
        Body { cy: body.cy + lobe_dy, cx: body.cx + 0.12 * s, ry: 0.10 * s, rx: 0.05 * s },
    ];
    let img = Array3::from_shape_fn((size, size, 1), |(y, x, _)| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let r2 = body.radius2(fy, fx);
        if r2 > 1.0 {
            return 0.0;
        }
        let mut v = 0.35 + 0.3 * (1.0 - r2) + 0.04 * tex[[y, x]];
        for l in &lobes {
            let lr = l.radius2(fy, fx);
            if lr < 1.0 {
                v -= 0.15 * (1.0 - lr);
            }
        }
        v.clamp(0.05, 0.8) as f32
    });
    (img, body)
}

fn inject_blob(
    img: &mut Array3<f32>,
    body: &Body,
    spec: &ToySpec,
    rng: &mut StreamRng,
) -> Array2<bool> {
    let size = spec.size;
    loop {
        let area = rng.random_range(spec.blob_area_min as f64..=spec.blob_area_max as f64);
        let aspect: f64 = rng.random_range(0.7..1.4);
        let r = (area / std::f64::consts::PI).sqrt();
        let (ry, rx) = (r * aspect.sqrt(), r / aspect.sqrt());
        let cy = body.cy + rng.random_range(-0.6..0.6) * body.ry;
        let cx = body.cx + rng.random_range(-0.6..0.6) * body.rx;
        let blob = Body { cy, cx, ry, rx };
        let mask = Array2::from_shape_fn((size, size), |(y, x)| {
            blob.radius2(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
        });
        let n = mask.iter().filter(|&&m| m).count();
        let inside = mask.indexed_iter().filter(|(_, &m)| m).all(|((y, x), _)| {
            body.radius2(y as f64 + 0.5, x as f64 + 0.5) <= 0.9
        });
        if n < spec.blob_area_min || n > spec.blob_area_max || !inside {
            continue;
        }
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                let rr = blob.radius2(y as f64 + 0.5, x as f64 + 0.5);
                // strictly above the body's 0.8 ceiling, so every masked pixel changes
                img[[y, x, 0]] = (0.92 + 0.08 * (1.0 - rr)) as f32;
            }
        }
        return mask;
    }
}

/// Generate `(train, test)` toy samples. Fully determined by `seed`.
pub fn make_toy_dataset(spec: &ToySpec, seed: u64) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    spec.validate()?;
    let mut train = Vec::with_capacity(spec.k_shots);
    for i in 0..spec.k_shots {
        let (img, _) = normal_image(spec.size, &mut stream(seed, &[0, i as u64]));
        train.push(ImageSample::new(format!("good/{i:03}"), img, None, Some(false))?);
    }
    let mut test = Vec::with_capacity(spec.n_normal + spec.n_anomalous);
    for i in 0..spec.n_anomalous {
        let mut rng = stream(seed, &[2, i as u64]);
        let (mut img, body) = normal_image(spec.size, &mut rng);
        let mask = inject_blob(&mut img, &body, spec, &mut rng);
        test.push(ImageSample::new(format!("bad/{i:03}"), img, Some(mask), Some(true))?);
    }
    for i in 0..spec.n_normal {
        let (img, _) = normal_image(spec.size, &mut stream(seed, &[1, i as u64]));
        test.push(ImageSample::new(format!("good/{i:03}"), img, None, Some(false))?);
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

/// Write samples in the dataset folder layout understood by
/// [`load_dataset`](super::load_dataset).
pub fn write_dataset(root: &Path, train: &[ImageSample], test: &[ImageSample]) -> Result<()> {
    for sub in ["train/good", "test/good", "test/bad", "test/bad_masks"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let file = |id: &str| id.rsplit('/').next().unwrap_or(id).to_string();
    for s in train {
        write_image(&root.join("train/good").join(format!("{}.png", file(&s.id))), &s.pixels)?;
    }
    for s in test {
        let name = format!("{}.png", file(&s.id));
        if s.label == Some(true) {
            write_image(&root.join("test/bad").join(&name), &s.pixels)?;
            if let Some(m) = &s.mask {
                write_mask(&root.join("test/bad_masks").join(&name), m)?;
            }
        } else {
            write_image(&root.join("test/good").join(&name), &s.pixels)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToySpec {
        ToySpec {
            n_normal: 10,
            n_anomalous: 10,
            ..Default::default()
        }
    }

    #[test]
    fn counts_match() {
        let (train, test) = make_toy_dataset(&spec(), 0).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 20);
        let with_mask = test
            .iter()
            .filter(|s| s.mask.as_ref().is_some_and(|m| m.iter().any(|&b| b)))
            .count();
        assert_eq!(with_mask, 10);
    }

    #[test]
    fn deterministic() {
        let a = make_toy_dataset(&spec(), 11).unwrap();
        let b = make_toy_dataset(&spec(), 11).unwrap();
        assert_eq!(a, b);
        let c = make_toy_dataset(&spec(), 12).unwrap();
        assert_ne!(a.0[0].pixels, c.0[0].pixels);
    }

    #[test]
    fn blob_area_within_range() {
        let s = spec();
        let (_, test) = make_toy_dataset(&s, 3).unwrap();
        for t in test.iter().filter(|t| t.label == Some(true)) {
            let area = t.mask.as_ref().unwrap().iter().filter(|&&b| b).count();
            assert!((s.blob_area_min..=s.blob_area_max).contains(&area), "{area}");
        }
    }

    #[test]
    fn mask_covers_exactly_the_altered_pixels() {
        let s = spec();
        let seed = 5;
        let (_, test) = make_toy_dataset(&s, seed).unwrap();
        for i in 0..s.n_anomalous {
            // regenerate the clean image from the same stream prefix
            let mut rng = stream(seed, &[2, i as u64]);
            let (clean, _) = normal_image(s.size, &mut rng);
            let t = test.iter().find(|t| t.id == format!("bad/{i:03}")).unwrap();
            let m = t.mask.as_ref().unwrap();
            for ((y, x), &mm) in m.indexed_iter() {
                let changed = clean[[y, x, 0]] != t.pixels[[y, x, 0]];
                assert_eq!(changed, mm, "pixel ({y},{x}) of {}", t.id);
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let s = ToySpec {
            blob_area_min: 10,
            blob_area_max: 5,
            ..Default::default()
        };
        assert!(make_toy_dataset(&s, 0).is_err());
    }
}
