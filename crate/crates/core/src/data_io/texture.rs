use std::path::PathBuf;

use log::warn;
use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{has_image_ext, noise::fractal_noise, read_image};
use crate::imageops::resize_image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Folder,
    #[default]
    Procedural,
}

/// Where anomaly textures come from: a folder of texture images (e.g. DTD)
/// or procedurally generated multi-octave noise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSource {
    pub kind: TextureKind,
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl TextureSource {
    pub fn procedural(seed: u64) -> Self {
        TextureSource {
            kind: TextureKind::Procedural,
            path: None,
            seed,
        }
    }

    pub fn folder(path: impl Into<PathBuf>, seed: u64) -> Self {
        TextureSource {
            kind: TextureKind::Folder,
            path: Some(path.into()),
            seed,
        }
    }
}

/// A ready-to-sample texture source. Folder textures are decoded once;
/// undecodable files are dropped and an empty folder degrades to the
/// procedural generator.
#[derive(Clone, Debug)]
pub struct TextureProvider {
    textures: Vec<Array3<f32>>,
}

impl TextureProvider {
    pub fn new(src: &TextureSource) -> Self {
        let textures = match (src.kind, &src.path) {
            (TextureKind::Folder, Some(dir)) => load_textures(dir),
            (TextureKind::Folder, None) => {
                warn!("texture folder provider without a path");
                Vec::new()
            }
            (TextureKind::Procedural, _) => Vec::new(),
        };
        if src.kind == TextureKind::Folder && textures.is_empty() {
            warn!("no decodable textures found; falling back to procedural textures");
        }
        TextureProvider { textures }
    }

    pub fn procedural() -> Self {
        TextureProvider {
            textures: Vec::new(),
        }
    }

    pub fn is_procedural(&self) -> bool {
        self.textures.is_empty()
    }

    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    /// A `h x w x c` texture patch in `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, shape: (usize, usize, usize), rng: &mut R) -> Array3<f32> {
        let (h, w, c) = shape;
        assert!(h > 0 && w > 0 && c > 0, "texture shape must be positive");
        if self.textures.is_empty() {
            return procedural_texture(shape, rng);
        }
        let tex = &self.textures[rng.random_range(0..self.textures.len())];
        let (th, tw, tc) = tex.dim();
        let ch = h.min(th);
        let cw = w.min(tw);
        let y0 = rng.random_range(0..=th - ch);
        let x0 = rng.random_range(0..=tw - cw);
        let crop = tex.slice(s![y0..y0 + ch, x0..x0 + cw, ..]).to_owned();
        let patch = resize_image(&crop, h, w);
        match (tc, c) {
            (a, b) if a == b => patch,
            (1, _) => Array3::from_shape_fn((h, w, c), |(y, x, _)| patch[[y, x, 0]]),
            _ => {
                let grey = patch.mean_axis(Axis(2)).expect("channels");
                Array3::from_shape_fn((h, w, c), |(y, x, _)| grey[[y, x]])
            }
        }
    }
}

fn load_textures(dir: &PathBuf) -> Vec<Array3<f32>> {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| has_image_ext(p))
            .collect(),
        Err(e) => {
            warn!("cannot read texture folder {}: {e}", dir.display());
            return Vec::new();
        }
    };
    paths.sort();
    paths
        .iter()
        .filter_map(|p| match read_image(p) {
            Ok(t) => Some(t),
            Err(e) => {
                warn!("skipping texture: {e}");
                None
            }
        })
        .collect()
}

fn procedural_texture<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Array3<f32> {
    let (h, w, c) = shape;
    let base = h.max(w) as f64 / rng.random_range(1.5..6.0);
    let octaves = rng.random_range(3..=6);
    // random intensity window so patches vary in brightness as well as pattern
    let lo = rng.random_range(0.0..0.7f32);
    let span_out = rng.random_range(0.1f32..=1.0 - lo);
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let n = fractal_noise(h, w, base, octaves, 0.5, rng);
        let (nlo, nhi) = n
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (nhi - nlo).max(1e-12);
        out.index_axis_mut(Axis(2), ch)
            .assign(&n.mapv(|v| (lo + span_out * ((v - nlo) / span) as f32).min(1.0)));
    }
    out
}

/// Draw one texture patch from `src`.
pub fn sample_texture<R: Rng + ?Sized>(
    src: &TextureSource,
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Array3<f32> {
    TextureProvider::new(src).sample(shape, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::write_image;
    use crate::rng::stream;

    #[test]
    fn procedural_is_deterministic() {
        let src = TextureSource::procedural(1);
        let a = sample_texture(&src, (16, 16, 3), &mut stream(5, &[]));
        let b = sample_texture(&src, (16, 16, 3), &mut stream(5, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn procedural_in_range_and_nonconstant() {
        let t = sample_texture(&TextureSource::procedural(0), (32, 32, 1), &mut stream(9, &[]));
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = t.mean().unwrap();
        let var = t.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(var > 0.0);
    }

    #[test]
    fn folder_texture_is_upscaled() {
        let dir = tempfile::tempdir().unwrap();
        let tex = Array3::from_shape_fn((8, 8, 1), |(y, x, _)| ((y + x) % 2) as f32);
        write_image(&dir.path().join("t.png"), &tex).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let p = TextureProvider::new(&TextureSource::folder(dir.path(), 0));
        assert_eq!(p.len(), 1);
        let patch = p.sample((16, 16, 1), &mut stream(0, &[]));
        assert_eq!(patch.dim(), (16, 16, 1));
        let rgb = p.sample((16, 16, 3), &mut stream(0, &[]));
        assert_eq!(rgb.dim(), (16, 16, 3));
    }

    #[test]
    fn empty_folder_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = TextureProvider::new(&TextureSource::folder(dir.path(), 0));
        assert!(p.is_procedural());
        let t = p.sample((8, 8, 1), &mut stream(0, &[]));
        assert_eq!(t.dim(), (8, 8, 1));
    }
}
