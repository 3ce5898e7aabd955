//! Dataset ingestion, texture sources for anomaly synthesis, and the
//! deterministic toy dataset used for desk-scale runs.

mod load;
mod noise;
mod sample;
mod texture;
mod toy;

pub use load::{load_dataset, Loaded, Manifest, ManifestEntry, SkippedFile, Split};
pub use noise::fractal_noise;
pub use sample::ImageSample;
pub use texture::{sample_texture, TextureKind, TextureProvider, TextureSource};
pub use toy::{make_toy_dataset, write_dataset, ToySpec};

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub(crate) const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn has_image_ext(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Decode an image into `H x W x C` floats in `[0, 1]`. Grayscale stays
/// single-channel; anything else becomes RGB (alpha dropped).
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(dynamic_to_array(&img))
}

pub(crate) fn dynamic_to_array(img: &DynamicImage) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Array3::from_shape_vec((h, w, 3), rgb.into_raw()).expect("rgb buffer shape")
    } else {
        let l = img.to_luma32f();
        Array3::from_shape_vec((h, w, 1), l.into_raw()).expect("luma buffer shape")
    }
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let l = img.to_luma16();
    let (w, h) = (l.width() as usize, l.height() as usize);
    Ok(Array2::from_shape_vec((h, w), l.into_raw().into_iter().map(|v| v > 0).collect())
        .expect("mask buffer shape"))
}

/// Write an image as 8-bit PNG (grayscale when single-channel).
pub fn write_image(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = if c == 1 {
        let buf: Vec<u8> = pixels.iter().map(|&v| q(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("gray buffer")
            .save(path)
    } else {
        let buf: Vec<u8> = (0..h)
            .flat_map(|y| (0..w).flat_map(move |x| (0..3).map(move |ch| (y, x, ch.min(c - 1)))))
            .map(|(y, x, ch)| q(pixels[[y, x, ch]]))
            .collect();
        image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("rgb buffer")
            .save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("mask buffer")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a `[0, 1]` score plane as a 16-bit grayscale PNG.
pub fn write_heatmap16(path: &Path, scores: &Array2<f64>) -> Result<()> {
    let (h, w) = scores.dim();
    let buf: Vec<u16> = scores
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("heatmap buffer");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_heatmap16(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let l = img.to_luma16();
    let (w, h) = (l.width() as usize, l.height() as usize);
    Ok(Array2::from_shape_vec(
        (h, w),
        l.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    )
    .expect("heatmap shape"))
}
