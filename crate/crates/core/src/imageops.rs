//! Small raster helpers shared by the data, synthesis and inference paths.
//! Images are `H x W x C` arrays of `f32` in `[0, 1]`; score maps are
//! `H x W` arrays of `f64`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_plane<T: Float>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let xs: Vec<(usize, usize, T)> = (0..out_w)
        .map(|x| source_coord((x as f64 + 0.5) * sx - 0.5, w))
        .collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = source_coord((y as f64 + 0.5) * sy - 0.5, h);
        let (x0, x1, fx) = xs[x];
        let one = T::one();
        let top = src[[y0, x0]] * (one - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (one - fx) + src[[y1, x1]] * fx;
        top * (one - fy) + bot * fy
    })
}

fn source_coord<T: Float>(c: f64, n: usize) -> (usize, usize, T) {
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, T::from(c - i0 as f64).unwrap())
}

pub fn resize_image(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let c = src.dim().2;
    let mut out = Array3::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = resize_plane(src.index_axis(Axis(2), ch), out_h, out_w);
        out.index_axis_mut(Axis(2), ch).assign(&plane);
    }
    out
}

/// Bilinear sample of a plane at fractional pixel coordinates; samples
/// outside the plane read `fill`.
pub fn sample_bilinear(plane: ArrayView2<f32>, y: f64, x: f64, fill: f32) -> f32 {
    let (h, w) = plane.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = (y - y0) as f32;
    let fx = (x - x0) as f32;
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    // exact hits skip the blend so integer-aligned warps are lossless
    if fy == 0.0 && fx == 0.0 {
        return at(y0, x0);
    }
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflected borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur<T: Float>(src: ArrayView2<T>, sigma: f64) -> Array2<T> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let k: Vec<T> = gaussian_kernel(sigma)
        .into_iter()
        .map(|v| T::from(v).unwrap())
        .collect();
    let r = (k.len() / 2) as isize;
    let (h, w) = src.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    let mut tmp = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (j, kv) in k.iter().enumerate() {
                acc = acc + *kv * src[[y, reflect(x as isize + j as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (j, kv) in k.iter().enumerate() {
                acc = acc + *kv * tmp[[reflect(y as isize + j as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Replicate a single-channel image to three channels; other channel counts
/// pass through unchanged.
pub fn to_rgb(img: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if c != 1 {
        return img.clone();
    }
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| img[[y, x, 0]])
}

/// Geometry of an aspect-preserving resize into a square canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub size: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub inner_h: usize,
    pub inner_w: usize,
    pub top: usize,
    pub left: usize,
}

impl Letterbox {
    pub fn new(orig_h: usize, orig_w: usize, size: usize) -> Self {
        let scale = size as f64 / orig_h.max(orig_w) as f64;
        let inner_h = ((orig_h as f64 * scale).round() as usize).clamp(1, size);
        let inner_w = ((orig_w as f64 * scale).round() as usize).clamp(1, size);
        Letterbox {
            size,
            orig_h,
            orig_w,
            inner_h,
            inner_w,
            top: (size - inner_h) / 2,
            left: (size - inner_w) / 2,
        }
    }

    pub fn apply(&self, img: &Array3<f32>) -> Array3<f32> {
        let c = img.dim().2;
        let inner = resize_image(img, self.inner_h, self.inner_w);
        if self.inner_h == self.size && self.inner_w == self.size {
            return inner;
        }
        let mut out = Array3::zeros((self.size, self.size, c));
        out.slice_mut(ndarray::s![
            self.top..self.top + self.inner_h,
            self.left..self.left + self.inner_w,
            ..
        ])
        .assign(&inner);
        out
    }

    /// Map a square working-resolution plane back to the original size.
    pub fn invert<T: Float>(&self, plane: ArrayView2<T>) -> Array2<T> {
        let inner = plane.slice(ndarray::s![
            self.top..self.top + self.inner_h,
            self.left..self.left + self.inner_w
        ]);
        resize_plane(inner, self.orig_h, self.orig_w)
    }
}
