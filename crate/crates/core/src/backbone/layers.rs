//! Inference-only convolution building blocks on `C x H x W` maps.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `out x (in * k * k)`, torch `(out, in, kh, kw)` flattened.
    pub weight: Array2<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal init with fan-out scaling.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (out_ch * kernel * kernel) as f64).sqrt();
        let n = Normal::new(0.0, std).expect("valid std");
        let weight = Array2::from_shape_fn((out_ch, in_ch * kernel * kernel), |_| n.sample(rng) as f32);
        Conv2d {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        2 * (self.in_ch * self.kernel * self.kernel * self.out_ch * ho * wo) as u64
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        let out = if k == 1 && self.stride == 1 && self.pad == 0 {
            let flat = x.view().into_shape_with_order((c, h * w)).expect("contiguous map");
            self.weight.dot(&flat)
        } else {
            let mut cols = Array2::<f32>::zeros((c * k * k, n));
            let src = x.as_slice().expect("contiguous map");
            let dst = cols.as_slice_mut().expect("contiguous cols");
            for ci in 0..c {
                let plane = &src[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &mut dst[((ci * k + ky) * k + kx) * n..][..n];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..][..w];
                            let dst_row = &mut row[oy * wo..][..wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            self.weight.dot(&cols)
        };
        out.into_shape_with_order((self.out_ch, ho, wo))
            .expect("conv output shape")
    }
}

/// Eval-mode batch norm folded to a per-channel affine map.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(ch: usize) -> Self {
        BatchNorm {
            weight: Array1::ones(ch),
            bias: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    /// Set running statistics from a batch of maps (population variance).
    pub fn calibrate(&mut self, maps: &[Array3<f32>]) {
        let c = self.channels();
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            let mut n = 0usize;
            for m in maps {
                for &v in m.index_axis(ndarray::Axis(0), ch) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                    n += 1;
                }
            }
            let mean = sum / n.max(1) as f64;
            let var = (sq / n.max(1) as f64 - mean * mean).max(0.0);
            self.running_mean[ch] = mean as f32;
            self.running_var[ch] = var as f32;
        }
    }

    pub fn forward_inplace(&self, x: &mut Array3<f32>) {
        for (ch, mut plane) in x.outer_iter_mut().enumerate() {
            let scale = self.weight[ch] / (self.running_var[ch] + self.eps).sqrt();
            let shift = self.bias[ch] - self.running_mean[ch] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// 3x3, stride 2, padding 1 max pooling.
pub fn max_pool_3x3_s2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    Array3::from_shape_fn((c, ho, wo), |(ch, oy, ox)| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..3 {
            let iy = (oy * 2 + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..3 {
                let ix = (ox * 2 + kx) as isize - 1;
                if ix >= 0 && ix < w as isize {
                    m = m.max(x[[ch, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}
