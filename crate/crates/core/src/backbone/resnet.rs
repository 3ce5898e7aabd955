//! 18-layer residual network (torchvision layout), inference only, up to
//! the requested stage.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use super::layers::{max_pool_3x3_s2, relu_inplace, BatchNorm, Conv2d};
use crate::data_io::fractal_noise;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Output stride of each stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::kaiming(in_ch, out_ch, 1, stride, 0, rng), BatchNorm::identity(out_ch)));
        BasicBlock {
            conv1: Conv2d::kaiming(in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm::identity(out_ch),
            conv2: Conv2d::kaiming(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::identity(out_ch),
            downsample,
        }
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut a = self.conv1.forward(x);
        self.bn1.forward_inplace(&mut a);
        relu_inplace(&mut a);
        let mut b = self.conv2.forward(&a);
        self.bn2.forward_inplace(&mut b);
        match &self.downsample {
            Some((c, bn)) => {
                let mut s = c.forward(x);
                bn.forward_inplace(&mut s);
                b += &s;
            }
            None => b += x,
        }
        relu_inplace(&mut b);
        b
    }

    fn calibrate(&mut self, xs: &[Array3<f32>]) -> Vec<Array3<f32>> {
        let mut a: Vec<_> = xs.iter().map(|x| self.conv1.forward(x)).collect();
        self.bn1.calibrate(&a);
        for m in a.iter_mut() {
            self.bn1.forward_inplace(m);
            relu_inplace(m);
        }
        let mut b: Vec<_> = a.iter().map(|x| self.conv2.forward(x)).collect();
        self.bn2.calibrate(&b);
        b.iter_mut().for_each(|m| self.bn2.forward_inplace(m));
        match &mut self.downsample {
            Some((c, bn)) => {
                let mut s: Vec<_> = xs.iter().map(|x| c.forward(x)).collect();
                bn.calibrate(&s);
                for (bm, sm) in b.iter_mut().zip(s.iter_mut()) {
                    bn.forward_inplace(sm);
                    *bm += &*sm;
                }
            }
            None => b.iter_mut().zip(xs).for_each(|(bm, x)| *bm += x),
        }
        b.iter_mut().for_each(relu_inplace);
        b
    }

    fn flops(&self, h: usize, w: usize) -> (u64, usize, usize) {
        let (ho, wo) = self.conv1.out_size(h, w);
        let mut f = self.conv1.flops(h, w) + self.conv2.flops(ho, wo);
        let per_map = (self.conv1.out_ch * ho * wo) as u64;
        // two batch norms, residual add
        f += 2 * 2 * per_map + per_map;
        if let Some((c, _)) = &self.downsample {
            f += c.flops(h, w) + 2 * per_map;
        }
        (f, ho, wo)
    }
}

/// Residual network with stages 1..=`depth`.
#[derive(Clone, Debug)]
pub struct ResNet18 {
    conv1: Conv2d,
    bn1: BatchNorm,
    stages: Vec<[BasicBlock; 2]>,
}

impl ResNet18 {
    /// Seeded He-initialized network with batch-norm statistics calibrated
    /// on procedural images, used when no pretrained weights are available.
    pub fn seeded(depth: usize, seed: u64) -> Self {
        let mut net = Self::uninit(depth, seed);
        net.calibrate(&calibration_batch(seed));
        net
    }

    fn uninit(depth: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[0x5e5]);
        let conv1 = Conv2d::kaiming(3, 64, 7, 2, 3, &mut rng);
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for s in 0..depth.clamp(1, 4) {
            let out = STAGE_WIDTHS[s];
            let stride = if s == 0 { 1 } else { 2 };
            stages.push([
                BasicBlock::new(in_ch, out, stride, &mut rng),
                BasicBlock::new(out, out, 1, &mut rng),
            ]);
            in_ch = out;
        }
        ResNet18 {
            conv1,
            bn1: BatchNorm::identity(64),
            stages,
        }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    fn stem(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut y = self.conv1.forward(x);
        self.bn1.forward_inplace(&mut y);
        relu_inplace(&mut y);
        max_pool_3x3_s2(&y)
    }

    /// Outputs of every stage, in order, for one normalized `3 x H x W` input.
    pub fn forward_stages(&self, x: &Array3<f32>) -> Vec<Array3<f32>> {
        let mut cur = self.stem(x);
        let mut outs = Vec::with_capacity(self.stages.len());
        for [a, b] in &self.stages {
            cur = b.forward(&a.forward(&cur));
            outs.push(cur.clone());
        }
        outs
    }

    pub fn calibrate(&mut self, batch: &[Array3<f32>]) {
        let mut y: Vec<_> = batch.iter().map(|x| self.conv1.forward(x)).collect();
        self.bn1.calibrate(&y);
        let mut cur: Vec<_> = y
            .iter_mut()
            .map(|m| {
                self.bn1.forward_inplace(m);
                relu_inplace(m);
                max_pool_3x3_s2(m)
            })
            .collect();
        for [a, b] in self.stages.iter_mut() {
            cur = a.calibrate(&cur);
            cur = b.calibrate(&cur);
        }
    }

    /// Static FLOP count up to and including `upto` stages.
    pub fn flops(&self, h: usize, w: usize, upto: usize) -> u64 {
        let (ho, wo) = self.conv1.out_size(h, w);
        let mut f = self.conv1.flops(h, w) + 2 * 2 * (64 * ho * wo) as u64;
        let (mut ch, mut cw) = ((ho + 2 - 3) / 2 + 1, (wo + 2 - 3) / 2 + 1);
        f += (9 * 64 * ch * cw) as u64;
        for [a, b] in self.stages.iter().take(upto) {
            let (fa, h1, w1) = a.flops(ch, cw);
            let (fb, h2, w2) = b.flops(h1, w1);
            f += fa + fb;
            ch = h2;
            cw = w2;
        }
        f
    }

    /// Load torchvision-named tensors (`conv1.weight`, `layer2.0.bn1.running_var`, ...).
    pub fn from_safetensors(path: &Path, depth: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
        let mut net = Self::uninit(depth, 0);
        let t = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let v = st
                .tensor(name)
                .map_err(|_| Error::Weights(format!("missing tensor {name}")))?;
            Ok((v.shape().to_vec(), tensor_f32(&v, name)?))
        };
        load_conv(&mut net.conv1, "conv1", &t)?;
        load_bn(&mut net.bn1, "bn1", &t)?;
        for (s, stage) in net.stages.iter_mut().enumerate() {
            for (i, blk) in stage.iter_mut().enumerate() {
                let p = format!("layer{}.{}", s + 1, i);
                load_conv(&mut blk.conv1, &format!("{p}.conv1"), &t)?;
                load_bn(&mut blk.bn1, &format!("{p}.bn1"), &t)?;
                load_conv(&mut blk.conv2, &format!("{p}.conv2"), &t)?;
                load_bn(&mut blk.bn2, &format!("{p}.bn2"), &t)?;
                if let Some((c, bn)) = &mut blk.downsample {
                    load_conv(c, &format!("{p}.downsample.0"), &t)?;
                    load_bn(bn, &format!("{p}.downsample.1"), &t)?;
                }
            }
        }
        Ok(net)
    }

    /// Write the network in the same tensor naming scheme.
    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let put_conv = |name: &str, c: &Conv2d, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>| {
            out.push((
                format!("{name}.weight"),
                vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
                f32_bytes(c.weight.iter()),
            ));
        };
        let put_bn = |name: &str, b: &BatchNorm, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>| {
            for (k, v) in [
                ("weight", &b.weight),
                ("bias", &b.bias),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ] {
                out.push((format!("{name}.{k}"), vec![v.len()], f32_bytes(v.iter())));
            }
        };
        put_conv("conv1", &self.conv1, &mut tensors);
        put_bn("bn1", &self.bn1, &mut tensors);
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, blk) in stage.iter().enumerate() {
                let p = format!("layer{}.{}", s + 1, i);
                put_conv(&format!("{p}.conv1"), &blk.conv1, &mut tensors);
                put_bn(&format!("{p}.bn1"), &blk.bn1, &mut tensors);
                put_conv(&format!("{p}.conv2"), &blk.conv2, &mut tensors);
                put_bn(&format!("{p}.bn2"), &blk.bn2, &mut tensors);
                if let Some((c, bn)) = &blk.downsample {
                    put_conv(&format!("{p}.downsample.0"), c, &mut tensors);
                    put_bn(&format!("{p}.downsample.1"), bn, &mut tensors);
                }
            }
        }
        let views: Vec<(String, TensorView<'_>)> = tensors
            .iter()
            .map(|(n, shape, data)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, shape.clone(), data).expect("consistent tensor"),
                )
            })
            .collect();
        let bytes = safetensors::serialize(views, &None::<HashMap<String, String>>)
            .map_err(|e| Error::Weights(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

fn f32_bytes<'a>(it: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    it.flat_map(|v| v.to_le_bytes()).collect()
}

fn tensor_f32(v: &TensorView<'_>, name: &str) -> Result<Vec<f32>> {
    let data = v.data();
    match v.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
            .collect()),
        other => Err(Error::Weights(format!("tensor {name} has unsupported dtype {other:?}"))),
    }
}

type Getter<'a> = dyn Fn(&str) -> Result<(Vec<usize>, Vec<f32>)> + 'a;

fn load_conv(c: &mut Conv2d, name: &str, get: &Getter<'_>) -> Result<()> {
    let (shape, data) = get(&format!("{name}.weight"))?;
    let expected = vec![c.out_ch, c.in_ch, c.kernel, c.kernel];
    if shape != expected {
        return Err(Error::Weights(format!("{name}.weight has shape {shape:?}, expected {expected:?}")));
    }
    c.weight = Array2::from_shape_vec((c.out_ch, c.in_ch * c.kernel * c.kernel), data).expect("checked shape");
    Ok(())
}

fn load_bn(b: &mut BatchNorm, name: &str, get: &Getter<'_>) -> Result<()> {
    let n = b.channels();
    let field = |k: &str| -> Result<Array1<f32>> {
        let (shape, data) = get(&format!("{name}.{k}"))?;
        if shape != [n] {
            return Err(Error::Weights(format!("{name}.{k} has shape {shape:?}, expected [{n}]")));
        }
        Ok(Array1::from(data))
    };
    b.weight = field("weight")?;
    b.bias = field("bias")?;
    b.running_mean = field("running_mean")?;
    b.running_var = field("running_var")?;
    Ok(())
}

/// Procedural RGB images (fractal noise plus soft discs), already
/// normalized with ImageNet statistics.
fn calibration_batch(seed: u64) -> Vec<Array3<f32>> {
    let size = 64;
    (0..8u64)
        .map(|i| {
            let mut rng = stream(seed, &[0xca1, i]);
            let mut img = Array3::<f32>::zeros((size, size, 3));
            for c in 0..3 {
                let n = fractal_noise(size, size, rng.random_range(6.0..32.0), 4, 0.5, &mut rng);
                let (lo, hi) = n.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                let disc_y = rng.random_range(0.2..0.8) * size as f64;
                let disc_x = rng.random_range(0.2..0.8) * size as f64;
                let r = rng.random_range(0.1..0.35) * size as f64;
                for ((y, x), v) in n.indexed_iter() {
                    let d = ((y as f64 - disc_y).powi(2) + (x as f64 - disc_x).powi(2)).sqrt();
                    let disc = if d < r { 0.3 } else { 0.0 };
                    img[[y, x, c]] = ((0.7 * (v - lo) / (hi - lo).max(1e-12)) + disc).min(1.0) as f32;
                }
            }
            super::normalize_chw(&img)
        })
        .collect()
}

/// Bilinearly resize each channel of a `C x H x W` map.
pub(crate) fn resize_map(x: &Array3<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = x.dim().0;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .assign(&crate::imageops::resize_plane(x.index_axis(Axis(0), ch), h, w));
    }
    out
}
