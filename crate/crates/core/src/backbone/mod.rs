//! Frozen pretrained feature extractor and mid-level feature aggregation.
//!
//! The default extractor is an 18-layer residual network. Stage outputs
//! (default stages 2 and 3) are bilinearly resized to the spatial size of
//! the shallowest selected stage, concatenated along channels, and
//! optionally smoothed with a 3x3 neighbourhood mean.

mod grid;
mod layers;
mod resnet;

pub use grid::{EmbeddingGrid, Space};
pub use layers::{BatchNorm, Conv2d};
pub use resnet::{ResNet18, STAGE_STRIDES, STAGE_WIDTHS};

use std::path::PathBuf;

use log::info;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imageops::to_rgb;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Registered extractor name.
    pub kind: String,
    /// Safetensors file with torchvision tensor names. Without it, a seeded
    /// network with calibrated batch-norm statistics is used.
    pub weights: Option<PathBuf>,
    /// 1-based stage indices to concatenate.
    pub layers: Vec<usize>,
    /// 3x3 neighbourhood mean over the concatenated grid.
    pub aggregate: bool,
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: "resnet18".into(),
            weights: None,
            layers: vec![2, 3],
            aggregate: true,
            init_seed: 0,
        }
    }
}

/// A frozen map from a working-resolution image to a raw embedding grid.
pub trait FeatureExtractor: Send + Sync {
    /// `image` is `H x W x C` in `[0, 1]`, with `C` of 1 or 3.
    fn extract(&self, image: &Array3<f32>) -> Result<EmbeddingGrid>;
    /// Channel dimension `L_C` of the produced grids.
    fn out_dim(&self) -> usize;
    /// Ratio of input size to grid size.
    fn stride(&self) -> usize;
    /// Static FLOP estimate for one `h x w` image.
    fn flops(&self, h: usize, w: usize) -> u64;
}

/// Build the extractor named by `cfg.kind`.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<Box<dyn FeatureExtractor>> {
    match cfg.kind.as_str() {
        "resnet18" => Ok(Box::new(ResNetExtractor::new(cfg)?)),
        other => Err(Error::Config(format!("unknown backbone kind {other:?}"))),
    }
}

pub fn extract_batch(
    extractor: &dyn FeatureExtractor,
    images: &[Array3<f32>],
    exec: Exec,
) -> Result<Vec<EmbeddingGrid>> {
    exec.map(images, |img| extractor.extract(img))
        .into_iter()
        .collect()
}

/// `H x W x C` image to ImageNet-normalized `3 x H x W`.
pub(crate) fn normalize_chw(img: &Array3<f32>) -> Array3<f32> {
    let rgb = to_rgb(img);
    let (h, w, _) = rgb.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| (rgb[[y, x, c]] - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
}

/// 3x3 mean over valid neighbours of a `C x H x W` map.
fn neighbourhood_mean(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        let mut s = 0.0f32;
        let mut n = 0.0f32;
        for yy in y.saturating_sub(1)..(y + 2).min(h) {
            for x2 in xx.saturating_sub(1)..(xx + 2).min(w) {
                s += x[[ch, yy, x2]];
                n += 1.0;
            }
        }
        s / n
    })
}

pub struct ResNetExtractor {
    net: ResNet18,
    layers: Vec<usize>,
    aggregate: bool,
}

impl ResNetExtractor {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let mut layers = cfg.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() || layers.iter().any(|&l| !(1..=4).contains(&l)) {
            return Err(Error::Config(format!("backbone layers must be within 1..=4, got {:?}", cfg.layers)));
        }
        let depth = *layers.last().expect("nonempty");
        let net = match &cfg.weights {
            Some(p) => {
                info!("loading backbone weights from {}", p.display());
                ResNet18::from_safetensors(p, depth)?
            }
            None => {
                info!("no backbone weights configured; using seeded calibrated network (seed {})", cfg.init_seed);
                ResNet18::seeded(depth, cfg.init_seed)
            }
        };
        Ok(Self::from_network(net, layers, cfg.aggregate))
    }

    pub fn from_network(net: ResNet18, layers: Vec<usize>, aggregate: bool) -> Self {
        ResNetExtractor { net, layers, aggregate }
    }

    pub fn network(&self) -> &ResNet18 {
        &self.net
    }
}

impl FeatureExtractor for ResNetExtractor {
    fn extract(&self, image: &Array3<f32>) -> Result<EmbeddingGrid> {
        let (h, w, c) = image.dim();
        if c != 1 && c != 3 {
            return Err(Error::DimMismatch {
                context: "image channels (1 or 3)",
                expected: 3,
                actual: c,
            });
        }
        let x = normalize_chw(image);
        let stages = self.net.forward_stages(&x);
        let first = &stages[self.layers[0] - 1];
        let (_, gh, gw) = first.dim();
        let parts: Vec<Array3<f32>> = self
            .layers
            .iter()
            .map(|&l| {
                let m = &stages[l - 1];
                if m.dim().1 == gh && m.dim().2 == gw {
                    m.clone()
                } else {
                    resnet::resize_map(m, gh, gw)
                }
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let mut cat = ndarray::concatenate(Axis(0), &views).expect("same spatial size");
        if self.aggregate {
            cat = neighbourhood_mean(&cat);
        }
        if let Some(pos) = cat.iter().position(|v| !v.is_finite()) {
            let hw = gh * gw;
            return Err(Error::NonFinite(format!(
                "backbone activations (first bad element at channel {}, cell {}; input {h}x{w})",
                pos / hw,
                pos % hw,
            )));
        }
        let values = cat.permuted_axes([1, 2, 0]).mapv(|v| v as f64);
        EmbeddingGrid::new(values, (h / gh).max(1), Space::Raw)
    }

    fn out_dim(&self) -> usize {
        self.layers.iter().map(|&l| STAGE_WIDTHS[l - 1]).sum()
    }

    fn stride(&self) -> usize {
        STAGE_STRIDES[self.layers[0] - 1]
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let depth = *self.layers.last().expect("nonempty");
        let mut f = self.net.flops(h, w, depth);
        let s = self.stride();
        let cells = ((h / s) * (w / s)) as u64;
        let d = self.out_dim() as u64;
        // bilinear resize of deeper stages (4 mul-adds per element)
        f += 8 * cells * (d - STAGE_WIDTHS[self.layers[0] - 1] as u64);
        if self.aggregate {
            f += 9 * cells * d;
        }
        f
    }
}
