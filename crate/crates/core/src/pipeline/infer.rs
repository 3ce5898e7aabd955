use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::anchor_bank::AnchorBank;
use crate::backbone::{build_backbone, EmbeddingGrid, FeatureExtractor};
use crate::config::{RunConfig, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::evaluation::fmax_threshold;
use crate::exec::Exec;
use crate::imageops::{gaussian_blur, resize_plane, Letterbox};
use crate::network::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// Per-pixel scores at the input resolution.
    pub pixels: Array2<f64>,
    /// Maximum pixel score.
    pub image_score: f64,
    pub decision: Option<bool>,
}

impl AnomalyMap {
    pub fn from_pixels(pixels: Array2<f64>, tau: Option<f64>) -> Result<Self> {
        if pixels.is_empty() || pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anomaly map".into()));
        }
        let image_score = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(AnomalyMap {
            pixels,
            image_score,
            decision: tau.map(|t| image_score > t),
        })
    }
}

/// Frozen backbone plus trained adapter and discriminator.
#[derive(Clone)]
pub struct Detector {
    pub extractor: Arc<dyn FeatureExtractor>,
    pub model: Model,
    pub working_size: usize,
    pub smoothing_sigma: f64,
}

impl Detector {
    pub fn new(extractor: Arc<dyn FeatureExtractor>, model: Model, cfg: &RunConfig) -> Result<Self> {
        if extractor.out_dim() != model.adapter.linear.in_dim() {
            return Err(Error::DimMismatch {
                context: "backbone output vs adapter input",
                expected: model.adapter.linear.in_dim(),
                actual: extractor.out_dim(),
            });
        }
        Ok(Detector {
            extractor,
            model,
            working_size: cfg.working_size,
            smoothing_sigma: cfg.inference.smoothing_sigma,
        })
    }

    /// Rebuild the backbone from the checkpoint's configuration. When a bank
    /// is given its dimension must match the adapter output.
    pub fn from_checkpoint(ckpt: &Checkpoint, bank: Option<&AnchorBank>) -> Result<Self> {
        if let Some(b) = bank {
            Self::check_bank(ckpt, b)?;
        }
        let extractor: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&ckpt.config.backbone)?);
        Self::new(extractor, ckpt.model.clone(), &ckpt.config)
    }

    /// Check that `bank` matches the checkpoint's adapter output.
    pub fn check_bank(ckpt: &Checkpoint, bank: &AnchorBank) -> Result<()> {
        if bank.dim() != ckpt.model.adapter.linear.out_dim() {
            return Err(Error::DimMismatch {
                context: "anchor bank vs adapter output",
                expected: ckpt.model.adapter.linear.out_dim(),
                actual: bank.dim(),
            });
        }
        Ok(())
    }

    /// Adapted embeddings of one image at working resolution.
    pub fn embed(&self, image: &Array3<f32>) -> Result<(EmbeddingGrid, Letterbox)> {
        let (h, w, _) = image.dim();
        let lb = Letterbox::new(h, w, self.working_size);
        let raw = self.extractor.extract(&lb.apply(image))?;
        Ok((self.model.adapter.adapt(&raw)?, lb))
    }

    /// Discriminator scores on the embedding grid.
    pub fn score_grid(&self, image: &Array3<f32>) -> Result<(Array2<f64>, Letterbox)> {
        let (nu, lb) = self.embed(image)?;
        Ok((self.model.disc.discriminate(&nu)?, lb))
    }

    pub fn infer(&self, image: &Array3<f32>, tau: Option<f64>) -> Result<AnomalyMap> {
        let (grid, lb) = self.score_grid(image)?;
        let full = resize_plane(grid.view(), self.working_size, self.working_size);
        let mut pixels = lb.invert(full.view());
        if self.smoothing_sigma > 0.0 {
            pixels = gaussian_blur(pixels.view(), self.smoothing_sigma);
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        AnomalyMap::from_pixels(pixels, tau)
    }

    pub fn infer_batch(&self, images: &[&Array3<f32>], tau: Option<f64>, exec: Exec) -> Result<Vec<AnomalyMap>> {
        exec.map(images, |img| self.infer(img, tau)).into_iter().collect()
    }

    /// Static multiply-add count of the inference path at `size x size`,
    /// reported as FLOPs (two per multiply-add).
    pub fn flops(&self, size: usize) -> u64 {
        let stride = self.extractor.stride();
        let cells = (size.div_ceil(stride) * size.div_ceil(stride)) as u64;
        self.extractor.flops(size, size) + 2 * cells * self.model.macs_per_cell()
    }
}

/// Threshold for image-level decisions under `policy`. `Fmax` needs
/// labelled validation maps; `None` yields no threshold.
pub fn select_threshold(maps: &[AnomalyMap], labels: &[bool], policy: ThresholdPolicy) -> Result<Option<f64>> {
    match policy {
        ThresholdPolicy::Fixed { value } => Ok(Some(value)),
        ThresholdPolicy::None => Ok(None),
        ThresholdPolicy::Fmax => {
            let scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
            Ok(Some(fmax_threshold(&scores, labels)?.0))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub size: usize,
    pub reps: usize,
    pub fps: f64,
    pub flops: u64,
}

/// Throughput of [`Detector::infer`] on a `size x size` input processed at
/// that working resolution, after one warm-up call.
pub fn benchmark(det: &Detector, size: usize, reps: usize) -> Result<BenchReport> {
    if size < 32 || reps == 0 {
        return Err(Error::Config("benchmark needs size >= 32 and reps >= 1".into()));
    }
    let mut d = det.clone();
    d.working_size = size;
    let img = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        (((y * 31 + x * 17 + c * 7) % 97) as f32 / 96.0).clamp(0.0, 1.0)
    });
    d.infer(&img, None)?;
    let t0 = Instant::now();
    for _ in 0..reps {
        d.infer(&img, None)?;
    }
    let secs = t0.elapsed().as_secs_f64().max(1e-9);
    Ok(BenchReport {
        size,
        reps,
        fps: reps as f64 / secs,
        flops: d.flops(size),
    })
}
