//! Detection and localization metrics, multi-seed evaluation reports, and
//! embedding export for external visualization.

mod export;
mod metrics;

pub use export::{export_embeddings, read_embeddings, EmbeddingLabel, EmbeddingRow};
pub use metrics::{
    auroc, dice_iou, dice_iou_counts, f1_at, fmax_threshold, label_components, partial_area, pro, DiceIou, DiceMode,
    DICE_SWEEP,
};

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_io::ImageSample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pipeline::{AnomalyMap, Detector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub fpr_limit: f64,
    pub dice: DiceMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            fpr_limit: 0.3,
            dice: DiceMode::Best,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub dice: f64,
    pub iou: f64,
}

impl Metrics {
    fn values(&self) -> [f64; 5] {
        [self.image_auroc, self.pixel_auroc, self.pro, self.dice, self.iou]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            image_auroc: v[0],
            pixel_auroc: v[1],
            pro: v[2],
            dice: v[3],
            iou: v[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: Metrics,
    pub dice_threshold: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SeedRow>,
    pub mean: Metrics,
    /// Population standard deviation across seeds.
    pub std: Metrics,
    pub dice_mode: DiceMode,
    pub fpr_limit: f64,
}

/// Ground truth of a labelled test sample: image label and pixel mask.
fn truth(s: &ImageSample) -> Result<(bool, Array2<bool>)> {
    let label = s
        .label
        .ok_or_else(|| Error::Metric(format!("sample {} has no label", s.id)))?;
    let mask = s.pixel_truth().expect("labelled samples have pixel truth");
    Ok((label, mask))
}

/// All metrics for one set of maps against its samples.
pub fn evaluate_maps(maps: &[AnomalyMap], samples: &[ImageSample], opts: &EvalOptions) -> Result<(Metrics, f64)> {
    if maps.len() != samples.len() {
        return Err(Error::Metric(format!("{} maps for {} samples", maps.len(), samples.len())));
    }
    let mut labels = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let (l, m) = truth(s)?;
        labels.push(l);
        masks.push(m);
    }
    let scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let pixel_maps: Vec<Array2<f64>> = maps.iter().map(|m| m.pixels.clone()).collect();
    let pooled_scores: Vec<f64> = pixel_maps.iter().flat_map(|m| m.iter().copied()).collect();
    let pooled_truth: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel_auroc = auroc(&pooled_scores, &pooled_truth)?;
    let pro_v = pro(&pixel_maps, &masks, opts.fpr_limit)?;
    let d = dice_iou(&pixel_maps, &masks, opts.dice)?;
    Ok((
        Metrics {
            image_auroc,
            pixel_auroc,
            pro: pro_v,
            dice: d.dice,
            iou: d.iou,
        },
        d.threshold,
    ))
}

/// Mean and population std over seed rows.
pub fn aggregate(rows: Vec<SeedRow>, opts: &EvalOptions) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Metric("no evaluation rows".into()));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.metrics.values()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r.metrics.values()).zip(mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    Ok(EvalReport {
        rows,
        mean: Metrics::from_values(mean),
        std: Metrics::from_values(var.map(f64::sqrt)),
        dice_mode: opts.dice,
        fpr_limit: opts.fpr_limit,
    })
}

/// Run each seed's detector over `samples` and report per-seed metrics with
/// their mean and std.
pub fn evaluate(
    detectors: &[(u64, &Detector)],
    samples: &[ImageSample],
    opts: &EvalOptions,
    exec: Exec,
) -> Result<EvalReport> {
    let images: Vec<_> = samples.iter().map(|s| &s.pixels).collect();
    let n_pixels = samples.iter().map(|s| s.hw().0 * s.hw().1).sum();
    let mut rows = Vec::with_capacity(detectors.len());
    for &(seed, det) in detectors {
        let maps = det.infer_batch(&images, None, exec)?;
        let (metrics, dice_threshold) = evaluate_maps(&maps, samples, opts)?;
        rows.push(SeedRow {
            seed,
            metrics,
            dice_threshold,
            n_images: samples.len(),
            n_pixels,
        });
    }
    aggregate(rows, opts)
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let dice_label = match self.dice_mode {
            DiceMode::Best => "best".to_string(),
            DiceMode::Fixed { threshold } => format!("fixed@{threshold}"),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>11} {:>11} {:>8} {:>8} {:>8}",
            "seed", "image_auroc", "pixel_auroc", "pro", "dice", "iou"
        );
        let row = |s: &mut String, name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<8} {:>11.4} {:>11.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.image_auroc, m.pixel_auroc, m.pro, m.dice, m.iou
            );
        };
        for r in &self.rows {
            row(&mut s, &r.seed.to_string(), &r.metrics);
        }
        row(&mut s, "mean", &self.mean);
        row(&mut s, "std", &self.std);
        let _ = writeln!(s, "pro fpr limit {}, dice threshold {dice_label}", self.fpr_limit);
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
