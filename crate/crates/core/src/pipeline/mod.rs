//! Training and inference orchestration.
//!
//! Each step draws the few-shot images, augments and corrupts them, embeds
//! both views, synthesizes global pathological embeddings from the clean
//! view, and takes one Adam step on the adapter and discriminator. The
//! backbone and anchor bank stay frozen throughout.

mod checkpoint;
mod infer;

pub use checkpoint::Checkpoint;
pub use infer::{benchmark, select_threshold, AnomalyMap, BenchReport, Detector};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use ndarray::{Array1, Array3};
use rand::seq::index::sample as sample_indices;

use crate::anchor_bank::AnchorBank;
use crate::backbone::{extract_batch, FeatureExtractor};
use crate::config::RunConfig;
use crate::data_io::{ImageSample, TextureProvider};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imageops::Letterbox;
use crate::model::{loss_and_grad, TrainItem};
use crate::network::Model;
use crate::objectives::{downsample_mask, LossReport};
use crate::optim::Adam;
use crate::pieg::generate_cells;
use crate::rng::stream;
use crate::synthesis::{augment, corrupt, Corrupted};

const TAG_MODEL: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_ITEM: u64 = 3;
const TAG_GPE: u64 = 4;

pub const LOSS_LOG_HEADER: &str = "step\ttotal\tl_local\tl_global\tl_lc\tl_gc\tfocal\tbce_n\tbce_s";

/// Letterbox an image to the square working resolution.
pub fn to_working(image: &Array3<f32>, size: usize) -> Array3<f32> {
    let (h, w, _) = image.dim();
    Letterbox::new(h, w, size).apply(image)
}

/// Anchor bank from raw features of the un-augmented training images.
pub fn build_bank(
    samples: &[ImageSample],
    cfg: &RunConfig,
    extractor: &dyn FeatureExtractor,
    exec: Exec,
) -> Result<AnchorBank> {
    if samples.is_empty() {
        return Err(Error::EmptyPool);
    }
    let images: Vec<Array3<f32>> = samples.iter().map(|s| to_working(&s.pixels, cfg.working_size)).collect();
    let grids = extract_batch(extractor, &images, exec)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    AnchorBank::build(&grids, &ids, cfg.bank.ratio, cfg.bank.cap, cfg.seed, exec)
}

/// The augmented and corrupted views of working-resolution image `index`
/// at `step`, drawn from the same streams training uses.
pub fn synthesize(
    image: &Array3<f32>,
    cfg: &RunConfig,
    textures: &TextureProvider,
    step: usize,
    index: usize,
) -> (Array3<f32>, Corrupted) {
    let mut rng = stream(cfg.seed, &[TAG_ITEM, step as u64, index as u64]);
    let x_n = augment(image, &cfg.augment, &mut rng);
    let c = corrupt(&x_n, textures, &cfg.anomaly, &mut rng);
    (x_n, c)
}

pub struct TrainOptions<'a> {
    pub exec: Exec,
    /// Loss log destination, one TSV row per step.
    pub log: Option<&'a Path>,
    pub bank_path: Option<&'a Path>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            exec: Exec::default(),
            log: None,
            bank_path: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossReport>,
    /// Corruptions that found no usable mask.
    pub failed_masks: usize,
    /// Synthetic embeddings whose ascent stopped on a vanishing gradient.
    pub degenerate_gpe: usize,
}

struct Prepared {
    raw_n: ndarray::Array2<f64>,
    raw_p: ndarray::Array2<f64>,
    mask: Array1<bool>,
    failed: bool,
}

fn log_row(w: &mut impl Write, step: usize, r: &LossReport) -> std::io::Result<()> {
    write!(w, "{step}")?;
    for (_, v) in r.fields() {
        write!(w, "\t{v:.10e}")?;
    }
    writeln!(w)
}

pub fn train(
    samples: &[ImageSample],
    bank: &AnchorBank,
    cfg: &RunConfig,
    extractor: &dyn FeatureExtractor,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let exec = opts.exec;
    let in_dim = extractor.out_dim();
    let mut model = Model::init(in_dim, &cfg.network, &mut stream(cfg.seed, &[TAG_MODEL]))?;
    if bank.dim() != model.adapter.linear.out_dim() {
        return Err(Error::DimMismatch {
            context: "anchor bank vs adapter output",
            expected: model.adapter.linear.out_dim(),
            actual: bank.dim(),
        });
    }
    info!(
        "training {} trainable parameters on {} images for {} steps",
        model.n_params(),
        samples.len(),
        cfg.epochs
    );
    let images: Vec<Array3<f32>> = samples.iter().map(|s| to_working(&s.pixels, cfg.working_size)).collect();
    let textures = TextureProvider::new(&cfg.texture);
    let pieg = cfg.effective_pieg();
    let mut opt = Adam::new(&model, cfg.optim);
    let mut log = match opts.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{LOSS_LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let k = samples.len();
    let batch = if cfg.batch_size == 0 || cfg.batch_size >= k { k } else { cfg.batch_size };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut failed_masks = 0;
    let mut degenerate_gpe = 0;

    for step in 0..cfg.epochs {
        let chosen: Vec<usize> = if batch == k {
            (0..k).collect()
        } else {
            let mut v = sample_indices(&mut stream(cfg.seed, &[TAG_BATCH, step as u64]), k, batch).into_vec();
            v.sort_unstable();
            v
        };
        let prepared: Vec<Result<Prepared>> = exec.map(&chosen, |&i| {
            let (x_n, c) = synthesize(&images[i], cfg, &textures, step, i);
            let g_n = extractor.extract(&x_n)?;
            let g_p = extractor.extract(&c.image)?;
            let mask = downsample_mask(&c.mask, g_p.height(), g_p.width(), cfg.mask_overlap);
            Ok(Prepared {
                raw_n: g_n.into_cells(),
                raw_p: g_p.into_cells(),
                mask: mask.into_iter().collect(),
                failed: c.failed,
            })
        });
        let prepared: Vec<Prepared> = prepared.into_iter().collect::<Result<_>>()?;
        failed_masks += prepared.iter().filter(|p| p.failed).count();

        let offsets: Vec<Option<(ndarray::Array2<f64>, bool)>> = if cfg.ablation.needs_gpe() {
            let r: Vec<Result<_>> = exec.map_range(prepared.len(), |j| {
                let nu_n = model.adapter.forward_cells(prepared[j].raw_n.view());
                let mut rng = stream(cfg.seed, &[TAG_GPE, step as u64, chosen[j] as u64]);
                let out = generate_cells(nu_n.view(), &model.disc, bank, &cfg.loss, &pieg, &mut rng, Exec::Sequential)?;
                Ok(Some((&out.gpe - &nu_n, out.degenerate)))
            });
            r.into_iter().collect::<Result<_>>()?
        } else {
            vec![None; prepared.len()]
        };

        let items: Vec<TrainItem> = prepared
            .into_iter()
            .zip(offsets)
            .map(|(p, off)| {
                if let Some((_, true)) = off {
                    degenerate_gpe += 1;
                }
                TrainItem {
                    raw_n: p.raw_n,
                    raw_p: p.raw_p,
                    mask: p.mask,
                    gpe_offset: off.map(|(o, _)| o),
                }
            })
            .collect();

        let (report, grads) = loss_and_grad(&model, &items, bank, &cfg.loss, &cfg.ablation, exec, true)?;
        if let Some(w) = log.as_mut() {
            log_row(w, step, &report)?;
            w.flush()?;
        }
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: report.to_string(),
            });
        }
        opt.step(&mut model, &grads.expect("gradients requested"));
        debug!("step {step}: {report}");
        losses.push(report);
    }
    if failed_masks > 0 {
        info!("{failed_masks} corruptions found no usable mask");
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            config: cfg.clone(),
            bank_path: opts.bank_path.map(Path::to_path_buf),
            bank_len: bank.len(),
        },
        losses,
        failed_masks,
        degenerate_gpe,
    })
}

/// Detector for a freshly trained checkpoint that reuses `extractor`.
pub fn detector(ckpt: &Checkpoint, extractor: Arc<dyn FeatureExtractor>) -> Result<Detector> {
    Detector::new(extractor, ckpt.model.clone(), &ckpt.config)
}

/// Parse a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::format(path, "missing loss log header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split('\t')
                .skip(1)
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, e.to_string()))?;
            if v.len() != 8 {
                return Err(Error::format(path, "loss row needs 8 values"));
            }
            Ok(LossReport {
                total: v[0],
                l_local: v[1],
                l_global: v[2],
                l_lc: v[3],
                l_gc: v[4],
                focal: v[5],
                bce_n: v[6],
                bce_s: v[7],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use crate::data_io::{make_toy_dataset, ToySpec};
    use crate::model::AblationPreset;
    use crate::network::NetworkConfig;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            epochs: 2,
            working_size: 64,
            network: NetworkConfig {
                disc_hidden: 16,
                ..Default::default()
            },
            pieg: crate::pieg::PiegConfig {
                steps: 2,
                ..Default::default()
            },
            backbone: BackboneConfig {
                layers: vec![2],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn toy() -> (Vec<ImageSample>, Vec<ImageSample>) {
        make_toy_dataset(
            &ToySpec {
                k_shots: 1,
                n_normal: 2,
                n_anomalous: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn one_sample_run_writes_log_and_checkpoint() {
        let (train_set, test) = toy();
        let cfg = tiny_cfg();
        let ext: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&cfg.backbone).unwrap());
        let bank = build_bank(&train_set, &cfg, ext.as_ref(), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("loss.tsv");
        let out = train(
            &train_set,
            &bank,
            &cfg,
            ext.as_ref(),
            &TrainOptions {
                log: Some(&log),
                ..Default::default()
            },
        )
        .unwrap();
        let rows = read_loss_log(&log).unwrap();
        assert_eq!(rows.len(), cfg.epochs);
        for (a, b) in rows.iter().zip(&out.losses) {
            assert!((a.total - b.total).abs() <= 1e-9 * b.total.abs().max(1.0));
        }
        let p = dir.path().join("m.ckpt");
        out.checkpoint.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let det = detector(&loaded, ext.clone()).unwrap();
        let img = &test[0].pixels;
        let m = det.infer(img, Some(0.5)).unwrap();
        assert_eq!(m.pixels.dim(), (img.dim().0, img.dim().1));
        assert!(m.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.image_score, m.pixels.iter().copied().fold(f64::MIN, f64::max));
        assert_eq!(m.decision, Some(m.image_score > 0.5));
        assert_eq!(det.infer(img, None).unwrap(), det.infer(img, None).unwrap());
    }

    #[test]
    fn none_ablation_zeroes_contrastive_terms() {
        let (train_set, _) = toy();
        let mut cfg = tiny_cfg();
        cfg.ablation = AblationPreset::None.apply(cfg.ablation);
        let ext = build_backbone(&cfg.backbone).unwrap();
        let bank = build_bank(&train_set, &cfg, ext.as_ref(), Exec::Sequential).unwrap();
        let out = train(&train_set, &bank, &cfg, ext.as_ref(), &TrainOptions::default()).unwrap();
        for r in &out.losses {
            assert_eq!((r.l_lc, r.l_gc), (0.0, 0.0));
            assert_eq!(r.total, r.focal + r.bce_n + r.bce_s);
        }
    }

    #[test]
    fn constant_discriminator_gives_flat_map() {
        let cfg = tiny_cfg();
        let ext: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&cfg.backbone).unwrap());
        let mut model = Model::init(ext.out_dim(), &cfg.network, &mut stream(0, &[])).unwrap();
        for l in model.disc.hidden.iter_mut() {
            l.weight.fill(0.0);
        }
        model.disc.out.weight.fill(0.0);
        model.disc.out.bias.as_mut().unwrap().fill(0.3);
        let c = 1.0 / (1.0 + (-0.3f64).exp());
        let det = Detector::new(ext, model, &cfg).unwrap();
        let img = Array3::from_elem((40, 50, 1), 0.5f32);
        let m = det.infer(&img, None).unwrap();
        assert_eq!(m.pixels.dim(), (40, 50));
        assert!(m.pixels.iter().all(|v| (v - c).abs() < 1e-12));
        assert!((m.image_score - c).abs() < 1e-12);
    }

    #[test]
    fn threshold_policies() {
        use crate::config::ThresholdPolicy;
        let maps: Vec<AnomalyMap> = [0.1, 0.2, 0.8, 0.9]
            .iter()
            .map(|&s| AnomalyMap::from_pixels(ndarray::Array2::from_elem((2, 2), s), None).unwrap())
            .collect();
        let labels = [false, false, true, true];
        assert_eq!(select_threshold(&maps, &labels, ThresholdPolicy::Fmax).unwrap(), Some(0.5));
        assert_eq!(
            select_threshold(&maps, &labels, ThresholdPolicy::Fixed { value: 0.3 }).unwrap(),
            Some(0.3)
        );
        assert_eq!(select_threshold(&maps, &labels, ThresholdPolicy::None).unwrap(), None);
    }

    #[test]
    fn benchmark_reports_and_scales() {
        let cfg = tiny_cfg();
        let ext: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&cfg.backbone).unwrap());
        let model = Model::init(ext.out_dim(), &cfg.network, &mut stream(0, &[])).unwrap();
        let det = Detector::new(ext, model, &cfg).unwrap();
        let r = benchmark(&det, 64, 1).unwrap();
        assert!(r.fps.is_finite() && r.fps > 0.0);
        assert_eq!(r.flops, det.flops(64));
        let ratio = det.flops(128) as f64 / det.flops(64) as f64;
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }
}
