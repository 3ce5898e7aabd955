//! Train and evaluate on the synthetic toy dataset for a few seeds.
//!
//! `cargo run --release -p anomap-core --example toy_run -- configs/toy.toml 0 1 2`

use std::sync::Arc;
use std::time::Instant;

use anomap::backbone::{build_backbone, FeatureExtractor};
use anomap::config::RunConfig;
use anomap::data_io::make_toy_dataset;
use anomap::evaluation::{evaluate, EvalOptions};
use anomap::model::AblationPreset;
use anomap::pipeline::{build_bank, detector, train, TrainOptions};
use anomap::Exec;

fn main() -> anomap::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let seeds: Vec<u64> = args.iter().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let extractor: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&cfg.backbone)?);
    for preset in [AblationPreset::Glcl, AblationPreset::None] {
        for &seed in &seeds {
            let t0 = Instant::now();
            let run = RunConfig {
                seed,
                ablation: preset.apply(cfg.ablation),
                ..cfg.clone()
            };
            let (train_set, test) = make_toy_dataset(&run.toy, seed)?;
            let bank = build_bank(&train_set, &run, extractor.as_ref(), Exec::default())?;
            let out = train(&train_set, &bank, &run, extractor.as_ref(), &TrainOptions::default())?;
            let det = detector(&out.checkpoint, extractor.clone())?;
            let report = evaluate(&[(seed, &det)], &test, &EvalOptions::default(), Exec::default())?;
            let m = report.mean;
            let last = out.losses.last().copied().unwrap_or_default();
            println!(
                "{preset:?} seed {seed}: image {:.4} pixel {:.4} pro {:.4} dice {:.4} | {:.1}s | last {last}",
                m.image_auroc,
                m.pixel_auroc,
                m.pro,
                m.dice,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
