use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use anomap::anchor_bank::AnchorBank;
use anomap::backbone::{build_backbone, BackboneConfig, FeatureExtractor};
use anomap::config::RunConfig;
use anomap::data_io::{
    has_image_ext, load_dataset, make_toy_dataset, read_image, write_dataset, write_heatmap16, write_image, write_mask,
    Split, TextureProvider,
};
use anomap::evaluation::{evaluate, DiceMode, EvalOptions};
use anomap::model::AblationPreset;
use anomap::pipeline::{self, benchmark, build_bank, to_working, Checkpoint, Detector, TrainOptions};
use anomap::Exec;

/// Few-shot anomaly localization: toy data, anchor bank, training,
/// inference, evaluation and benchmarking.
#[derive(Parser)]
#[command(name = "anomap", version)]
struct Cli {
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy dataset (train/good, test/good, test/bad, test/bad_masks).
    MakeToy(MakeToy),
    /// Build the anchor bank from the training split.
    BuildBank(BuildBank),
    /// Train adapter and discriminator; writes model.ckpt and loss_log.tsv.
    Train(Train),
    /// Write 16-bit heatmaps and a scores.json manifest.
    Infer(Infer),
    /// Multi-seed metrics on the test split.
    Evaluate(Evaluate),
    /// Static FLOP estimate and measured throughput.
    Benchmark(Benchmark),
}

#[derive(Args)]
struct MakeToy {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k_shots: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config whose [toy] section supplies the remaining settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BuildBank {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    Llc,
    Lgc,
    Glcl,
}

impl From<AblationArg> for AblationPreset {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => AblationPreset::None,
            AblationArg::Llc => AblationPreset::Llc,
            AblationArg::Lgc => AblationPreset::Lgc,
            AblationArg::Glcl => AblationPreset::Glcl,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Write (augmented, corrupted, mask) images of the first step here.
    #[arg(long)]
    dump_synthesis: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long, required_unless_present = "dir", conflicts_with = "dir")]
    image: Option<PathBuf>,
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Image-level decision threshold (score > tau).
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: PathBuf,
    /// One checkpoint per seed.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Seed labels for the checkpoints, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    report: PathBuf,
    /// Pixel threshold for DICE/IoU; best-threshold sweep when omitted.
    #[arg(long)]
    dice_threshold: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    fpr_limit: f64,
}

#[derive(Args)]
struct Benchmark {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn make_toy(a: MakeToy) -> Result<()> {
    let mut spec = load_config(a.config.as_deref())?.toy;
    if let Some(k) = a.k_shots {
        spec.k_shots = k;
    }
    if let Some(s) = a.size {
        spec.size = s;
    }
    let (train, test) = make_toy_dataset(&spec, a.seed)?;
    write_dataset(&a.out, &train, &test)?;
    println!(
        "wrote {} train, {} test images to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn build_bank_cmd(a: BuildBank, exec: Exec) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let loaded = load_dataset(&a.data, Split::Train)?;
    let extractor = build_backbone(&cfg.backbone)?;
    let bank = build_bank(&loaded.samples, &cfg, extractor.as_ref(), exec)?;
    bank.save(&a.out)?;
    println!("N_A = {} anchors from a pool of {} cells", bank.len(), bank.meta().pool_size);
    Ok(())
}

fn train_cmd(a: Train, exec: Exec) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = AblationPreset::from(ab).apply(cfg.ablation);
    }
    cfg.validate()?;
    let loaded = load_dataset(&a.data, Split::Train)?;
    if loaded.samples.is_empty() {
        bail!("no training images under {}", a.data.display());
    }
    let bank = AnchorBank::load(&a.bank)?;
    std::fs::create_dir_all(&a.out)?;
    loaded.manifest.write(&a.out.join("train_manifest.json"))?;
    if let Some(dir) = &a.dump_synthesis {
        dump_synthesis(dir, &loaded.samples, &cfg)?;
    }
    let extractor = build_backbone(&cfg.backbone)?;
    let log = a.out.join("loss_log.tsv");
    let result = pipeline::train(
        &loaded.samples,
        &bank,
        &cfg,
        extractor.as_ref(),
        &TrainOptions {
            exec,
            log: Some(&log),
            bank_path: Some(&a.bank),
        },
    );
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            if log.exists() {
                std::fs::rename(&log, a.out.join("loss_log.tsv.partial"))?;
            }
            return Err(e.into());
        }
    };
    let ckpt = a.out.join("model.ckpt");
    out.checkpoint.save(&ckpt)?;
    let last = out.losses.last().copied().unwrap_or_default();
    println!("trained {} steps; final {last}", out.losses.len());
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn dump_synthesis(dir: &Path, samples: &[anomap::data_io::ImageSample], cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let textures = TextureProvider::new(&cfg.texture);
    for (i, s) in samples.iter().enumerate() {
        let img = to_working(&s.pixels, cfg.working_size);
        let (x_n, c) = pipeline::synthesize(&img, cfg, &textures, 0, i);
        write_image(&dir.join(format!("{i:03}_normal.png")), &x_n)?;
        write_image(&dir.join(format!("{i:03}_corrupted.png")), &c.image)?;
        write_mask(&dir.join(format!("{i:03}_mask.png")), &c.mask)?;
    }
    info!("wrote synthesis previews to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    image: PathBuf,
    heatmap: PathBuf,
    height: usize,
    width: usize,
    image_score: f64,
    decision: Option<bool>,
}

fn load_detector(ckpt_path: &Path, bank: Option<&Path>) -> Result<Detector> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let bank = bank.map(AnchorBank::load).transpose()?;
    Ok(Detector::from_checkpoint(&ckpt, bank.as_ref())?)
}

fn infer_cmd(a: Infer, exec: Exec) -> Result<()> {
    let det = load_detector(&a.checkpoint, a.bank.as_deref())?;
    let inputs: Vec<PathBuf> = match (&a.image, &a.dir) {
        (Some(p), None) => vec![p.clone()],
        (None, Some(d)) => {
            let mut v: Vec<PathBuf> = std::fs::read_dir(d)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| has_image_ext(p))
                .collect();
            v.sort();
            v
        }
        _ => bail!("pass exactly one of --image or --dir"),
    };
    std::fs::create_dir_all(&a.out)?;
    let images = inputs
        .iter()
        .map(|p| read_image(p))
        .collect::<anomap::Result<Vec<_>>>()?;
    let refs: Vec<_> = images.iter().collect();
    let maps = det.infer_batch(&refs, a.tau, exec)?;
    let mut rows = Vec::with_capacity(maps.len());
    for (path, map) in inputs.iter().zip(&maps) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let heatmap = a.out.join(format!("{stem}_heatmap.png"));
        write_heatmap16(&heatmap, &map.pixels)?;
        let (height, width) = map.pixels.dim();
        rows.push(ScoreRow {
            image: path.clone(),
            heatmap,
            height,
            width,
            image_score: map.image_score,
            decision: map.decision,
        });
        println!("{}\t{:.6}", path.display(), map.image_score);
    }
    std::fs::write(a.out.join("scores.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn evaluate_cmd(a: Evaluate, exec: Exec) -> Result<()> {
    let seeds: Vec<u64> = if a.seeds.is_empty() {
        (0..a.checkpoints.len() as u64).collect()
    } else {
        a.seeds.clone()
    };
    if seeds.len() != a.checkpoints.len() {
        bail!("{} seeds for {} checkpoints", seeds.len(), a.checkpoints.len());
    }
    let test = load_dataset(&a.data, Split::Test)?;
    // checkpoints that share a backbone configuration share one extractor
    let mut shared: Vec<(BackboneConfig, Arc<dyn FeatureExtractor>)> = Vec::new();
    let mut detectors = Vec::with_capacity(a.checkpoints.len());
    for p in &a.checkpoints {
        let ckpt = Checkpoint::load(p)?;
        if let Some(b) = &a.bank {
            Detector::check_bank(&ckpt, &AnchorBank::load(b)?)?;
        }
        let extractor = match shared.iter().find(|(c, _)| *c == ckpt.config.backbone) {
            Some((_, e)) => e.clone(),
            None => {
                let e: Arc<dyn FeatureExtractor> = Arc::from(build_backbone(&ckpt.config.backbone)?);
                shared.push((ckpt.config.backbone.clone(), e.clone()));
                e
            }
        };
        detectors.push(pipeline::detector(&ckpt, extractor)?);
    }
    let pairs: Vec<(u64, &Detector)> = seeds.iter().copied().zip(detectors.iter()).collect();
    let opts = EvalOptions {
        fpr_limit: a.fpr_limit,
        dice: match a.dice_threshold {
            Some(threshold) => DiceMode::Fixed { threshold },
            None => DiceMode::Best,
        },
    };
    let report = evaluate(&pairs, &test.samples, &opts, exec)?;
    print!("{}", report.to_table());
    report.write_json(&a.report)?;
    Ok(())
}

fn benchmark_cmd(a: Benchmark) -> Result<()> {
    let det = load_detector(&a.checkpoint, None)?;
    let r = benchmark(&det, a.size, a.reps)?;
    println!("size {}x{}  reps {}", r.size, r.size, r.reps);
    println!("fps {:.3}", r.fps);
    println!("gflops {:.4}", r.flops as f64 / 1e9);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.cmd {
        Command::MakeToy(a) => make_toy(a),
        Command::BuildBank(a) => build_bank_cmd(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Infer(a) => infer_cmd(a, exec),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Benchmark(a) => benchmark_cmd(a),
    }
}
