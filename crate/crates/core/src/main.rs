use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reidnet::config::ConfigMap;
use reidnet::data::{generate_synthetic, load_dataset, save_dataset, Dataset, Split, SynthSpec};
use reidnet::error::Result;
use reidnet::eval::{evaluate, write_cmc_csv, write_loss_csv, write_spectrum_csv};
use reidnet::extractor::ExtractorConfig;
use reidnet::mining::MiningConfig;
use reidnet::model::{load_checkpoint, save_checkpoint, Model};
use reidnet::train::{fit, pretrain_softmax, TrainConfig};
use reidnet::Real;

#[derive(Parser)]
#[command(name = "reidnet", about = "Metric learning for re-identification", version)]
struct Cli {
    /// Cap on parallel worker threads (default: machine core count)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Softmax pre-training of the extractor; writes a checkpoint
    Pretrain(PretrainArgs),
    /// Fine-tune extractor and metric jointly; writes checkpoint + loss CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint: writes CMC CSV and prints rank-1
    Eval(EvalArgs),
    /// Write the singular-value spectrum of M = WWᵀ as CSV
    Spectrum(SpectrumArgs),
    /// Export first-layer convolution filters as PNG grids
    ExportFilters(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    ids: usize,
    #[arg(long, default_value_t = 3)]
    per_camera: usize,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 0.15)]
    tint: f64,
    #[arg(long, default_value_t = 3)]
    jitter: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    tied_branches: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, loss CSV and run.cfg
    #[arg(long)]
    out: PathBuf,
    /// Optional checkpoint to initialize the extractor from
    #[arg(long)]
    init: Option<PathBuf>,
    /// Key-value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<Real>,
    #[arg(long)]
    alpha: Option<Real>,
    #[arg(long)]
    beta: Option<Real>,
    /// Derive mining bounds per pool from distance percentiles
    #[arg(long)]
    adaptive_mining: bool,
    #[arg(long)]
    no_positive_mining: bool,
    #[arg(long)]
    no_negative_mining: bool,
    #[arg(long)]
    tied_branches: bool,
    /// Optional hinge margin on the pairwise loss
    #[arg(long)]
    margin: Option<Real>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Extractor size preset: tiny, compact or large
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output CMC CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory for one PNG grid per branch
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::ExportFilters(a) => cmd_export_filters(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        identities: a.ids,
        images_per_camera: a.per_camera,
        cameras: a.cameras,
        tint_strength: a.tint,
        jitter: a.jitter,
        noise: a.noise,
        outlier_fraction: a.outlier_fraction,
        seed: a.seed,
    };
    let ds = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} images to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let (ds, warnings) = load_dataset(dir)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn preset_config(name: Option<&str>) -> Result<ExtractorConfig> {
    match name.unwrap_or("compact") {
        "tiny" => Ok(ExtractorConfig::tiny()),
        "compact" => Ok(ExtractorConfig::default()),
        "large" => Ok(ExtractorConfig::large()),
        other => Err(reidnet::Error::Format(format!("unknown preset `{other}`"))),
    }
}

/// defaults < config file < command line, echoed to run.cfg
fn effective_config(file: Option<&PathBuf>, flags: &ConfigMap) -> Result<ConfigMap> {
    let d = TrainConfig::default();
    let mut cfg = ConfigMap::new();
    cfg.set("epochs", d.epochs);
    cfg.set("lambda", d.lambda);
    cfg.set("lr", d.learning_rate);
    cfg.set("batch_size", d.batch_size);
    cfg.set("seed", 0u64);
    cfg.set("adaptive_mining", d.mining.adaptive);
    cfg.set("alpha", d.mining.alpha);
    cfg.set("beta", d.mining.beta);
    cfg.set("positive_mining", d.positive_mining);
    cfg.set("negative_mining", d.negative_mining);
    cfg.set("tied_branches", false);
    cfg.set("pretrain_epochs", d.pretrain_epochs);
    cfg.set("preset", "compact");
    if let Some(path) = file {
        cfg.merge(&ConfigMap::load(path)?);
    }
    cfg.merge(flags);
    Ok(cfg)
}

fn train_config_from(cfg: &ConfigMap) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let preset = cfg.require("preset")?.to_string();
    let mut extractor = preset_config(Some(&preset))?;
    extractor.tied_branches = cfg.get_or("tied_branches", false)?;
    let beta_raw = cfg.require("beta")?;
    let beta: Real = if beta_raw == "inf" {
        Real::INFINITY
    } else {
        cfg.get_or("beta", d.mining.beta)?
    };
    Ok(TrainConfig {
        extractor,
        learning_rate: cfg.get_or("lr", d.learning_rate)?,
        batch_size: cfg.get_or("batch_size", d.batch_size)?,
        epochs: cfg.get_or("epochs", d.epochs)?,
        lambda: cfg.get_or("lambda", d.lambda)?,
        seed: cfg.get_or("seed", 0u64)?,
        margin: cfg.get_parsed("margin")?,
        positive_mining: cfg.get_or("positive_mining", true)?,
        negative_mining: cfg.get_or("negative_mining", true)?,
        mining: MiningConfig {
            alpha: cfg.get_or("alpha", d.mining.alpha)?,
            beta,
            adaptive: cfg.get_or("adaptive_mining", d.mining.adaptive)?,
            ..d.mining
        },
        pretrain_epochs: cfg.get_or("pretrain_epochs", d.pretrain_epochs)?,
        ..d
    })
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut flags = ConfigMap::new();
    if let Some(v) = a.epochs {
        flags.set("pretrain_epochs", v);
    }
    if let Some(v) = a.seed {
        flags.set("seed", v);
    }
    if let Some(v) = &a.preset {
        flags.set("preset", v);
    }
    if a.tied_branches {
        flags.set("tied_branches", true);
    }
    let cfg = effective_config(a.config.as_ref(), &flags)?;
    let mut tc = train_config_from(&cfg)?;
    if tc.pretrain_epochs == 0 {
        tc.pretrain_epochs = 10;
    }
    let ds = load_data(&a.data)?;
    let report = pretrain_softmax(&ds, &tc)?;
    let model = Model {
        config: tc.extractor.clone(),
        params: report.params,
        metric: reidnet::MetricLayer::identity(reidnet::extractor::FEATURE_DIM, tc.lambda),
    };
    save_checkpoint(&model, &a.out)?;
    println!(
        "pretrain done: initial loss {:.4}, final accuracy {:.4}",
        report.initial_loss, report.final_accuracy
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut flags = ConfigMap::new();
    if let Some(v) = a.epochs {
        flags.set("epochs", v);
    }
    if let Some(v) = a.lambda {
        flags.set("lambda", v);
    }
    if let Some(v) = a.alpha {
        flags.set("alpha", v);
        flags.set("adaptive_mining", false);
    }
    if let Some(v) = a.beta {
        flags.set("beta", v);
        flags.set("adaptive_mining", false);
    }
    if a.adaptive_mining {
        flags.set("adaptive_mining", true);
    }
    if a.no_positive_mining {
        flags.set("positive_mining", false);
    }
    if a.no_negative_mining {
        flags.set("negative_mining", false);
    }
    if a.tied_branches {
        flags.set("tied_branches", true);
    }
    if let Some(v) = a.margin {
        flags.set("margin", v);
    }
    if let Some(v) = a.seed {
        flags.set("seed", v);
    }
    if let Some(v) = a.lr {
        flags.set("lr", v);
    }
    if let Some(v) = a.batch_size {
        flags.set("batch_size", v);
    }
    if let Some(v) = a.pretrain_epochs {
        flags.set("pretrain_epochs", v);
    }
    if let Some(v) = &a.preset {
        flags.set("preset", v);
    }
    let cfg = effective_config(a.config.as_ref(), &flags)?;
    let tc = train_config_from(&cfg)?;

    let ds = load_data(&a.data)?;
    let init = match &a.init {
        Some(path) => {
            let m = load_checkpoint(path)?;
            if m.config != tc.extractor {
                return Err(reidnet::Error::Format(
                    "init checkpoint config does not match requested extractor config".into(),
                ));
            }
            Some(m.params)
        }
        None => None,
    };
    std::fs::create_dir_all(&a.out)?;
    cfg.write(&a.out.join("run.cfg"))?;
    let (model, trace) = fit(&ds, &tc, init)?;
    save_checkpoint(&model, &a.out.join("model.ckpt"))?;
    write_loss_csv(&trace, &a.out.join("loss.csv"))?;
    if let Some(last) = trace.last() {
        println!(
            "train done: {} epochs, final mean loss {:.6}",
            trace.len(),
            last.mean_loss
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let mut ds = load_data(&a.data)?;
    for id in ds.identities() {
        ds.set_split(id, Split::Test);
    }
    let (_, curve) = evaluate(&ds, Split::Test, &model, a.seed)?;
    write_cmc_csv(&curve, &a.out)?;
    println!("rank-1: {:.4}", curve.rank1());
    Ok(())
}

fn cmd_spectrum(a: SpectrumArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let spectrum = model.metric.spectrum();
    write_spectrum_csv(&spectrum, &a.out)?;
    println!(
        "spectrum: max {:.6} min {:.6}",
        spectrum.first().copied().unwrap_or(0.0),
        spectrum.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_export_filters(a: ExportArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    std::fs::create_dir_all(&a.out)?;
    let k = model.config.conv1.kernel;
    let cell = k + 2;
    for (bi, branch) in model.params.branches.iter().enumerate() {
        let w = &branch.conv1_w;
        let filters = w.shape()[0];
        let cols = (filters as f64).sqrt().ceil() as usize;
        let rows = filters.div_ceil(cols);
        let (width, height) = (cols * cell, rows * cell);
        let mut img = image::RgbImage::from_pixel(
            width as u32,
            height as u32,
            image::Rgb([32, 32, 32]),
        );
        for f in 0..filters {
            let base = f * 3 * k * k;
            let slice = &w.data()[base..base + 3 * k * k];
            let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
            let (gr, gc) = (f / cols, f % cols);
            for r in 0..k {
                for c in 0..k {
                    let px = [
                        ((slice[r * k + c] - lo) * scale) as u8,
                        ((slice[k * k + r * k + c] - lo) * scale) as u8,
                        ((slice[2 * k * k + r * k + c] - lo) * scale) as u8,
                    ];
                    img.put_pixel(
                        (gc * cell + c + 1) as u32,
                        (gr * cell + r + 1) as u32,
                        image::Rgb(px),
                    );
                }
            }
        }
        let path = a.out.join(format!("branch{bi}_conv1.png"));
        img.save(&path).map_err(reidnet::Error::from)?;
    }
    println!(
        "wrote {} filter grid(s) to {}",
        model.params.branches.len(),
        a.out.display()
    );
    Ok(())
}
