//! `latbridge`: data generation, both training stages, translation,
//! evaluation and ablation from the command line.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
//! failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latbridge_core::config::{ConfigError, Overrides, RunConfig};
use latbridge_core::data::{build_dataset, load_png, read_dataset, save_png, write_dataset};
use latbridge_core::eval::{self, evaluate_pipeline, run_ablation_with, AblationCache, TestSet};
use latbridge_core::infer::TranslationPipeline;
use latbridge_core::losses::TranslationMode;
use latbridge_core::seed::derive_seed;
use latbridge_core::train::{
    self, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FrozenNets, PairFeatures,
    Stage, TranslatorTrainer, VaeganTrainer,
};
use latbridge_core::Image;

#[derive(Parser)]
#[command(name = "latbridge", version, about = "Semi-supervised image translation through latent-space mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark.
    GenData(Common),
    /// Train one domain's VAE-GAN.
    TrainVaegan(TrainVaeganArgs),
    /// Train the feature translator between two frozen VAE-GANs.
    TrainTranslator(TrainTranslatorArgs),
    /// Translate domain-1 images with a trained translator checkpoint.
    Translate(TranslateArgs),
    /// Score a translator on held-out labelled images.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a grid of methods, paired fractions and seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; absent keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of min(n1, n2) used as pairs.
    #[arg(long)]
    pairs_fraction: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long)]
    lambda_fm: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    /// Cap on optimizer steps for the stage.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(name = "l1_only")]
    L1Only,
    #[value(name = "feat_adv")]
    FeatAdv,
}

impl From<ModeArg> for TranslationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => Self::Full,
            ModeArg::L1Only => Self::L1Only,
            ModeArg::FeatAdv => Self::FeatAdv,
        }
    }
}

#[derive(Args)]
struct TrainVaeganArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    domain: u8,
}

#[derive(Args)]
struct TrainTranslatorArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Domain-1 VAE-GAN checkpoint.
    #[arg(long)]
    ckpt1: PathBuf,
    /// Domain-2 VAE-GAN checkpoint.
    #[arg(long)]
    ckpt2: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    common: Common,
    /// Translator checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    num_samples: Option<usize>,
    /// Scale of the latent perturbation; 0 gives the deterministic output.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Translator checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Labelled dataset to score on instead of a generated held-out set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics file; defaults to `<out>/metrics.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// CSV report; defaults to `<out>/ablation.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, Failure>;

fn resolve(c: &Common, num_samples: Option<usize>, sigma: Option<f64>) -> Result<RunConfig> {
    let flags = Overrides {
        seed: c.seed,
        pairs_fraction: c.pairs_fraction,
        mode: c.mode.map(Into::into),
        learning_rate: c.lr,
        batch_size: c.batch_size,
        lambda_f: c.lambda_f,
        lambda_fm: c.lambda_fm,
        lambda_kl: c.lambda_kl,
        max_steps: c.max_steps,
        num_samples,
        sigma,
    };
    Ok(RunConfig::resolve(c.config.as_deref(), &flags)?)
}

fn prepare_out(out: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("config.json"), &config.to_json())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        CheckpointError::NotFound(_) => Failure::Usage(e.to_string()),
        other => runtime(other),
    })
}

fn load_data(path: &Path) -> Result<latbridge_core::DatasetBundle> {
    if !path.join("manifest.json").is_file() {
        return Err(Failure::Usage(format!("dataset not found: {}", path.display())));
    }
    read_dataset(path).map_err(runtime)
}

fn write_log(out: &Path, log: &[train::EpochLog]) -> Result<()> {
    let text: String = log.iter().map(|l| l.to_json_line() + "\n").collect();
    write(&out.join("log.jsonl"), &text)
}

fn gen_data(c: &Common) -> Result<()> {
    let config = resolve(c, None, None)?;
    prepare_out(&c.out, &config)?;
    let bundle = build_dataset(&config.data).map_err(|e| Failure::Usage(e.to_string()))?;
    write_dataset(&bundle, &c.out).map_err(runtime)?;
    eprintln!(
        "wrote {} + {} images ({} pairs) to {}",
        bundle.unpaired1.len(),
        bundle.unpaired2.len(),
        bundle.paired.len(),
        c.out.display()
    );
    Ok(())
}

fn train_vaegan(a: &TrainVaeganArgs) -> Result<()> {
    let config = resolve(&a.common, None, None)?;
    let bundle = load_data(&a.data)?;
    prepare_out(&a.common.out, &config)?;
    let (stage, images) = match a.domain {
        1 => (Stage::VaeganDomain1, bundle.domain1_images()),
        _ => (Stage::VaeganDomain2, bundle.domain2_images()),
    };
    let mut trainer = VaeganTrainer::new(config.train.clone(), stage).map_err(|e| Failure::Usage(e.to_string()))?;
    while !trainer.finished() {
        let log = trainer.run_epoch(&images).map_err(runtime)?;
        eprintln!("{}", log.to_json_line());
    }
    let path = a.common.out.join(format!("{}.ckpt", stage.as_str()));
    save_checkpoint(&trainer.checkpoint(), &path).map_err(runtime)?;
    write_log(&a.common.out, &trainer.log)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn train_translator(a: &TrainTranslatorArgs) -> Result<()> {
    let config = resolve(&a.common, None, None)?;
    let ckpt1 = load_ckpt(&a.ckpt1)?;
    let ckpt2 = load_ckpt(&a.ckpt2)?;
    let bundle = load_data(&a.data)?;
    prepare_out(&a.common.out, &config)?;
    let mut paired = bundle.paired.clone();
    if a.common.pairs_fraction.is_some() {
        let n = config.data.n_paired.min(bundle.paired.len());
        if config.data.n_paired > bundle.paired.len() {
            return Err(Failure::Usage(format!(
                "--pairs-fraction asks for {} pairs but the dataset has {}",
                config.data.n_paired,
                bundle.paired.len()
            )));
        }
        paired.truncate(n);
    }
    let frozen = FrozenNets::from_checkpoints(&ckpt1, &ckpt2).map_err(|e| Failure::Usage(e.to_string()))?;
    let feats = PairFeatures::compute(&frozen, &paired).map_err(runtime)?;
    let down = config.train.arch.downsample();
    let hw = (bundle.height / down, bundle.width / down);
    let mut trainer =
        TranslatorTrainer::new(config.train.clone(), frozen, hw).map_err(|e| Failure::Usage(e.to_string()))?;
    while !trainer.finished() {
        let log = trainer.run_epoch(&feats).map_err(runtime)?;
        eprintln!("{}", log.to_json_line());
    }
    let path = a.common.out.join("translator.ckpt");
    save_checkpoint(&trainer.checkpoint(), &path).map_err(runtime)?;
    write_log(&a.common.out, &trainer.log)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<(String, Image)>> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)
            .map_err(runtime)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Failure::Usage(format!("input not found: {}", input.display())));
    };
    files
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            Ok((stem, load_png(p).map_err(runtime)?))
        })
        .collect()
}

fn translate(a: &TranslateArgs) -> Result<()> {
    let config = resolve(&a.common, a.num_samples, a.sigma)?;
    let ckpt = load_ckpt(&a.ckpt)?;
    let pipeline = TranslationPipeline::from_checkpoint(&ckpt).map_err(|e| Failure::Usage(e.to_string()))?;
    let inputs = input_images(&a.input)?;
    prepare_out(&a.common.out, &config)?;
    let stochastic = a.num_samples.is_some() || a.sigma.is_some();
    for (name, im) in &inputs {
        save_png(&pipeline.translate_image(im).map_err(runtime)?, &a.common.out.join(format!("{name}.png")))
            .map_err(runtime)?;
        if stochastic {
            let samples = pipeline
                .translate_image_stochastic(im, config.eval.num_samples, config.eval.sigma, config.train.seed)
                .map_err(runtime)?;
            for (k, s) in samples.iter().enumerate() {
                save_png(s, &a.common.out.join(format!("{name}_sample{k}.png"))).map_err(runtime)?;
            }
        }
    }
    eprintln!("translated {} images into {}", inputs.len(), a.common.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let config = resolve(&a.common, None, None)?;
    let ckpt = load_ckpt(&a.ckpt)?;
    let pipeline = TranslationPipeline::from_checkpoint(&ckpt).map_err(|e| Failure::Usage(e.to_string()))?;
    let test = match &a.data {
        Some(dir) => {
            let bundle = load_data(dir)?;
            let labels = bundle
                .labels
                .clone()
                .ok_or_else(|| Failure::Usage(format!("dataset {} has no labels", dir.display())))?;
            TestSet {
                images: bundle.domain1_images(),
                labels,
            }
        }
        None => {
            let d = &config.data;
            TestSet::generate(
                config.eval.test_images,
                d.height,
                d.width,
                d.num_classes,
                derive_seed(d.seed, "held-out", 0),
            )
            .map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    prepare_out(&a.common.out, &config)?;
    let report = evaluate_pipeline(&pipeline, &test)
        .map_err(runtime)?
        .with_run(config.train.seed, config.hash());
    let path = a.report.clone().unwrap_or_else(|| a.common.out.join("metrics.json"));
    write(&path, &report.to_json())?;
    println!(
        "per_pixel_acc {:.4} per_class_acc {:.4} class_iou {:.4}",
        report.per_pixel_acc, report.per_class_acc, report.class_iou
    );
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let mut config = resolve(&a.common, None, None)?;
    if let Some(s) = a.common.seed {
        config.ablation.seeds = vec![s];
    }
    prepare_out(&a.common.out, &config)?;
    let spec = config.ablation_spec();
    let mut cache = AblationCache::default();
    let report = run_ablation_with(&spec, &mut cache, &mut |line| eprintln!("{line}")).map_err(|e| match e {
        eval::EvalError::Spec(_) => Failure::Usage(e.to_string()),
        other => runtime(other),
    })?;
    let csv = a.report.clone().unwrap_or_else(|| a.common.out.join("ablation.csv"));
    write(&csv, &report.to_csv())?;
    write(&a.common.out.join("ablation_summary.json"), &report.summary_json())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::TrainVaegan(a) => train_vaegan(a),
        Command::TrainTranslator(a) => train_translator(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
