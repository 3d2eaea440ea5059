//! Two-stage training.
//!
//! Stage one fits an encoder/decoder/discriminator per domain on that
//! domain's images only. Stage two freezes the encoders and the target
//! decoder and fits the feature translator (and its discriminator) on the
//! paired subset. [`ImageBaselineTrainer`] is the image-level supervised
//! comparison model: the same backbone trained directly on pairs.

mod checkpoint;

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, PairedSample};
use crate::graph::Graph;
use crate::losses::{self, LossBreakdown, LossError, LossWeights, Net, TranslationMode};
use crate::nets::{self, defaults, ArchDescriptor, ModelParams, NetError};
use crate::optim::{collect, Adam, AdamConfig, ADAM_EPSILON};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, RngState, CHECKPOINT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training data")]
    EmptyData,
    #[error("training images have inconsistent sizes")]
    InconsistentSizes,
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },
    #[error("incompatible latent shapes: {0}")]
    IncompatibleLatents(String),
    #[error("frozen network {0} changed during training")]
    FrozenMutated(String),
    #[error("checkpoint has stage {found:?}, expected {expected}")]
    WrongStage { found: Stage, expected: &'static str },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    VaeganDomain1,
    VaeganDomain2,
    Translator,
    ImageBaseline,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VaeganDomain1 => "vaegan_domain1",
            Self::VaeganDomain2 => "vaegan_domain2",
            Self::Translator => "translator",
            Self::ImageBaseline => "image_baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorKind {
    Resblocks,
    Fc,
}

/// Network widths shared by both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder stage widths; the decoder mirrors them and the image
    /// discriminator reuses them.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
    pub disc_scales: usize,
    pub translator: TranslatorKind,
    pub translator_blocks: usize,
    /// Width inside each translator residual branch.
    pub translator_hidden: usize,
    pub fc_hidden: usize,
    pub fc_layers: usize,
    pub latent_disc_widths: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: defaults::ENCODER_WIDTHS.to_vec(),
            latent_channels: defaults::LATENT_CHANNELS,
            disc_scales: defaults::DISCRIMINATOR_SCALES,
            translator: TranslatorKind::Resblocks,
            translator_blocks: defaults::TRANSLATOR_BLOCKS,
            translator_hidden: defaults::TRANSLATOR_HIDDEN,
            fc_hidden: 512,
            fc_layers: defaults::FC_LAYERS,
            latent_disc_widths: vec![64, 64],
        }
    }
}

impl ArchConfig {
    pub fn encoder(&self) -> ArchDescriptor {
        defaults::encoder(&self.widths, self.latent_channels)
    }

    pub fn decoder(&self) -> ArchDescriptor {
        defaults::decoder(&self.widths, self.latent_channels)
    }

    pub fn discriminator(&self) -> ArchDescriptor {
        defaults::discriminator(&self.widths, self.disc_scales)
    }

    /// Translator descriptor for a latent of spatial size `h x w`.
    pub fn translator(&self, h: usize, w: usize) -> ArchDescriptor {
        match self.translator {
            TranslatorKind::Resblocks => defaults::translator(self.latent_channels, self.translator_hidden, self.translator_blocks),
            TranslatorKind::Fc => ArchDescriptor::TranslatorFc {
                latent_channels: self.latent_channels,
                latent_height: h,
                latent_width: w,
                hidden: self.fc_hidden,
                layers: self.fc_layers,
            },
        }
    }

    pub fn latent_discriminator(&self) -> ArchDescriptor {
        defaults::latent_discriminator(self.latent_channels, &self.latent_disc_widths)
    }

    /// Spatial downsampling factor of the encoder.
    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }
}

/// Optimization settings for both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_vaegan: usize,
    pub epochs_translator: usize,
    pub lambda_f: f64,
    pub lambda_fm: f64,
    pub lambda_kl: f64,
    /// Weight of the pixel L1 term in the image-level baseline.
    pub lambda_img: f64,
    /// Standard deviation of the reparameterization noise during stage one.
    pub latent_sigma: f64,
    pub seed: u64,
    pub mode: TranslationMode,
    /// Optional cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            epochs_vaegan: 20,
            epochs_translator: 40,
            lambda_f: 60.0,
            lambda_fm: 10.0,
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_img: 1.0,
            latent_sigma: 1.0,
            seed: 0,
            mode: TranslationMode::Full,
            max_steps: None,
            arch: ArchConfig::default(),
        }
    }
}

/// Default KL weight. Reconstruction is a per-element mean, so a weight of
/// about `1 / (3 * H * W)` keeps the KL term on the scale it would have
/// against a summed reconstruction error; a weight of 1 collapses the
/// posterior under unit-variance sampling noise.
pub const DEFAULT_LAMBDA_KL: f64 = 1e-4;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_fm", self.lambda_fm),
            ("lambda_kl", self.lambda_kl),
            ("lambda_img", self.lambda_img),
            ("latent_sigma", self.latent_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1 when set");
        }
        if self.arch.widths.is_empty() || self.arch.latent_channels == 0 {
            return bad("arch widths and latent_channels must be non-empty");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_kl: self.lambda_kl,
            lambda_f: self.lambda_f,
            lambda_fm: self.lambda_fm,
        }
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub terms: IndexMap<String, f64>,
    pub total_g: f64,
    pub total_d: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

#[derive(Default)]
struct EpochAccumulator {
    terms: IndexMap<String, f64>,
    total_g: f64,
    total_d: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown) {
        for (k, v) in &b.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += v;
        }
        self.total_g += b.total_g;
        self.total_d += b.total_d;
        self.steps += 1;
    }

    fn finish(self, epoch: usize, stage: Stage, started: Instant) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            stage,
            terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total_g: self.total_g / n,
            total_d: self.total_d / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn guard(b: &LossBreakdown, step: usize) -> Result<()> {
    match b.non_finite_term() {
        Some(term) => Err(TrainError::NonFinite { term, step }),
        None => Ok(()),
    }
}

fn check_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<(usize, usize)> {
    let mut dims = None;
    for im in images {
        let d = (im.height(), im.width());
        if dims.is_some_and(|x| x != d) {
            return Err(TrainError::InconsistentSizes);
        }
        dims = Some(d);
    }
    dims.ok_or(TrainError::EmptyData)
}

/// Epoch permutation, a pure function of `(seed, stage, epoch)`.
fn epoch_order(seed: u64, stage: Stage, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stage.as_str(), epoch as u64));
    order
}

fn domain_index(stage: Stage) -> u64 {
    match stage {
        Stage::VaeganDomain1 => 1,
        Stage::VaeganDomain2 => 2,
        Stage::Translator => 3,
        Stage::ImageBaseline => 4,
    }
}

fn init_net(arch: ArchDescriptor, seed: u64, role: &str, stage: Stage) -> Result<ModelParams> {
    Ok(ModelParams::init(
        arch,
        derive_seed(seed, role, domain_index(stage)),
    )?)
}

fn limit_reached(config: &TrainConfig, step: usize) -> bool {
    config.max_steps.is_some_and(|m| step >= m)
}

/// Stage-one trainer for one domain.
pub struct VaeganTrainer {
    pub config: TrainConfig,
    pub stage: Stage,
    pub encoder: ModelParams,
    pub decoder: ModelParams,
    pub discriminator: ModelParams,
    opt_e: Adam,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<EpochLog>,
    perceptual: ModelParams,
}

impl VaeganTrainer {
    pub fn new(config: TrainConfig, stage: Stage) -> Result<Self> {
        config.validate()?;
        if !matches!(stage, Stage::VaeganDomain1 | Stage::VaeganDomain2) {
            return Err(TrainError::WrongStage {
                found: stage,
                expected: "vaegan_domain1 or vaegan_domain2",
            });
        }
        let s = config.seed;
        let encoder = init_net(config.arch.encoder(), s, "encoder", stage)?;
        let decoder = init_net(config.arch.decoder(), s, "decoder", stage)?;
        let discriminator = init_net(config.arch.discriminator(), s, "discriminator", stage)?;
        let adam = config.adam();
        Ok(Self {
            opt_e: Adam::new(adam, &encoder),
            opt_g: Adam::new(adam, &decoder),
            opt_d: Adam::new(adam, &discriminator),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(s, "vaegan-noise", domain_index(stage))),
            encoder,
            decoder,
            discriminator,
            config,
            stage,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            perceptual: nets::perceptual::params(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !matches!(ckpt.stage, Stage::VaeganDomain1 | Stage::VaeganDomain2) {
            return Err(TrainError::WrongStage {
                found: ckpt.stage,
                expected: "vaegan_domain1 or vaegan_domain2",
            });
        }
        let net = |role: &str| ckpt.net(role).cloned();
        let opt = |role: &str| ckpt.optimizer(role).cloned();
        Ok(Self {
            config: ckpt.config.clone(),
            stage: ckpt.stage,
            encoder: net("encoder")?,
            decoder: net("decoder")?,
            discriminator: net("discriminator")?,
            opt_e: opt("encoder")?,
            opt_g: opt("decoder")?,
            opt_d: opt("discriminator")?,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            log: ckpt.log.clone(),
            perceptual: nets::perceptual::params(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            nets: [
                ("encoder", &self.encoder),
                ("decoder", &self.decoder),
                ("discriminator", &self.discriminator),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
            optimizers: [
                ("encoder", &self.opt_e),
                ("decoder", &self.opt_g),
                ("discriminator", &self.opt_d),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
            rng: RngState::capture(&self.rng),
            log: self.log.clone(),
        }
    }

    /// One discriminator update followed by one encoder/decoder update.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<LossBreakdown> {
        let shape = batch.shape();
        let down = self.config.arch.downsample();
        let latent = [
            shape[0],
            self.config.arch.latent_channels,
            shape[2] / down,
            shape[3] / down,
        ];
        let eps = nets::gaussian_tensor::<f32>(&latent, &mut self.rng);
        let weights = self.config.weights();
        let sigma = self.config.latent_sigma as f32;

        let mut g = Graph::new();
        let en = Net::bind(&mut g, &self.encoder, true);
        let gn = Net::bind(&mut g, &self.decoder, true);
        let x = g.constant(batch.clone());
        let (mean, x_bar) = losses::vaegan_reconstruct(&mut g, &en, &gn, x, &eps, sigma)?;

        // Discriminator step on the detached reconstruction.
        let gan_d = {
            let mut gd = Graph::new();
            let dn = Net::bind(&mut gd, &self.discriminator, true);
            let real = gd.constant(batch.clone());
            let fake = gd.constant(g.value(x_bar).clone());
            let loss = losses::discriminator_side(&mut gd, &dn, real, fake)?;
            let value = gd.scalar(loss) as f64;
            let mut grads = gd.backward(loss);
            let gdisc = collect(&mut grads, &dn.bound);
            self.opt_d.update(&mut self.discriminator, &gdisc);
            value
        };

        let dn = Net::bind(&mut g, &self.discriminator, false);
        let obj = losses::vaegan_generator_side(
            &mut g,
            &dn,
            &self.perceptual,
            x,
            mean,
            x_bar,
            &weights,
        )?;
        let mut terms = obj.values(&g);
        terms.insert("gan_d".into(), gan_d);
        let breakdown = LossBreakdown::from_terms(terms, weights, None);
        guard(&breakdown, self.step)?;

        let mut grads = g.backward(obj.total);
        let ge = collect(&mut grads, &en.bound);
        let gg = collect(&mut grads, &gn.bound);
        self.opt_e.update(&mut self.encoder, &ge);
        self.opt_g.update(&mut self.decoder, &gg);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs_vaegan || limit_reached(&self.config, self.step)
    }

    /// Runs one epoch (or until the step cap) and records its log line.
    pub fn run_epoch(&mut self, images: &[Image]) -> Result<EpochLog> {
        check_images(images)?;
        let started = Instant::now();
        let order = epoch_order(self.config.seed, self.stage, self.epoch, images.len());
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(self.config.batch_size) {
            if limit_reached(&self.config, self.step) {
                break;
            }
            let batch = Image::batch(chunk.iter().map(|&i| &images[i]));
            acc.add(&self.train_step(&batch)?);
        }
        let log = acc.finish(self.epoch, self.stage, started);
        self.epoch += 1;
        self.log.push(log.clone());
        Ok(log)
    }

    /// Mean absolute reconstruction error through the posterior mean.
    pub fn reconstruction_error(&self, images: &[Image]) -> Result<f64> {
        reconstruction_error(&self.encoder, &self.decoder, images)
    }
}

/// `mean |G(E(x)) - x|` over `images`, using the posterior mean.
pub fn reconstruction_error(e: &ModelParams, g: &ModelParams, images: &[Image]) -> Result<f64> {
    check_images(images)?;
    let mut total = 0.0;
    for chunk in images.chunks(32) {
        let x = Image::batch(chunk);
        let y = nets::decode_tensor(g, &nets::encode_tensor(e, &x)?)?;
        total += losses::reconstruction_loss(&x, &y)? as f64 * chunk.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains one domain's VAE-GAN to completion.
pub fn train_vaegan(images: &[Image], config: &TrainConfig, stage: Stage) -> Result<Checkpoint> {
    check_images(images)?;
    let mut trainer = VaeganTrainer::new(config.clone(), stage)?;
    while !trainer.finished() {
        trainer.run_epoch(images)?;
    }
    Ok(trainer.checkpoint())
}

/// The frozen stage-one networks the translator sees.
#[derive(Clone, Debug)]
pub struct FrozenNets {
    pub encoder1: ModelParams,
    pub encoder2: ModelParams,
    pub decoder2: ModelParams,
}

impl FrozenNets {
    pub fn from_checkpoints(ckpt1: &Checkpoint, ckpt2: &Checkpoint) -> Result<Self> {
        for (c, want) in [(ckpt1, Stage::VaeganDomain1), (ckpt2, Stage::VaeganDomain2)] {
            if !matches!(c.stage, Stage::VaeganDomain1 | Stage::VaeganDomain2) {
                return Err(TrainError::WrongStage {
                    found: c.stage,
                    expected: want.as_str(),
                });
            }
        }
        let frozen = Self {
            encoder1: ckpt1.net("encoder")?.clone(),
            encoder2: ckpt2.net("encoder")?.clone(),
            decoder2: ckpt2.net("decoder")?.clone(),
        };
        frozen.check_latents()?;
        Ok(frozen)
    }

    fn check_latents(&self) -> Result<()> {
        let enc = |a: &ArchDescriptor| match a {
            ArchDescriptor::Encoder {
                widths,
                latent_channels,
            } => Some((widths.len(), *latent_channels)),
            _ => None,
        };
        let (Some(a), Some(b)) = (enc(&self.encoder1.arch), enc(&self.encoder2.arch)) else {
            return Err(TrainError::IncompatibleLatents("stage-one encoders missing".into()));
        };
        let dec = match &self.decoder2.arch {
            ArchDescriptor::Decoder {
                widths,
                latent_channels,
            } => (widths.len(), *latent_channels),
            _ => return Err(TrainError::IncompatibleLatents("decoder2 missing".into())),
        };
        if a != b || b != dec {
            return Err(TrainError::IncompatibleLatents(format!(
                "encoder1 (stages, channels) {a:?}, encoder2 {b:?}, decoder2 {dec:?}"
            )));
        }
        Ok(())
    }

    fn checksums(&self) -> [u64; 3] {
        [
            self.encoder1.checksum(),
            self.encoder2.checksum(),
            self.decoder2.checksum(),
        ]
    }
}

/// Stage-two trainer: only the translator and its discriminator update.
pub struct TranslatorTrainer {
    pub config: TrainConfig,
    pub translator: ModelParams,
    pub discriminator: Option<ModelParams>,
    opt_t: Adam,
    opt_d: Option<Adam>,
    pub frozen: FrozenNets,
    frozen_sums: [u64; 3],
    rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<EpochLog>,
    perceptual: ModelParams,
}

/// Per-pair cached features `z1 = E1(p1)`, `z2 = E2(p2)` and the target image.
pub struct PairFeatures {
    pub z1: Vec<Tensor<f32>>,
    pub z2: Vec<Tensor<f32>>,
    pub p2: Vec<Image>,
}

impl PairFeatures {
    pub fn compute(frozen: &FrozenNets, paired: &[PairedSample]) -> Result<Self> {
        let mut out = Self {
            z1: Vec::with_capacity(paired.len()),
            z2: Vec::with_capacity(paired.len()),
            p2: Vec::with_capacity(paired.len()),
        };
        for chunk in paired.chunks(32) {
            let a = Image::batch(chunk.iter().map(|p| &p.a));
            let b = Image::batch(chunk.iter().map(|p| &p.b));
            let z1 = nets::encode_tensor(&frozen.encoder1, &a)?;
            let z2 = nets::encode_tensor(&frozen.encoder2, &b)?;
            for i in 0..chunk.len() {
                let s = &z1.shape()[1..];
                out.z1.push(Tensor::from_vec(s, z1.item_slice(i).to_vec()));
                out.z2.push(Tensor::from_vec(s, z2.item_slice(i).to_vec()));
            }
            out.p2.extend(chunk.iter().map(|p| p.b.clone()));
        }
        Ok(out)
    }

    fn len(&self) -> usize {
        self.z1.len()
    }
}

impl TranslatorTrainer {
    pub fn new(config: TrainConfig, frozen: FrozenNets, latent_hw: (usize, usize)) -> Result<Self> {
        config.validate()?;
        frozen.check_latents()?;
        let s = config.seed;
        let stage = Stage::Translator;
        let translator = init_net(config.arch.translator(latent_hw.0, latent_hw.1), s, "translator", stage)?;
        let discriminator = match config.mode {
            TranslationMode::L1Only => None,
            TranslationMode::Full => Some(init_net(config.arch.discriminator(), s, "translation-disc", stage)?),
            TranslationMode::FeatAdv => Some(init_net(
                config.arch.latent_discriminator(),
                s,
                "translation-disc",
                stage,
            )?),
        };
        let adam = config.adam();
        Ok(Self {
            opt_t: Adam::new(adam, &translator),
            opt_d: discriminator.as_ref().map(|d| Adam::new(adam, d)),
            frozen_sums: frozen.checksums(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(s, "translator-noise", 0)),
            translator,
            discriminator,
            frozen,
            config,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            perceptual: nets::perceptual::params(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Translator {
            return Err(TrainError::WrongStage {
                found: ckpt.stage,
                expected: "translator",
            });
        }
        let frozen = FrozenNets {
            encoder1: ckpt.net("frozen.encoder1")?.clone(),
            encoder2: ckpt.net("frozen.encoder2")?.clone(),
            decoder2: ckpt.net("frozen.decoder2")?.clone(),
        };
        Ok(Self {
            config: ckpt.config.clone(),
            translator: ckpt.net("translator")?.clone(),
            discriminator: ckpt.nets.get("translation_discriminator").cloned(),
            opt_t: ckpt.optimizer("translator")?.clone(),
            opt_d: ckpt.optimizers.get("translation_discriminator").cloned(),
            frozen_sums: frozen.checksums(),
            frozen,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            log: ckpt.log.clone(),
            perceptual: nets::perceptual::params(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut nets: IndexMap<String, ModelParams> = IndexMap::new();
        nets.insert("translator".into(), self.translator.clone());
        if let Some(d) = &self.discriminator {
            nets.insert("translation_discriminator".into(), d.clone());
        }
        nets.insert("frozen.encoder1".into(), self.frozen.encoder1.clone());
        nets.insert("frozen.encoder2".into(), self.frozen.encoder2.clone());
        nets.insert("frozen.decoder2".into(), self.frozen.decoder2.clone());
        let mut optimizers = IndexMap::new();
        optimizers.insert("translator".into(), self.opt_t.clone());
        if let Some(o) = &self.opt_d {
            optimizers.insert("translation_discriminator".into(), o.clone());
        }
        Checkpoint {
            stage: Stage::Translator,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            nets,
            optimizers,
            rng: RngState::capture(&self.rng),
            log: self.log.clone(),
        }
    }

    pub fn train_step(
        &mut self,
        z1: &Tensor<f32>,
        z2: &Tensor<f32>,
        p2: &Tensor<f32>,
    ) -> Result<LossBreakdown> {
        let mode = self.config.mode;
        let weights = self.config.weights();
        let mut g = Graph::new();
        let tn = Net::bind(&mut g, &self.translator, true);
        let g2 = Net::bind(&mut g, &self.frozen.decoder2, false);
        let z1v = g.constant(z1.clone());
        let z2v = g.constant(z2.clone());
        let p2v = g.constant(p2.clone());
        let (z_hat, p2_bar) = losses::translate_forward(&mut g, mode, &tn, &g2, z1v)?;

        let mut gan_d = None;
        if let (Some(d), Some(opt)) = (self.discriminator.as_mut(), self.opt_d.as_mut()) {
            let mut gd = Graph::new();
            let dn = Net::bind(&mut gd, d, true);
            let (real, fake) = match mode {
                TranslationMode::Full => (
                    gd.constant(p2.clone()),
                    gd.constant(g.value(p2_bar.expect("full mode decodes")).clone()),
                ),
                _ => (gd.constant(z2.clone()), gd.constant(g.value(z_hat).clone())),
            };
            let loss = losses::discriminator_side(&mut gd, &dn, real, fake)?;
            gan_d = Some(gd.scalar(loss) as f64);
            let mut grads = gd.backward(loss);
            let gdisc = collect(&mut grads, &dn.bound);
            opt.update(d, &gdisc);
        }

        let dn = self
            .discriminator
            .as_ref()
            .map(|d| Net::bind(&mut g, d, false));
        let obj = losses::translation_generator_side(
            &mut g,
            mode,
            dn.as_ref(),
            &self.perceptual,
            z_hat,
            p2_bar,
            z2v,
            p2v,
            &weights,
        )?;
        let mut terms = obj.values(&g);
        if let Some(v) = gan_d {
            terms.insert("gan_d".into(), v);
        }
        let breakdown = LossBreakdown::from_terms(terms, weights, Some(mode));
        guard(&breakdown, self.step)?;
        let mut grads = g.backward(obj.total);
        let gt = collect(&mut grads, &tn.bound);
        self.opt_t.update(&mut self.translator, &gt);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs_translator || limit_reached(&self.config, self.step)
    }

    pub fn run_epoch(&mut self, feats: &PairFeatures) -> Result<EpochLog> {
        if feats.len() == 0 {
            return Err(TrainError::EmptyData);
        }
        let started = Instant::now();
        let order = epoch_order(self.config.seed, Stage::Translator, self.epoch, feats.len());
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(self.config.batch_size) {
            if limit_reached(&self.config, self.step) {
                break;
            }
            let z1 = Tensor::stack(&chunk.iter().map(|&i| feats.z1[i].clone()).collect::<Vec<_>>());
            let z2 = Tensor::stack(&chunk.iter().map(|&i| feats.z2[i].clone()).collect::<Vec<_>>());
            let p2 = Image::batch(chunk.iter().map(|&i| &feats.p2[i]));
            acc.add(&self.train_step(&z1, &z2, &p2)?);
        }
        self.verify_frozen()?;
        let log = acc.finish(self.epoch, Stage::Translator, started);
        self.epoch += 1;
        self.log.push(log.clone());
        Ok(log)
    }

    /// Mean feature L1 of the current translator over the given pairs.
    pub fn feature_l1(&self, feats: &PairFeatures) -> Result<f64> {
        let mut total = 0.0;
        for (z1, z2) in feats.z1.iter().zip(&feats.z2) {
            let s = z1.shape();
            let z1 = z1.clone().reshape(&[1, s[0], s[1], s[2]]);
            let z2 = z2.clone().reshape(&[1, s[0], s[1], s[2]]);
            let z_hat = nets::translate_tensor(&self.translator, &z1)?;
            total += losses::feature_l1_loss(&z_hat, &z2)? as f64;
        }
        Ok(total / feats.len().max(1) as f64)
    }

    fn verify_frozen(&self) -> Result<()> {
        let now = self.frozen.checksums();
        for (name, (a, b)) in ["encoder1", "encoder2", "decoder2"]
            .iter()
            .zip(now.iter().zip(&self.frozen_sums))
        {
            if a != b {
                return Err(TrainError::FrozenMutated(name.to_string()));
            }
        }
        Ok(())
    }
}

fn latent_hw(ckpt: &Checkpoint, paired: &[PairedSample]) -> Result<(usize, usize)> {
    let (h, w) = check_images(paired.iter().map(|p| &p.a))?;
    let down = ckpt.config.arch.downsample();
    Ok((h / down, w / down))
}

/// Trains the feature translator on `paired` with both stage-one models
/// frozen.
pub fn train_translator(
    ckpt1: &Checkpoint,
    ckpt2: &Checkpoint,
    paired: &[PairedSample],
    config: &TrainConfig,
) -> Result<Checkpoint> {
    if paired.is_empty() {
        return Err(TrainError::EmptyData);
    }
    check_images(paired.iter().flat_map(|p| [&p.a, &p.b]))?;
    let frozen = FrozenNets::from_checkpoints(ckpt1, ckpt2)?;
    let feats = PairFeatures::compute(&frozen, paired)?;
    let mut trainer = TranslatorTrainer::new(config.clone(), frozen, latent_hw(ckpt1, paired)?)?;
    while !trainer.finished() {
        trainer.run_epoch(&feats)?;
    }
    Ok(trainer.checkpoint())
}

/// Image-level supervised baseline: encoder and decoder trained end to end
/// on pairs with LSGAN, feature matching and pixel L1.
pub struct ImageBaselineTrainer {
    pub config: TrainConfig,
    pub encoder: ModelParams,
    pub decoder: ModelParams,
    pub discriminator: ModelParams,
    opt_e: Adam,
    opt_g: Adam,
    opt_d: Adam,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<EpochLog>,
    perceptual: ModelParams,
}

impl ImageBaselineTrainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let stage = Stage::ImageBaseline;
        let encoder = init_net(config.arch.encoder(), s, "encoder", stage)?;
        let decoder = init_net(config.arch.decoder(), s, "decoder", stage)?;
        let discriminator = init_net(config.arch.discriminator(), s, "discriminator", stage)?;
        let adam = config.adam();
        Ok(Self {
            opt_e: Adam::new(adam, &encoder),
            opt_g: Adam::new(adam, &decoder),
            opt_d: Adam::new(adam, &discriminator),
            encoder,
            decoder,
            discriminator,
            config,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            perceptual: nets::perceptual::params(),
        })
    }

    pub fn train_step(&mut self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<LossBreakdown> {
        let weights = LossWeights {
            lambda_kl: 0.0,
            ..self.config.weights()
        };
        let mut g = Graph::new();
        let en = Net::bind(&mut g, &self.encoder, true);
        let gn = Net::bind(&mut g, &self.decoder, true);
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let z = en.encode(&mut g, av)?;
        let out = gn.decode(&mut g, z)?;

        let gan_d = {
            let mut gd = Graph::new();
            let dn = Net::bind(&mut gd, &self.discriminator, true);
            let real = gd.constant(b.clone());
            let fake = gd.constant(g.value(out).clone());
            let loss = losses::discriminator_side(&mut gd, &dn, real, fake)?;
            let value = gd.scalar(loss) as f64;
            let mut grads = gd.backward(loss);
            let gdisc = collect(&mut grads, &dn.bound);
            self.opt_d.update(&mut self.discriminator, &gdisc);
            value
        };

        let dn = Net::bind(&mut g, &self.discriminator, false);
        let fake = dn.discriminate(&mut g, out)?;
        let real = dn.discriminate(&mut g, bv)?;
        let gan_g = losses::terms::lsgan_g(&mut g, &fake.scores);
        let fm_gan = losses::terms::feature_matching(&mut g, &real.feats, &fake.feats)?;
        let pr = nets::perceptual::forward(&mut g, &self.perceptual, bv);
        let pf = nets::perceptual::forward(&mut g, &self.perceptual, out);
        let fm_perc = losses::terms::feature_matching(&mut g, &pr, &pf)?;
        let l1 = losses::terms::recon(&mut g, bv, out);
        let lfm = weights.lambda_fm as f32;
        let total = g.weighted_sum(&[
            (gan_g, 1.0),
            (fm_gan, lfm),
            (fm_perc, lfm),
            (l1, self.config.lambda_img as f32),
        ]);
        let mut terms: IndexMap<String, f64> = [
            ("recon", l1),
            ("gan_g", gan_g),
            ("fm_gan", fm_gan),
            ("fm_perc", fm_perc),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), g.scalar(v) as f64))
        .collect();
        terms.insert("gan_d".into(), gan_d);
        let mut breakdown = LossBreakdown::from_terms(terms, weights, None);
        breakdown.total_g = g.scalar(total) as f64;
        guard(&breakdown, self.step)?;
        let mut grads = g.backward(total);
        let ge = collect(&mut grads, &en.bound);
        let gg = collect(&mut grads, &gn.bound);
        self.opt_e.update(&mut self.encoder, &ge);
        self.opt_g.update(&mut self.decoder, &gg);
        self.step += 1;
        Ok(breakdown)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs_translator || limit_reached(&self.config, self.step)
    }

    pub fn run_epoch(&mut self, paired: &[PairedSample]) -> Result<EpochLog> {
        if paired.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let started = Instant::now();
        let order = epoch_order(self.config.seed, Stage::ImageBaseline, self.epoch, paired.len());
        let mut acc = EpochAccumulator::default();
        for chunk in order.chunks(self.config.batch_size) {
            if limit_reached(&self.config, self.step) {
                break;
            }
            let a = Image::batch(chunk.iter().map(|&i| &paired[i].a));
            let b = Image::batch(chunk.iter().map(|&i| &paired[i].b));
            acc.add(&self.train_step(&a, &b)?);
        }
        let log = acc.finish(self.epoch, Stage::ImageBaseline, started);
        self.epoch += 1;
        self.log.push(log.clone());
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: Stage::ImageBaseline,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            nets: [
                ("encoder", &self.encoder),
                ("decoder", &self.decoder),
                ("discriminator", &self.discriminator),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
            optimizers: [
                ("encoder", &self.opt_e),
                ("decoder", &self.opt_g),
                ("discriminator", &self.opt_d),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
            log: self.log.clone(),
        }
    }
}

/// Trains the image-level baseline on the paired subset only.
pub fn train_image_baseline(paired: &[PairedSample], config: &TrainConfig) -> Result<Checkpoint> {
    if paired.is_empty() {
        return Err(TrainError::EmptyData);
    }
    check_images(paired.iter().flat_map(|p| [&p.a, &p.b]))?;
    let mut trainer = ImageBaselineTrainer::new(config.clone())?;
    while !trainer.finished() {
        trainer.run_epoch(paired)?;
    }
    Ok(trainer.checkpoint())
}
