//! Translation with frozen networks: `x2 = G2(T(E1(x1) + eta))`.

use crate::data::Image;
use crate::nets::{self, ArchDescriptor, LatentCode, ModelParams, NetError};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::train::{Checkpoint, CheckpointError, Stage};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("pipeline latent shapes disagree: {0}")]
    LatentMismatch(String),
    #[error("input is {found:?} but the pipeline expects {expected:?}")]
    InputShape {
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("num_samples must be >= 1")]
    NoSamples,
    #[error("sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("expected a translator checkpoint, found {0:?}")]
    WrongStage(Stage),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;

/// `E1`, `T` and `G2` plus the latent shape they agree on.
#[derive(Clone, Debug)]
pub struct TranslationPipeline {
    pub encoder1: ModelParams,
    pub translator: ModelParams,
    pub decoder2: ModelParams,
    latent_channels: usize,
    downsample: usize,
    /// Fixed input size, only for fully connected translators.
    input_hw: Option<[usize; 2]>,
}

impl TranslationPipeline {
    pub fn new(encoder1: ModelParams, translator: ModelParams, decoder2: ModelParams) -> Result<Self> {
        let mismatch = |m: String| Err(InferError::LatentMismatch(m));
        let (stages, c_e) = match &encoder1.arch {
            ArchDescriptor::Encoder {
                widths,
                latent_channels,
            } => (widths.len(), *latent_channels),
            other => return mismatch(format!("E1 is a {}", other.kind())),
        };
        let (dec_stages, c_g) = match &decoder2.arch {
            ArchDescriptor::Decoder {
                widths,
                latent_channels,
            } => (widths.len(), *latent_channels),
            other => return mismatch(format!("G2 is a {}", other.kind())),
        };
        let downsample = 1 << stages;
        let (c_t, input_hw) = match &translator.arch {
            ArchDescriptor::TranslatorResblocks { channels, .. } => (*channels, None),
            ArchDescriptor::TranslatorFc {
                latent_channels,
                latent_height,
                latent_width,
                ..
            } => (
                *latent_channels,
                Some([latent_height * downsample, latent_width * downsample]),
            ),
            other => return mismatch(format!("T is a {}", other.kind())),
        };
        if c_e != c_t || c_t != c_g || stages != dec_stages {
            return mismatch(format!(
                "E1 emits {c_e} channels over {stages} stages, T maps {c_t}, \
                 G2 takes {c_g} over {dec_stages} stages"
            ));
        }
        Ok(Self {
            encoder1,
            translator,
            decoder2,
            latent_channels: c_e,
            downsample,
            input_hw,
        })
    }

    /// Builds the pipeline from a translator checkpoint, which embeds the
    /// frozen stage-one networks.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Translator {
            return Err(InferError::WrongStage(ckpt.stage));
        }
        Self::new(
            ckpt.net("frozen.encoder1")?.clone(),
            ckpt.net("translator")?.clone(),
            ckpt.net("frozen.decoder2")?.clone(),
        )
    }

    /// Latent shape `[C, h, w]` for an `height x width` input.
    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        [
            self.latent_channels,
            height / self.downsample,
            width / self.downsample,
        ]
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        let found = [x.height(), x.width()];
        if let Some(expected) = self.input_hw {
            if expected != found {
                return Err(InferError::InputShape { expected, found });
            }
        }
        Ok(())
    }

    fn encode(&self, x: &Image) -> Result<LatentCode> {
        self.check_input(x)?;
        Ok(nets::encode(&self.encoder1, x)?)
    }

    fn finish(&self, z: &LatentCode) -> Result<Image> {
        let z_hat = nets::translate_features(&self.translator, z)?;
        Ok(nets::decode(&self.decoder2, &z_hat)?)
    }

    /// `G2(T(E1(x1)))` through the posterior mean.
    pub fn translate_image(&self, x1: &Image) -> Result<Image> {
        self.finish(&self.encode(x1)?)
    }

    /// Translates a batch of equally sized images in one pass per network.
    pub fn translate_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            for x in chunk {
                self.check_input(x)?;
            }
            let x: Tensor<f32> = Image::batch(chunk);
            let z = nets::encode_tensor(&self.encoder1, &x)?;
            let y = nets::decode_tensor(&self.decoder2, &nets::translate_tensor(&self.translator, &z)?)?;
            for i in 0..chunk.len() {
                out.push(Image::from_tensor_item(&y, i).expect("decoder emits images"));
            }
        }
        Ok(out)
    }

    /// `num_samples` outputs `G2(T(E1(x1) + eta_k))` with
    /// `eta_k ~ N(0, sigma^2 I)`. Sample `k` depends only on `(seed, k)`.
    pub fn translate_image_stochastic(
        &self,
        x1: &Image,
        num_samples: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Vec<Image>> {
        if num_samples == 0 {
            return Err(InferError::NoSamples);
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(InferError::BadSigma(sigma));
        }
        let mean = self.encode(x1)?;
        (0..num_samples)
            .map(|k| {
                let z = nets::sample_latent(&mean, derive_seed(seed, "eta", k as u64), sigma as f32);
                self.finish(&z)
            })
            .collect()
    }

    pub fn checksum(&self) -> [u64; 3] {
        [
            self.encoder1.checksum(),
            self.translator.checksum(),
            self.decoder2.checksum(),
        ]
    }
}
