//! Encoder, decoder, discriminators, feature translators and the fixed
//! perceptual feature extractor.
//!
//! Every network has a graph-level forward (`*_forward`) used by training
//! and a value-level wrapper for inference. Activations are NCHW; latent
//! codes are spatial, `C x H/8 x W/8` with the default three stages.

mod params;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Image;
use crate::graph::{Graph, Var};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

pub use params::{ArchDescriptor, Bound, Init, ModelParams, ParamSpec, LEAKY_SLOPE};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
    #[error("expected a {expected} network, got {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for tensor {tensor}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

/// Default architecture widths.
pub mod defaults {
    use super::ArchDescriptor;

    pub const LATENT_CHANNELS: usize = 64;
    pub const ENCODER_WIDTHS: [usize; 3] = [32, 64, 128];
    pub const DISCRIMINATOR_SCALES: usize = 2;
    pub const TRANSLATOR_BLOCKS: usize = 9;
    pub const TRANSLATOR_HIDDEN: usize = 64;
    pub const FC_LAYERS: usize = 5;

    pub fn encoder(widths: &[usize], latent: usize) -> ArchDescriptor {
        ArchDescriptor::Encoder {
            widths: widths.to_vec(),
            latent_channels: latent,
        }
    }

    pub fn decoder(widths: &[usize], latent: usize) -> ArchDescriptor {
        ArchDescriptor::Decoder {
            latent_channels: latent,
            widths: widths.iter().rev().copied().collect(),
        }
    }

    pub fn discriminator(widths: &[usize], scales: usize) -> ArchDescriptor {
        ArchDescriptor::ImageDiscriminator {
            widths: widths.to_vec(),
            scales,
        }
    }

    pub fn translator(latent: usize, hidden: usize, blocks: usize) -> ArchDescriptor {
        ArchDescriptor::TranslatorResblocks {
            channels: latent,
            hidden,
            blocks,
        }
    }

    pub fn latent_discriminator(latent: usize, widths: &[usize]) -> ArchDescriptor {
        ArchDescriptor::TranslationDiscriminator {
            latent_channels: latent,
            widths: widths.to_vec(),
        }
    }
}

/// A spatial latent code, `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentCode {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(NetError::Architecture(format!(
                "latent data of length {} for shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn from_tensor_item<T: Real>(t: &Tensor<T>, i: usize) -> Self {
        let s = t.shape();
        Self {
            channels: s[1],
            height: s[2],
            width: s[3],
            data: t.item_slice(i).iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn batch<'a, T: Real>(codes: impl IntoIterator<Item = &'a LatentCode>) -> Tensor<T> {
        let mut data = Vec::new();
        let mut shape = None;
        let mut n = 0;
        for c in codes {
            assert!(shape.is_none_or(|s| s == c.shape()), "batch of mixed latent shapes");
            shape = Some(c.shape());
            data.extend(c.data.iter().map(|&v| T::lit(v as f64)));
            n += 1;
        }
        let s = shape.expect("batch of zero latents");
        Tensor::from_vec(&[n, s[0], s[1], s[2]], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn expect_kind(arch: &ArchDescriptor, kind: &'static str) -> Result<()> {
    if arch.kind() != kind {
        return Err(NetError::WrongKind {
            expected: kind,
            found: arch.kind(),
        });
    }
    Ok(())
}

fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let (w, b) = p.conv(name);
    g.conv2d(x, w, Some(b), stride, 1)
}

fn check_image_input(shape: &[usize], stages: usize, who: &str) -> Result<()> {
    let m = 1 << stages;
    if shape.len() != 4 || shape[1] != 3 || shape[2] == 0 || shape[2] % m != 0 || shape[3] % m != 0
    {
        return Err(NetError::Architecture(format!(
            "{who} expects [N, 3, H, W] with H, W multiples of {m}, got {shape:?}"
        )));
    }
    Ok(())
}

/// Encoder forward: returns the posterior mean.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let ArchDescriptor::Encoder { widths, .. } = arch else {
        return expect_kind(arch, "encoder").map(|_| unreachable!());
    };
    check_image_input(g.shape(x), widths.len(), "encoder")?;
    let mut h = x;
    for i in 0..widths.len() {
        h = conv(g, p, &format!("down{i}"), h, 2);
        h = lrelu(g, h);
    }
    Ok(conv(g, p, "mean", h, 1))
}

pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    p: &Bound,
    z: Var,
) -> Result<Var> {
    let ArchDescriptor::Decoder {
        latent_channels,
        widths,
    } = arch
    else {
        return expect_kind(arch, "decoder").map(|_| unreachable!());
    };
    let s = g.shape(z);
    if s.len() != 4 || s[1] != *latent_channels {
        return Err(NetError::Architecture(format!(
            "decoder expects [N, {latent_channels}, h, w], got {s:?}"
        )));
    }
    let mut h = conv(g, p, "stem", z, 1);
    h = lrelu(g, h);
    for i in 1..widths.len() {
        h = g.upsample2(h);
        h = conv(g, p, &format!("up{i}"), h, 1);
        h = lrelu(g, h);
    }
    h = g.upsample2(h);
    h = conv(g, p, "rgb", h, 1);
    Ok(g.tanh(h))
}

/// Patch scores per scale plus every tapped activation.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub scores: Vec<Var>,
    pub feats: Vec<Var>,
}

pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    p: &Bound,
    x: Var,
) -> Result<DiscOutput> {
    let ArchDescriptor::ImageDiscriminator { widths, scales } = arch else {
        return expect_kind(arch, "image_discriminator").map(|_| unreachable!());
    };
    check_image_input(g.shape(x), scales - 1, "discriminator")?;
    let mut out = DiscOutput {
        scores: Vec::with_capacity(*scales),
        feats: Vec::with_capacity(scales * widths.len()),
    };
    let mut input = x;
    for s in 0..*scales {
        if s > 0 {
            input = g.avgpool2(input);
        }
        let mut h = input;
        for i in 0..widths.len() {
            h = conv(g, p, &format!("scale{s}.conv{i}"), h, 2);
            h = lrelu(g, h);
            out.feats.push(h);
        }
        out.scores.push(conv(g, p, &format!("scale{s}.score"), h, 1));
    }
    Ok(out)
}

/// Latent-code discriminator used by the feature-space adversarial mode.
pub fn latent_discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    p: &Bound,
    z: Var,
) -> Result<DiscOutput> {
    let ArchDescriptor::TranslationDiscriminator {
        latent_channels,
        widths,
    } = arch
    else {
        return expect_kind(arch, "translation_discriminator").map(|_| unreachable!());
    };
    let s = g.shape(z);
    if s.len() != 4 || s[1] != *latent_channels {
        return Err(NetError::Architecture(format!(
            "latent discriminator expects [N, {latent_channels}, h, w], got {s:?}"
        )));
    }
    let mut feats = Vec::new();
    let mut h = z;
    for i in 0..widths.len() {
        h = conv(g, p, &format!("conv{i}"), h, 1);
        h = lrelu(g, h);
        feats.push(h);
    }
    let score = conv(g, p, "score", h, 1);
    Ok(DiscOutput {
        scores: vec![score],
        feats,
    })
}

/// Translator forward, output shape equals input shape.
pub fn translator_forward<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchDescriptor,
    p: &Bound,
    z: Var,
) -> Result<Var> {
    let s = g.shape(z).to_vec();
    match arch {
        ArchDescriptor::TranslatorResblocks {
            channels, blocks, ..
        } => {
            if s.len() != 4 || s[1] != *channels {
                return Err(NetError::Architecture(format!(
                    "translator expects [N, {channels}, h, w], got {s:?}"
                )));
            }
            let mut h = z;
            for b in 0..*blocks {
                let r = conv(g, p, &format!("block{b}.conv0"), h, 1);
                let r = lrelu(g, r);
                let r = conv(g, p, &format!("block{b}.conv1"), r, 1);
                h = g.add(h, r);
            }
            Ok(h)
        }
        ArchDescriptor::TranslatorFc {
            latent_channels,
            latent_height,
            latent_width,
            layers,
            ..
        } => {
            if s.len() != 4 || s[1..] != [*latent_channels, *latent_height, *latent_width] {
                return Err(NetError::Architecture(format!(
                    "fc translator expects [N, {latent_channels}, {latent_height}, {latent_width}], got {s:?}"
                )));
            }
            let dim = latent_channels * latent_height * latent_width;
            let flat = g.reshape(z, &[s[0], dim]);
            let mut h = flat;
            for l in 0..*layers {
                let w = p.get(&format!("fc{l}.weight"));
                let b = p.get(&format!("fc{l}.bias"));
                h = g.linear(h, w, Some(b));
                if l + 1 < *layers {
                    h = lrelu(g, h);
                }
            }
            let h = g.add(flat, h);
            Ok(g.reshape(h, &s))
        }
        other => Err(NetError::WrongKind {
            expected: "translator_resblocks",
            found: other.kind(),
        }),
    }
}

/// Fixed random-weight conv stack standing in for a pretrained perceptual
/// network: four stride-2 stages, never trained.
pub mod perceptual {
    use super::*;

    pub const SEED: u64 = 0x7E7C_E97A;
    pub const WIDTHS: [usize; 4] = [8, 16, 32, 32];

    pub fn arch() -> ArchDescriptor {
        ArchDescriptor::TranslationDiscriminator {
            latent_channels: 3,
            widths: WIDTHS.to_vec(),
        }
    }

    /// The extractor's weights in the requested precision.
    pub fn params<T: Real>() -> ModelParams<T> {
        ModelParams::<f64>::init(arch(), SEED)
            .expect("perceptual descriptor is valid")
            .cast()
    }

    /// One feature tensor per stage. Gradients flow to `x` only.
    pub fn forward<T: Real>(g: &mut Graph<T>, weights: &ModelParams<T>, x: Var) -> Vec<Var> {
        let p = weights.bind(g, false);
        let mut h = x;
        let mut feats = Vec::with_capacity(WIDTHS.len());
        for i in 0..WIDTHS.len() {
            let (w, b) = p.conv(&format!("conv{i}"));
            h = g.conv2d(h, w, Some(b), 2, 1);
            h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            feats.push(h);
        }
        feats
    }
}

/// Ordered list of intermediate activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub levels: Vec<Tensor<T>>,
}

fn run<T: Real, R>(f: impl FnOnce(&mut Graph<T>) -> Result<R>) -> Result<R> {
    let mut g = Graph::new();
    f(&mut g)
}

/// Posterior means for a batch `[N, 3, H, W]`.
pub fn encode_tensor<T: Real>(e: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    run(|g| {
        let p = e.bind(g, false);
        let xv = g.constant(x.clone());
        let z = encoder_forward(g, &e.arch, &p, xv)?;
        Ok(g.value(z).clone())
    })
}

pub fn decode_tensor<T: Real>(gen: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    run(|g| {
        let p = gen.bind(g, false);
        let zv = g.constant(z.clone());
        let x = decoder_forward(g, &gen.arch, &p, zv)?;
        Ok(g.value(x).clone())
    })
}

pub fn translate_tensor<T: Real>(t: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    run(|g| {
        let p = t.bind(g, false);
        let zv = g.constant(z.clone());
        let y = translator_forward(g, &t.arch, &p, zv)?;
        Ok(g.value(y).clone())
    })
}

pub fn encode(e: &ModelParams, x: &Image) -> Result<LatentCode> {
    let z = encode_tensor(e, &x.to_tensor())?;
    Ok(LatentCode::from_tensor_item(&z, 0))
}

pub fn decode(gen: &ModelParams, z: &LatentCode) -> Result<Image> {
    let x = decode_tensor(gen, &z.to_tensor())?;
    Image::from_tensor_item(&x, 0).map_err(|e| NetError::Architecture(e.to_string()))
}

pub fn translate_features(t: &ModelParams, z: &LatentCode) -> Result<LatentCode> {
    let y = translate_tensor(t, &z.to_tensor())?;
    Ok(LatentCode::from_tensor_item(&y, 0))
}

/// Score maps (one per scale) and tapped features for one image.
pub fn discriminate(d: &ModelParams, x: &Image) -> Result<(Vec<Tensor<f32>>, FeaturePyramid)> {
    run(|g| {
        let p = d.bind(g, false);
        let xv = g.constant(x.to_tensor());
        let out = discriminator_forward(g, &d.arch, &p, xv)?;
        Ok((
            out.scores.iter().map(|&v| g.value(v).clone()).collect(),
            FeaturePyramid {
                levels: out.feats.iter().map(|&v| g.value(v).clone()).collect(),
            },
        ))
    })
}

pub fn perceptual_features(x: &Image) -> FeaturePyramid {
    let weights = perceptual::params::<f32>();
    let mut g = Graph::new();
    let xv = g.constant(x.to_tensor());
    let feats = perceptual::forward(&mut g, &weights, xv);
    FeaturePyramid {
        levels: feats.iter().map(|&v| g.value(v).clone()).collect(),
    }
}

/// Standard-normal tensor from a seeded stream.
pub fn gaussian_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// `mean + sigma * eps` inside a graph; the path to `mean` stays differentiable.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mean: Var, eps: &Tensor<T>, sigma: T) -> Var {
    if sigma == T::zero() {
        return mean;
    }
    let noise = g.constant(eps.map(|e| e * sigma));
    g.add(mean, noise)
}

/// Draws `mean + sigma * eps`, `eps ~ N(0, I)` seeded by `noise_seed`.
/// `sigma == 0` returns `mean` unchanged.
pub fn sample_latent(mean: &LatentCode, noise_seed: u64, sigma: f32) -> LatentCode {
    if sigma == 0.0 {
        return mean.clone();
    }
    let mut rng = rng_for(noise_seed, "latent-noise", 0);
    let mut out = mean.clone();
    for v in &mut out.data {
        let e: f64 = rng.sample(StandardNormal);
        *v += sigma * e as f32;
    }
    out
}
