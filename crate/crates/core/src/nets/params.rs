use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

use super::NetError;

/// Layer layout of one network. Serialized into checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchDescriptor {
    /// Stride-2 conv stages followed by a 3x3 projection to the posterior mean.
    Encoder {
        widths: Vec<usize>,
        latent_channels: usize,
    },
    /// A 3x3 conv from the latent, then one upsample+conv stage per width;
    /// the last stage emits RGB through `tanh`.
    Decoder {
        latent_channels: usize,
        widths: Vec<usize>,
    },
    /// Multi-scale patch discriminator; each scale has its own stride-2 stack.
    ImageDiscriminator { widths: Vec<usize>, scales: usize },
    /// Residual blocks on the spatial latent; each branch widens to
    /// `hidden` channels and back. Identity at initialization.
    TranslatorResblocks {
        channels: usize,
        hidden: usize,
        blocks: usize,
    },
    /// Fully connected layers on the flattened latent with a skip connection.
    TranslatorFc {
        latent_channels: usize,
        latent_height: usize,
        latent_width: usize,
        hidden: usize,
        layers: usize,
    },
    /// Patch discriminator on latent codes.
    TranslationDiscriminator {
        latent_channels: usize,
        widths: Vec<usize>,
    },
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// One parameter tensor slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in and gain.
    Normal { fan_in: usize, gain: f64 },
    Zero,
}

fn conv(name: &str, out: usize, inp: usize, k: usize, gain: f64) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out, inp, k, k],
            init: Init::Normal {
                fan_in: inp * k * k,
                gain,
            },
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            init: Init::Zero,
        },
    ]
}

fn zero_conv(name: &str, out: usize, inp: usize, k: usize) -> [ParamSpec; 2] {
    let [mut w, b] = conv(name, out, inp, k, 1.0);
    w.init = Init::Zero;
    [w, b]
}

fn fc(name: &str, out: usize, inp: usize, gain: f64) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out, inp],
            init: Init::Normal { fan_in: inp, gain },
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![out],
            init: Init::Zero,
        },
    ]
}

// He gain for leaky ReLU with slope 0.2.
fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

impl ArchDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Encoder { .. } => "encoder",
            Self::Decoder { .. } => "decoder",
            Self::ImageDiscriminator { .. } => "image_discriminator",
            Self::TranslatorResblocks { .. } => "translator_resblocks",
            Self::TranslatorFc { .. } => "translator_fc",
            Self::TranslationDiscriminator { .. } => "translation_discriminator",
        }
    }

    /// Structural sanity: non-empty widths, positive channel counts.
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |why: &str| Err(NetError::Descriptor(format!("{}: {why}", self.kind())));
        match self {
            Self::Encoder {
                widths,
                latent_channels,
            }
            | Self::Decoder {
                widths,
                latent_channels,
            }
            | Self::TranslationDiscriminator {
                widths,
                latent_channels,
            } => {
                if widths.is_empty() || widths.contains(&0) || *latent_channels == 0 {
                    return bad("widths and latent channels must be positive and non-empty");
                }
            }
            Self::ImageDiscriminator { widths, scales } => {
                if widths.is_empty() || widths.contains(&0) || *scales == 0 {
                    return bad("widths and scales must be positive and non-empty");
                }
            }
            Self::TranslatorResblocks { channels, hidden, .. } => {
                if *channels == 0 || *hidden == 0 {
                    return bad("channels and hidden width must be positive");
                }
            }
            Self::TranslatorFc {
                latent_channels,
                latent_height,
                latent_width,
                hidden,
                layers,
            } => {
                if *layers < 2 || *hidden == 0 || latent_channels * latent_height * latent_width == 0
                {
                    return bad("needs at least 2 layers and a non-empty latent");
                }
            }
        }
        Ok(())
    }

    /// Every parameter slot in evaluation order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let g = lrelu_gain();
        let mut out = Vec::new();
        match self {
            Self::Encoder {
                widths,
                latent_channels,
            } => {
                let mut inp = 3;
                for (i, &w) in widths.iter().enumerate() {
                    out.extend(conv(&format!("down{i}"), w, inp, 3, g));
                    inp = w;
                }
                out.extend(conv("mean", *latent_channels, inp, 3, 1.0));
            }
            Self::Decoder {
                latent_channels,
                widths,
            } => {
                out.extend(conv("stem", widths[0], *latent_channels, 3, g));
                for i in 1..widths.len() {
                    out.extend(conv(&format!("up{i}"), widths[i], widths[i - 1], 3, g));
                }
                out.extend(conv("rgb", 3, *widths.last().unwrap(), 3, 1.0));
            }
            Self::ImageDiscriminator { widths, scales } => {
                for s in 0..*scales {
                    let mut inp = 3;
                    for (i, &w) in widths.iter().enumerate() {
                        out.extend(conv(&format!("scale{s}.conv{i}"), w, inp, 3, g));
                        inp = w;
                    }
                    out.extend(conv(&format!("scale{s}.score"), 1, inp, 3, 1.0));
                }
            }
            Self::TranslatorResblocks {
                channels,
                hidden,
                blocks,
            } => {
                for b in 0..*blocks {
                    out.extend(conv(&format!("block{b}.conv0"), *hidden, *channels, 3, g));
                    out.extend(zero_conv(&format!("block{b}.conv1"), *channels, *hidden, 3));
                }
            }
            Self::TranslatorFc {
                latent_channels,
                latent_height,
                latent_width,
                hidden,
                layers,
            } => {
                let dim = latent_channels * latent_height * latent_width;
                let mut inp = dim;
                for l in 0..layers - 1 {
                    out.extend(fc(&format!("fc{l}"), *hidden, inp, g));
                    inp = *hidden;
                }
                let [mut w, b] = fc(&format!("fc{}", layers - 1), dim, inp, 1.0);
                w.init = Init::Zero;
                out.extend([w, b]);
            }
            Self::TranslationDiscriminator {
                latent_channels,
                widths,
            } => {
                let mut inp = *latent_channels;
                for (i, &w) in widths.iter().enumerate() {
                    out.extend(conv(&format!("conv{i}"), w, inp, 3, g));
                    inp = w;
                }
                out.extend(conv("score", 1, inp, 3, 1.0));
            }
        }
        out
    }
}

/// Named parameter tensors of one network plus the descriptor that fixes
/// their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: ArchDescriptor,
    pub tensors: IndexMap<String, Tensor<T>>,
    pub init_seed: u64,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization.
    pub fn init(arch: ArchDescriptor, init_seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut tensors = IndexMap::new();
        for (i, spec) in arch.param_specs().into_iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zero => vec![T::zero(); n],
                Init::Normal { fan_in, gain } => {
                    let mut rng = rng_for(init_seed, &spec.name, i as u64);
                    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt())
                        .expect("positive std");
                    (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
            };
            tensors.insert(spec.name, Tensor::from_vec(&spec.shape, data));
        }
        Ok(Self {
            arch,
            tensors,
            init_seed,
        })
    }

    /// Assembles parameters from loaded tensors, checking each against the
    /// descriptor.
    pub fn from_tensors(
        arch: ArchDescriptor,
        tensors: IndexMap<String, Tensor<T>>,
        init_seed: u64,
    ) -> Result<Self, NetError> {
        arch.validate()?;
        let specs = arch.param_specs();
        for spec in &specs {
            match tensors.get(&spec.name) {
                None => return Err(NetError::MissingTensor(spec.name.clone())),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(NetError::ShapeMismatch {
                        tensor: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(NetError::UnexpectedTensor(extra.clone()));
        }
        let mut ordered = IndexMap::new();
        let mut tensors = tensors;
        for spec in specs {
            let t = tensors.shift_remove(&spec.name).expect("checked above");
            ordered.insert(spec.name, t);
        }
        Ok(Self {
            arch,
            tensors: ordered,
            init_seed,
        })
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            init_seed: self.init_seed,
        }
    }

    /// FNV-1a over the raw bit patterns of every tensor, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01B3);
            }
            for v in t.data() {
                h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x100_0000_01B3);
            }
        }
        h
    }

    /// Inserts every tensor into `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Randomly perturbs every tensor; used by tests to move away from the
    /// zero-initialized slots.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = rng_for(seed, "jitter", 0);
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v += T::lit(rng.random_range(-scale..scale));
            }
        }
    }
}

/// Graph handles of a network's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn conv(&self, prefix: &str) -> (Var, Var) {
        (
            self.get(&format!("{prefix}.weight")),
            self.get(&format!("{prefix}.bias")),
        )
    }
}
