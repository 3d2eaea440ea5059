//! Semi-supervised image-to-image translation by mapping between the latent
//! spaces of two independently trained VAE-GANs.
//!
//! Stage one trains an encoder/decoder/discriminator triple per image domain;
//! stage two freezes them and learns a translator between the two latent
//! spaces from a small paired subset. Translation is `G2(T(E1(x)))`.

pub mod data;
pub mod eval;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod config;

pub use data::{DataConfig, DatasetBundle, Image, LabelMap, PairedSample};
pub use graph::{Graph, Var};
pub use nets::{ArchDescriptor, LatentCode, ModelParams};
pub use tensor::{Real, Tensor};
