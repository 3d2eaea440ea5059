//! Shared fixtures for the criterion benches.

use latbridge_core::data::{generate_label_map, render_photo};
use latbridge_core::nets::{defaults, ModelParams};
use latbridge_core::{Image, Tensor};

pub fn photo_batch(n: usize, size: usize) -> Tensor<f32> {
    let images: Vec<Image> = (0..n as u64)
        .map(|i| render_photo(&generate_label_map(i, size, size, 4).unwrap(), i))
        .collect();
    Image::batch(&images)
}

/// Encoder, decoder and discriminator at the given widths.
pub fn vaegan(widths: &[usize], latent: usize) -> [ModelParams; 3] {
    [
        ModelParams::init(defaults::encoder(widths, latent), 1).unwrap(),
        ModelParams::init(defaults::decoder(widths, latent), 2).unwrap(),
        ModelParams::init(defaults::discriminator(widths, 2), 3).unwrap(),
    ]
}
