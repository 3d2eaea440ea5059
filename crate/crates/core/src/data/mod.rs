//! Synthetic paired-domain benchmark.
//!
//! Domain 1 holds color-coded label images, domain 2 holds "photos" rendered
//! from label maps with a fixed base color per class plus bounded texture
//! and shading. The bounds keep every photo pixel strictly closer to its
//! class color than to any other, so nearest-color segmentation recovers
//! the label exactly.

mod io;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, hash_unit, rng_for};
use crate::tensor::{Real, Tensor};

pub use io::{load_png, read_dataset, save_png, write_dataset, Manifest, MANIFEST_VERSION};

/// Number of entries in the fixed color tables; also the class limit.
pub const MAX_CLASSES: usize = 27;

/// Spatial sizes must be multiples of this (three stride-2 stages).
pub const SIZE_MULTIPLE: usize = 8;

pub const TEXTURE_AMPLITUDE: f64 = 0.15;
pub const SHADING_AMPLITUDE: f64 = 0.1;

/// Minimum share of pixels each class must cover in a generated map.
pub const MIN_CLASS_COVERAGE: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dimensions {width}x{height}: both must be positive multiples of {multiple}")]
    Dimension {
        width: usize,
        height: usize,
        multiple: usize,
    },
    #[error("num_classes must be in 1..={MAX_CLASSES}, got {0}")]
    ClassCount(usize),
    #[error("label value {value} out of range for {num_classes} classes")]
    LabelRange { value: u8, num_classes: usize },
    #[error("could not place shapes covering every class after {0} attempts")]
    Coverage(usize),
    #[error("paired count {n_paired} exceeds min(n1, n2) = {limit}")]
    TooManyPairs { n_paired: usize, limit: usize },
    #[error("paired count must be at least 1")]
    NoPairs,
    #[error("missing manifest: {0}")]
    MissingManifest(std::path::PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("missing file: {0}")]
    MissingFile(std::path::PathBuf),
    #[error("dimension mismatch in {path}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        path: std::path::PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("image decode failed for {path}: {message}")]
    Decode {
        path: std::path::PathBuf,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width % SIZE_MULTIPLE != 0 || height % SIZE_MULTIPLE != 0 {
        return Err(DataError::Dimension {
            width,
            height,
            multiple: SIZE_MULTIPLE,
        });
    }
    Ok(())
}

const fn grid(i: usize, step: f32) -> [f32; 3] {
    let v = [-step, 0.0, step];
    [v[i / 9], v[(i / 3) % 3], v[i % 3]]
}

// Order of grid points {-1,0,1}^3 (as base-3 index) used for photo colors:
// a regular tetrahedron of cube corners first, then the remaining corners,
// then face and edge centers.
const PHOTO_ORDER: [usize; MAX_CLASSES] = [
    0, 8, 20, 24, 26, 18, 6, 2, 13, 4, 22, 10, 16, 12, 14, 1, 3, 5, 7, 9, 11, 15, 17, 19, 21, 23,
    25,
];

/// Base photo color of each class. Pairwise distance is at least 0.8.
pub fn photo_color(class: usize) -> [f32; 3] {
    grid(PHOTO_ORDER[class], 0.8)
}

/// Flat color used for class `class` in domain-1 label images.
pub fn label_color(class: usize) -> [f32; 3] {
    // 10 is coprime with 27, so this visits every grid point once.
    grid((class * 10 + 5) % MAX_CLASSES, 1.0)
}

/// An RGB image in `[-1, 1]`, stored planar (`[3, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in color {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from planar data; values are clamped into `[-1, 1]`
    /// and non-finite values are rejected by mapping them to 0.
    pub fn from_planar(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != 3 * height * width {
            return Err(DataError::DimensionMismatch {
                path: "<memory>".into(),
                expected: (width, height),
                found: (data.len(), 0),
            });
        }
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Takes item `i` of an NCHW tensor with three channels.
    pub fn from_tensor_item<T: Real>(t: &Tensor<T>, i: usize) -> Result<Self> {
        let s = t.shape();
        let data = t.item_slice(i).iter().map(|v| v.as_f64() as f32).collect();
        Self::from_planar(s[2], s[3], data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Stacks images into one `[N, 3, H, W]` tensor.
    pub fn batch<'a, T: Real>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<T> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut hw = None;
        for im in images {
            let dims = (im.height, im.width);
            assert!(hw.is_none_or(|d| d == dims), "batch of mixed image sizes");
            hw = Some(dims);
            data.extend(im.data.iter().map(|&v| T::lit(v as f64)));
            n += 1;
        }
        let (h, w) = hw.expect("batch of zero images");
        Tensor::from_vec(&[n, 3, h, w], data)
    }

    pub fn to_u8(v: f32) -> u8 {
        (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
    }

    pub fn from_u8(u: u8) -> f32 {
        u as f32 / 255.0 * 2.0 - 1.0
    }

    /// The image as it reads back after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| Self::from_u8(Self::to_u8(v))).collect(),
        }
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len() as f64
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(DataError::ClassCount(num_classes));
        }
        if pixels.len() != height * width {
            return Err(DataError::DimensionMismatch {
                path: "<memory>".into(),
                expected: (width, height),
                found: (pixels.len(), 1),
            });
        }
        if let Some(&value) = pixels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(DataError::LabelRange { value, num_classes });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.pixels[y * self.width + x] as usize
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &p in &self.pixels {
            counts[p as usize] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Background plus random rectangles and ellipses labeled `1..K`, resampled
/// until every class covers at least [`MIN_CLASS_COVERAGE`] of the pixels.
pub fn generate_label_map(
    seed: u64,
    width: usize,
    height: usize,
    num_classes: usize,
) -> Result<LabelMap> {
    check_dims(width, height)?;
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(DataError::ClassCount(num_classes));
    }
    let total = width * height;
    if num_classes == 1 {
        return LabelMap::new(height, width, 1, vec![0; total]);
    }
    for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut rng = rng_for(seed, "label-map", attempt as u64);
        let mut pixels = vec![0u8; total];
        let mut classes: Vec<u8> = (1..num_classes as u8).collect();
        classes.shuffle(&mut rng);
        let extra = rng.random_range(0..=num_classes / 2 + 1);
        for _ in 0..extra {
            classes.push(rng.random_range(1..num_classes as u8));
        }
        classes.shuffle(&mut rng);
        for class in classes {
            let shape = if rng.random_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let rx = rng.random_range(width as f64 / 10.0..width as f64 / 3.0);
            let ry = rng.random_range(height as f64 / 10.0..height as f64 / 3.0);
            for y in 0..height {
                let dy = (y as f64 + 0.5 - cy) / ry;
                for x in 0..width {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let inside = match shape {
                        Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                    };
                    if inside {
                        pixels[y * width + x] = class;
                    }
                }
            }
        }
        let map = LabelMap::new(height, width, num_classes, pixels)?;
        if map
            .class_counts()
            .iter()
            .all(|&c| c as f64 >= MIN_CLASS_COVERAGE * total as f64)
        {
            return Ok(map);
        }
    }
    Err(DataError::Coverage(MAX_PLACEMENT_ATTEMPTS))
}

/// Flat color-coded rendering of a label map (domain 1).
pub fn colorize_labels(label: &LabelMap) -> Image {
    let mut im = Image::filled(label.height, label.width, [0.0; 3]).expect("label dims valid");
    for y in 0..label.height {
        for x in 0..label.width {
            im.set_pixel(y, x, label_color(label.get(y, x)));
        }
    }
    im
}

fn unit_direction(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Renders a domain-2 photo: base class color, a per-class procedural
/// texture of Euclidean norm at most [`TEXTURE_AMPLITUDE`] and a smooth gray
/// shading ramp of norm at most [`SHADING_AMPLITUDE`].
pub fn render_photo(label: &LabelMap, style_seed: u64) -> Image {
    let mut rng = rng_for(style_seed, "photo-style", 0);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let shade_amp = rng.random_range(0.5..1.0) * SHADING_AMPLITUDE;
    let textures: Vec<([f64; 3], f64, f64, f64, f64)> = (0..label.num_classes)
        .map(|_| {
            (
                unit_direction(&mut rng),
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise_seed = derive_seed(style_seed, "photo-noise", 0);
    let gray = 1.0 / 3f64.sqrt();
    let (h, w) = (label.height, label.width);
    let mut im = Image::filled(h, w, [0.0; 3]).expect("label dims valid");
    for y in 0..h {
        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let k = label.get(y, x);
            let (dir, fx, fy, px, py) = textures[k];
            let wave = (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            let grain = hash_unit(noise_seed, y as u64, x as u64);
            let t = TEXTURE_AMPLITUDE * (0.6 * wave + 0.4 * grain);
            let s = shade_amp * (theta.cos() * u + theta.sin() * v) / std::f64::consts::SQRT_2;
            let base = photo_color(k);
            let rgb: [f32; 3] = std::array::from_fn(|c| {
                (base[c] as f64 + t * dir[c] + s * gray).clamp(-1.0, 1.0) as f32
            });
            im.set_pixel(y, x, rgb);
        }
    }
    im
}

/// Parameters of [`build_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n1: usize,
    pub n2: usize,
    pub n_paired: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n1: 1000,
            n2: 1000,
            n_paired: 100,
            height: 64,
            width: 64,
            num_classes: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainImage {
    pub id: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub a: Image,
    pub b: Image,
}

/// Both domains' pools plus the paired subset. Paired images are also members
/// of the per-domain pools, under the same identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub unpaired1: Vec<DomainImage>,
    pub unpaired2: Vec<DomainImage>,
    pub paired: Vec<PairedSample>,
    /// Aligned with `unpaired1`.
    pub labels: Option<Vec<LabelMap>>,
    pub paired_fraction: f64,
}

impl DatasetBundle {
    pub fn quantized(&self) -> Self {
        let q = |v: &[DomainImage]| {
            v.iter()
                .map(|d| DomainImage {
                    id: d.id.clone(),
                    image: d.image.quantized(),
                })
                .collect()
        };
        Self {
            unpaired1: q(&self.unpaired1),
            unpaired2: q(&self.unpaired2),
            paired: self
                .paired
                .iter()
                .map(|p| PairedSample {
                    id: p.id.clone(),
                    a: p.a.quantized(),
                    b: p.b.quantized(),
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Label map of a domain-1 image, when labels are present.
    pub fn label_for(&self, id: &str) -> Option<&LabelMap> {
        let labels = self.labels.as_ref()?;
        let i = self.unpaired1.iter().position(|d| d.id == id)?;
        labels.get(i)
    }

    pub fn domain1_images(&self) -> Vec<Image> {
        self.unpaired1.iter().map(|d| d.image.clone()).collect()
    }

    pub fn domain2_images(&self) -> Vec<Image> {
        self.unpaired2.iter().map(|d| d.image.clone()).collect()
    }

    /// Checks identifier uniqueness and that every pair lives in both pools.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, pool) in [("domain1", &self.unpaired1), ("domain2", &self.unpaired2)] {
            let ids: BTreeSet<&str> = pool.iter().map(|d| d.id.as_str()).collect();
            if ids.len() != pool.len() {
                return Err(format!("duplicate identifiers in {name}"));
            }
            for p in &self.paired {
                if !ids.contains(p.id.as_str()) {
                    return Err(format!("paired id {} missing from {name}", p.id));
                }
            }
        }
        Ok(())
    }
}

pub fn domain1_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn unpaired2_id(j: usize) -> String {
    format!("u{j:05}")
}

/// Deterministic synthetic benchmark.
///
/// Domain-1 sample `i` is the colorized label map `L_i`. Of the first
/// `min(n1, n2)` indices, `n_paired` are chosen as pairs: their domain-2 photo
/// is rendered from `L_i` under the same identifier. Every other photo is
/// rendered from an independent label map.
pub fn build_dataset(config: &DataConfig) -> Result<DatasetBundle> {
    check_dims(config.width, config.height)?;
    let limit = config.n1.min(config.n2);
    if config.n_paired > limit {
        return Err(DataError::TooManyPairs {
            n_paired: config.n_paired,
            limit,
        });
    }
    if config.n_paired == 0 {
        return Err(DataError::NoPairs);
    }
    let (h, w, k, seed) = (config.height, config.width, config.num_classes, config.seed);
    let labels1 = (0..config.n1)
        .map(|i| generate_label_map(derive_seed(seed, "domain1-label", i as u64), w, h, k))
        .collect::<Result<Vec<_>>>()?;

    let mut candidates: Vec<usize> = (0..limit).collect();
    candidates.shuffle(&mut rng_for(seed, "pair-selection", 0));
    let mut paired_idx = candidates[..config.n_paired].to_vec();
    paired_idx.sort_unstable();
    let paired_set: BTreeSet<usize> = paired_idx.iter().copied().collect();

    let unpaired1: Vec<DomainImage> = labels1
        .iter()
        .enumerate()
        .map(|(i, l)| DomainImage {
            id: domain1_id(i),
            image: colorize_labels(l),
        })
        .collect();
    let mut unpaired2 = Vec::with_capacity(config.n2);
    for j in 0..config.n2 {
        let style = derive_seed(seed, "domain2-style", j as u64);
        if paired_set.contains(&j) {
            unpaired2.push(DomainImage {
                id: domain1_id(j),
                image: render_photo(&labels1[j], style),
            });
        } else {
            let l = generate_label_map(derive_seed(seed, "domain2-label", j as u64), w, h, k)?;
            unpaired2.push(DomainImage {
                id: unpaired2_id(j),
                image: render_photo(&l, style),
            });
        }
    }
    let paired = paired_idx
        .iter()
        .map(|&i| PairedSample {
            id: domain1_id(i),
            a: unpaired1[i].image.clone(),
            b: unpaired2[i].image.clone(),
        })
        .collect();
    Ok(DatasetBundle {
        height: h,
        width: w,
        num_classes: k,
        seed,
        unpaired1,
        unpaired2,
        paired,
        labels: Some(labels1),
        paired_fraction: config.n_paired as f64 / limit as f64,
    })
}
