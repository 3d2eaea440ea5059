//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/domain1/<id>.png   color-coded label images (RGB8)
//! <root>/domain2/<id>.png   photos (RGB8)
//! <root>/labels/<id>.png    label indices (L8), synthetic benchmark only
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetBundle, DomainImage, Image, LabelMap, PairedSample, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub n_paired: usize,
    pub paired_fraction: f64,
    pub has_labels: bool,
    pub domain1_ids: Vec<String>,
    pub domain2_ids: Vec<String>,
    pub paired_ids: Vec<String>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rgb(path: &Path, im: &Image) -> Result<()> {
    let (h, w) = (im.height(), im.width());
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            buf.extend(im.pixel(y, x).map(Image::to_u8));
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| png_err(path, e))
}

fn write_gray(path: &Path, label: &LabelMap) -> Result<()> {
    image::save_buffer(
        path,
        label.pixels(),
        label.width() as u32,
        label.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| png_err(path, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| png_err(path, e))
}

fn check_size(path: &Path, expected: (usize, usize), w: u32, h: u32) -> Result<()> {
    let found = (w as usize, h as usize);
    if found != expected {
        return Err(DataError::DimensionMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn read_rgb(path: &Path, width: usize, height: usize) -> Result<Image> {
    let img = open(path)?.into_rgb8();
    check_size(path, (width, height), img.width(), img.height())?;
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = Image::from_u8(px.0[c]);
        }
    }
    Image::from_planar(height, width, data)
}

fn read_gray(path: &Path, width: usize, height: usize, num_classes: usize) -> Result<LabelMap> {
    let img = open(path)?.into_luma8();
    check_size(path, (width, height), img.width(), img.height())?;
    LabelMap::new(height, width, num_classes, img.into_raw())
}

/// Saves one image as an 8-bit RGB PNG.
pub fn save_png(im: &Image, path: &Path) -> Result<()> {
    write_rgb(path, im)
}

/// Loads an RGB PNG of any size.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = open(path)?.into_rgb8();
    read_rgb(path, img.width() as usize, img.height() as usize)
}

/// Writes `bundle` under `root`, creating directories as needed. Pixel values
/// are quantized to 8 bits.
pub fn write_dataset(bundle: &DatasetBundle, root: &Path) -> Result<()> {
    let d1 = root.join("domain1");
    let d2 = root.join("domain2");
    fs::create_dir_all(&d1)?;
    fs::create_dir_all(&d2)?;
    for d in &bundle.unpaired1 {
        write_rgb(&d1.join(format!("{}.png", d.id)), &d.image)?;
    }
    for d in &bundle.unpaired2 {
        write_rgb(&d2.join(format!("{}.png", d.id)), &d.image)?;
    }
    if let Some(labels) = &bundle.labels {
        let dl = root.join("labels");
        fs::create_dir_all(&dl)?;
        for (d, l) in bundle.unpaired1.iter().zip(labels) {
            write_gray(&dl.join(format!("{}.png", d.id)), l)?;
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        height: bundle.height,
        width: bundle.width,
        num_classes: bundle.num_classes,
        seed: bundle.seed,
        n1: bundle.unpaired1.len(),
        n2: bundle.unpaired2.len(),
        n_paired: bundle.paired.len(),
        paired_fraction: bundle.paired_fraction,
        has_labels: bundle.labels.is_some(),
        domain1_ids: bundle.unpaired1.iter().map(|d| d.id.clone()).collect(),
        domain2_ids: bundle.unpaired2.iter().map(|d| d.id.clone()).collect(),
        paired_ids: bundle.paired.iter().map(|p| p.id.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::MalformedManifest(e.to_string()))?;
    fs::write(root.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    if !path.is_file() {
        return Err(DataError::MissingManifest(path));
    }
    let text = fs::read_to_string(&path)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::MalformedManifest(e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(DataError::MalformedManifest(format!(
            "unsupported format_version {}",
            m.format_version
        )));
    }
    if m.domain1_ids.len() != m.n1 || m.domain2_ids.len() != m.n2 || m.paired_ids.len() != m.n_paired
    {
        return Err(DataError::MalformedManifest(
            "identifier lists disagree with counts".into(),
        ));
    }
    Ok(m)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<DatasetBundle> {
    let m = read_manifest(root)?;
    let (w, h) = (m.width, m.height);
    let load = |dir: &str, ids: &[String]| -> Result<Vec<DomainImage>> {
        ids.iter()
            .map(|id| {
                let p: PathBuf = root.join(dir).join(format!("{id}.png"));
                Ok(DomainImage {
                    id: id.clone(),
                    image: read_rgb(&p, w, h)?,
                })
            })
            .collect()
    };
    let unpaired1 = load("domain1", &m.domain1_ids)?;
    let unpaired2 = load("domain2", &m.domain2_ids)?;
    let labels = if m.has_labels {
        Some(
            m.domain1_ids
                .iter()
                .map(|id| read_gray(&root.join("labels").join(format!("{id}.png")), w, h, m.num_classes))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let idx1: HashMap<&str, usize> = m
        .domain1_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let idx2: HashMap<&str, usize> = m
        .domain2_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let paired = m
        .paired_ids
        .iter()
        .map(|id| {
            let (Some(&i), Some(&j)) = (idx1.get(id.as_str()), idx2.get(id.as_str())) else {
                return Err(DataError::MalformedManifest(format!(
                    "paired id {id} not present in both domains"
                )));
            };
            Ok(PairedSample {
                id: id.clone(),
                a: unpaired1[i].image.clone(),
                b: unpaired2[j].image.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = DatasetBundle {
        height: h,
        width: w,
        num_classes: m.num_classes,
        seed: m.seed,
        unpaired1,
        unpaired2,
        paired,
        labels,
        paired_fraction: m.paired_fraction,
    };
    bundle
        .check_invariants()
        .map_err(DataError::MalformedManifest)?;
    Ok(bundle)
}
