//! End-to-end ablation runs over method, paired fraction, loss mode and
//! seed.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate_pipeline, EvalError, MetricsReport, Result, TestSet};
use crate::config::config_hash;
use crate::data::{build_dataset, DataConfig, Image, PairedSample};
use crate::infer::TranslationPipeline;
use crate::losses::TranslationMode;
use crate::nets::ModelParams;
use crate::seed::derive_seed;
use crate::train::{self, Checkpoint, Stage, TrainConfig};

pub const ABLATION_COLUMNS: &str = "method,paired_fraction,mode,seed,per_pixel_acc,per_class_acc,class_iou";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Feature translation with VAE-GANs trained on the full unpaired pools.
    #[serde(rename = "FT+U&P")]
    FtUnpairedAndPaired,
    /// Feature translation with VAE-GANs trained on the paired images only.
    #[serde(rename = "FT w/o U")]
    FtWithoutUnpaired,
    /// Image-level supervised baseline on the paired images only.
    #[serde(rename = "IT+P")]
    ImagePaired,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Self::FtUnpairedAndPaired,
        Self::FtWithoutUnpaired,
        Self::ImagePaired,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FtUnpairedAndPaired => "FT+U&P",
            Self::FtWithoutUnpaired => "FT w/o U",
            Self::ImagePaired => "IT+P",
        }
    }

    fn uses_mode(&self) -> bool {
        !matches!(self, Self::ImagePaired)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Grid of cells to train and evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Pool sizes, image size and class count. `n_paired` is set per cell
    /// from the fraction; `seed` is combined with each replicate seed.
    pub data: DataConfig,
    /// Base training config; `seed` and `mode` are set per cell.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub modes: Vec<TranslationMode>,
    pub seeds: Vec<u64>,
    pub test_images: usize,
    /// Optimizer steps per stage. When set, the step count replaces the
    /// epoch count so small and large pools get the same budget.
    pub vaegan_steps: Option<usize>,
    pub translator_steps: Option<usize>,
    pub baseline_steps: Option<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            fractions: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            modes: vec![TranslationMode::Full],
            seeds: vec![0, 1, 2],
            test_images: 100,
            vaegan_steps: None,
            translator_steps: None,
            baseline_steps: None,
        }
    }
}

impl AblationSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EvalError::Spec(m.to_string()));
        if self.methods.is_empty() || self.fractions.is_empty() || self.seeds.is_empty() {
            return bad("methods, fractions and seeds must be non-empty");
        }
        if self.methods.iter().any(Method::uses_mode) && self.modes.is_empty() {
            return bad("feature-translation methods need at least one mode");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("fractions must lie in (0, 1]");
        }
        if self.test_images == 0 {
            return bad("test_images must be >= 1");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Number of pairs a fraction yields.
    pub fn pairs_for(&self, fraction: f64) -> usize {
        (fraction * self.data.n1.min(self.data.n2) as f64).round() as usize
    }

    fn stage_config(&self, seed: u64, steps: Option<usize>, vaegan: bool) -> TrainConfig {
        let mut c = self.train.clone();
        c.seed = seed;
        if let Some(s) = steps {
            c.max_steps = Some(s);
            if vaegan {
                c.epochs_vaegan = usize::MAX;
            } else {
                c.epochs_translator = usize::MAX;
            }
        }
        c
    }
}

/// One cell and seed. `metrics` is `None` when the cell was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub paired_fraction: f64,
    pub mode: Option<TranslationMode>,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub skipped: Option<String>,
}

/// Median scores of one cell over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub paired_fraction: f64,
    pub mode: Option<TranslationMode>,
    pub seeds: usize,
    pub per_pixel_acc: Option<f64>,
    pub per_class_acc: Option<f64>,
    pub class_iou: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub notes: Vec<String>,
    pub spec: AblationSpec,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<CellSummary>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn mode_str(m: Option<TranslationMode>) -> &'static str {
    m.map_or("n/a", |m| m.as_str())
}

impl AblationReport {
    /// One line per cell and seed; skipped rows leave the scores empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let scores = match &r.metrics {
                Some(m) => format!("{},{},{}", m.per_pixel_acc, m.per_class_acc, m.class_iou),
                None => ",,".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method.as_str(),
                r.paired_fraction,
                mode_str(r.mode),
                r.seed,
                scores
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            notes: &'a [String],
            cells: &'a [CellSummary],
        }
        serde_json::to_string_pretty(&Summary {
            notes: &self.notes,
            cells: &self.summary,
        })
        .expect("summaries serialize")
    }

    pub fn cell(&self, method: Method, fraction: f64, mode: Option<TranslationMode>) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.method == method && c.paired_fraction == fraction && c.mode == mode)
    }

    /// Median per-pixel accuracy of a cell.
    pub fn median_per_pixel(&self, method: Method, fraction: f64, mode: Option<TranslationMode>) -> Option<f64> {
        self.cell(method, fraction, mode)?.per_pixel_acc
    }

    fn summarize(rows: &[AblationRow]) -> Vec<CellSummary> {
        let mut out: Vec<CellSummary> = Vec::new();
        for r in rows {
            if out
                .iter()
                .any(|c| c.method == r.method && c.paired_fraction == r.paired_fraction && c.mode == r.mode)
            {
                continue;
            }
            let same: Vec<&AblationRow> = rows
                .iter()
                .filter(|s| s.method == r.method && s.paired_fraction == r.paired_fraction && s.mode == r.mode)
                .collect();
            let done: Vec<&MetricsReport> = same.iter().filter_map(|s| s.metrics.as_ref()).collect();
            let med = |f: fn(&MetricsReport) -> f64| median(done.iter().map(|m| f(m)).collect());
            out.push(CellSummary {
                method: r.method,
                paired_fraction: r.paired_fraction,
                mode: r.mode,
                seeds: done.len(),
                per_pixel_acc: med(|m| m.per_pixel_acc),
                per_class_acc: med(|m| m.per_class_acc),
                class_iou: med(|m| m.class_iou),
                skipped: same.iter().find_map(|s| s.skipped.clone()),
            });
        }
        out
    }
}

/// Trained networks reused across cells that share a training input.
/// Keys hash the stage config together with the exact training images.
#[derive(Default)]
pub struct AblationCache {
    vaegans: HashMap<String, Checkpoint>,
    translators: HashMap<String, Checkpoint>,
    baselines: HashMap<String, Checkpoint>,
    /// Number of trainings actually run, by kind.
    pub trained: [usize; 3],
}

fn digest_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> String {
    let mut h = Sha256::new();
    for im in images {
        h.update((im.height() as u64).to_le_bytes());
        h.update((im.width() as u64).to_le_bytes());
        for v in im.planar() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn net_sums(c: &Checkpoint) -> String {
    c.nets
        .iter()
        .map(|(k, v)| format!("{k}:{:016x}", v.checksum()))
        .collect::<Vec<_>>()
        .join(",")
}

impl AblationCache {
    fn vaegan(&mut self, images: &[Image], config: &TrainConfig, stage: Stage) -> Result<Checkpoint> {
        let key = format!("{}|{}|{}", stage.as_str(), config_hash(config), digest_images(images));
        if let Some(c) = self.vaegans.get(&key) {
            return Ok(c.clone());
        }
        let c = train::train_vaegan(images, config, stage)?;
        self.trained[0] += 1;
        self.vaegans.insert(key, c.clone());
        Ok(c)
    }

    fn translator(
        &mut self,
        c1: &Checkpoint,
        c2: &Checkpoint,
        paired: &[PairedSample],
        config: &TrainConfig,
    ) -> Result<Checkpoint> {
        let key = format!(
            "{}|{}|{}|{}",
            net_sums(c1),
            net_sums(c2),
            config_hash(config),
            digest_images(paired.iter().flat_map(|p| [&p.a, &p.b]))
        );
        if let Some(c) = self.translators.get(&key) {
            return Ok(c.clone());
        }
        let c = train::train_translator(c1, c2, paired, config)?;
        self.trained[1] += 1;
        self.translators.insert(key, c.clone());
        Ok(c)
    }

    fn baseline(&mut self, paired: &[PairedSample], config: &TrainConfig) -> Result<Checkpoint> {
        let key = format!(
            "{}|{}",
            config_hash(config),
            digest_images(paired.iter().flat_map(|p| [&p.a, &p.b]))
        );
        if let Some(c) = self.baselines.get(&key) {
            return Ok(c.clone());
        }
        let c = train::train_image_baseline(paired, config)?;
        self.trained[2] += 1;
        self.baselines.insert(key, c.clone());
        Ok(c)
    }
}

/// Encoder and decoder of the image-level baseline, joined by an identity
/// translator.
pub fn baseline_pipeline(ckpt: &Checkpoint) -> Result<TranslationPipeline> {
    let e = ckpt.net("encoder").map_err(train::TrainError::from)?.clone();
    let g = ckpt.net("decoder").map_err(train::TrainError::from)?.clone();
    let channels = match &e.arch {
        crate::nets::ArchDescriptor::Encoder { latent_channels, .. } => *latent_channels,
        _ => return Err(EvalError::Spec("baseline checkpoint has no encoder".into())),
    };
    let identity = ModelParams::init(crate::nets::defaults::translator(channels, 1, 0), 0)
        .map_err(train::TrainError::from)?;
    Ok(TranslationPipeline::new(e, identity, g)?)
}

pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    run_ablation_with(spec, &mut AblationCache::default(), &mut |_| {})
}

/// Runs every cell of `spec`, reusing trained networks from `cache` and
/// reporting progress lines through `progress`.
pub fn run_ablation_with(
    spec: &AblationSpec,
    cache: &mut AblationCache,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let data_seed = derive_seed(spec.data.seed, "replicate", seed);
        let d = &spec.data;
        let test = TestSet::generate(
            spec.test_images,
            d.height,
            d.width,
            d.num_classes,
            derive_seed(data_seed, "test-set", 0),
        )?;
        let vae_cfg = spec.stage_config(seed, spec.vaegan_steps, true);
        for &fraction in &spec.fractions {
            let n_paired = spec.pairs_for(fraction);
            let cells = spec.methods.iter().flat_map(|&m| {
                let modes: Vec<Option<TranslationMode>> = if m.uses_mode() {
                    spec.modes.iter().map(|&x| Some(x)).collect()
                } else {
                    vec![None]
                };
                modes.into_iter().map(move |mode| (m, mode))
            });
            let cells: Vec<_> = cells.collect();
            if n_paired == 0 {
                for (method, mode) in cells {
                    rows.push(AblationRow {
                        method,
                        paired_fraction: fraction,
                        mode,
                        seed,
                        metrics: None,
                        skipped: Some(format!(
                            "paired fraction {fraction} of {} images yields no pairs",
                            d.n1.min(d.n2)
                        )),
                    });
                }
                continue;
            }
            let bundle = build_dataset(&DataConfig {
                n_paired,
                seed: data_seed,
                ..d.clone()
            })?;
            for (method, mode) in cells {
                progress(&format!(
                    "seed {seed} fraction {fraction} ({n_paired} pairs) {} {}",
                    method.as_str(),
                    mode_str(mode)
                ));
                let pipeline = match method {
                    Method::ImagePaired => {
                        let cfg = spec.stage_config(seed, spec.baseline_steps, false);
                        baseline_pipeline(&cache.baseline(&bundle.paired, &cfg)?)?
                    }
                    _ => {
                        let (pool1, pool2) = if method == Method::FtUnpairedAndPaired {
                            (bundle.domain1_images(), bundle.domain2_images())
                        } else {
                            (
                                bundle.paired.iter().map(|p| p.a.clone()).collect(),
                                bundle.paired.iter().map(|p| p.b.clone()).collect(),
                            )
                        };
                        let c1 = cache.vaegan(&pool1, &vae_cfg, Stage::VaeganDomain1)?;
                        let c2 = cache.vaegan(&pool2, &vae_cfg, Stage::VaeganDomain2)?;
                        let mut cfg = spec.stage_config(seed, spec.translator_steps, false);
                        cfg.mode = mode.expect("feature methods carry a mode");
                        let t = cache.translator(&c1, &c2, &bundle.paired, &cfg)?;
                        TranslationPipeline::from_checkpoint(&t)?
                    }
                };
                let cell_hash = config_hash(&(method, fraction, mode, seed, spec));
                let metrics = evaluate_pipeline(&pipeline, &test)?.with_run(seed, cell_hash);
                progress(&format!(
                    "  per_pixel {:.4} per_class {:.4} iou {:.4}",
                    metrics.per_pixel_acc, metrics.per_class_acc, metrics.class_iou
                ));
                rows.push(AblationRow {
                    method,
                    paired_fraction: fraction,
                    mode,
                    seed,
                    metrics: Some(metrics),
                    skipped: None,
                });
            }
        }
    }
    let position = |r: &AblationRow| {
        (
            spec.methods.iter().position(|m| *m == r.method),
            spec.fractions.iter().position(|f| *f == r.paired_fraction),
            r.mode.and_then(|m| spec.modes.iter().position(|x| *x == m)),
            spec.seeds.iter().position(|s| *s == r.seed),
        )
    };
    rows.sort_by_key(position);
    Ok(AblationReport {
        notes: vec![
            "IT+U&P (image translation with unpaired data) is not part of this harness".into(),
            format!("per-class means average over {}", super::CLASS_AVERAGING),
        ],
        summary: AblationReport::summarize(&rows),
        spec: spec.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }

    #[test]
    fn rejects_out_of_range_fraction() {
        let spec = AblationSpec {
            fractions: vec![1.5],
            ..AblationSpec::default()
        };
        assert!(matches!(run_ablation(&spec), Err(EvalError::Spec(_))));
    }
}
