//! FCN-score style evaluation: translated photos are re-segmented by an
//! exact color oracle and compared with the source label maps.

mod ablation;

use serde::{Deserialize, Serialize};

use crate::data::{colorize_labels, generate_label_map, photo_color, DataError, Image, LabelMap};
use crate::infer::{InferError, TranslationPipeline};
use crate::seed::derive_seed;

pub use ablation::{
    run_ablation, run_ablation_with, AblationCache, AblationReport, AblationRow, AblationSpec,
    CellSummary, Method, ABLATION_COLUMNS,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and ground-truth lists differ in length ({pred} vs {gt})")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("item {index}: prediction is {pred:?}, ground truth is {gt:?}")]
    ShapeMismatch {
        index: usize,
        pred: [usize; 2],
        gt: [usize; 2],
    },
    #[error("class count differs between prediction ({pred}) and ground truth ({gt})")]
    ClassMismatch { pred: usize, gt: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("test set has no ground-truth labels")]
    MissingLabels,
    #[error("invalid ablation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Per-pixel nearest base photo color among the first `num_classes` classes.
/// Ties go to the lower class index.
pub fn oracle_segment(photo: &Image, num_classes: usize) -> LabelMap {
    let (h, w) = (photo.height(), photo.width());
    let palette: Vec<[f32; 3]> = (0..num_classes).map(photo_color).collect();
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = photo.pixel(y, x);
            let mut best = (0, f32::INFINITY);
            for (k, c) in palette.iter().enumerate() {
                let d: f32 = (0..3).map(|i| (p[i] - c[i]) * (p[i] - c[i])).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            pixels.push(best.0 as u8);
        }
    }
    LabelMap::new(h, w, num_classes, pixels).expect("image dimensions are valid")
}

/// How per-class means treat classes absent from the ground truth.
pub const CLASS_AVERAGING: &str = "classes present in ground truth";

/// Scores of one evaluation plus the confusion matrix they derive from.
/// `confusion[gt][pred]` counts pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_pixel_acc: f64,
    pub per_class_acc: f64,
    pub class_iou: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_images: usize,
    pub seed: u64,
    pub config_hash: String,
    pub class_averaging: String,
}

impl MetricsReport {
    /// Scores from a confusion matrix; the means skip classes with no
    /// ground-truth pixels.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, n_images: usize) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let mut acc_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut present = 0usize;
        for i in 0..k {
            let row: u64 = confusion[i].iter().sum();
            if row == 0 {
                continue;
            }
            let col: u64 = (0..k).map(|j| confusion[j][i]).sum();
            let tp = confusion[i][i] as f64;
            acc_sum += tp / row as f64;
            iou_sum += tp / ((row + col) as f64 - tp);
            present += 1;
        }
        let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        Self {
            per_pixel_acc: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            per_class_acc: mean(acc_sum),
            class_iou: mean(iou_sum),
            confusion,
            n_images,
            seed: 0,
            config_hash: String::new(),
            class_averaging: CLASS_AVERAGING.to_string(),
        }
    }

    pub fn with_run(mut self, seed: u64, config_hash: impl Into<String>) -> Self {
        self.seed = seed;
        self.config_hash = config_hash.into();
        self
    }

    pub fn scores(&self) -> [f64; 3] {
        [self.per_pixel_acc, self.per_class_acc, self.class_iou]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Accumulates one global confusion matrix over all images.
pub fn fcn_scores(pred: &[LabelMap], gt: &[LabelMap]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let Some(first) = gt.first() else {
        return Err(EvalError::Empty);
    };
    let k = first.num_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    for (index, (p, g)) in pred.iter().zip(gt).enumerate() {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(EvalError::ShapeMismatch {
                index,
                pred: [p.height(), p.width()],
                gt: [g.height(), g.width()],
            });
        }
        if p.num_classes() != k || g.num_classes() != k {
            return Err(EvalError::ClassMismatch {
                pred: p.num_classes(),
                gt: g.num_classes(),
            });
        }
        for (&a, &b) in p.pixels().iter().zip(g.pixels()) {
            confusion[b as usize][a as usize] += 1;
        }
    }
    Ok(MetricsReport::from_confusion(confusion, gt.len()))
}

/// Anything that maps a domain-1 image to a domain-2 image. Lets tests
/// evaluate stand-in translators.
pub trait ImageTranslator {
    fn translate_all(&self, images: &[Image]) -> Result<Vec<Image>>;
}

impl ImageTranslator for TranslationPipeline {
    fn translate_all(&self, images: &[Image]) -> Result<Vec<Image>> {
        Ok(self.translate_batch(images)?)
    }
}

impl<F: Fn(&Image) -> Image> ImageTranslator for F {
    fn translate_all(&self, images: &[Image]) -> Result<Vec<Image>> {
        Ok(images.iter().map(self).collect())
    }
}

/// Held-out domain-1 images with their label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl TestSet {
    /// `n` fresh label maps from a stream disjoint from the training data.
    pub fn generate(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let labels = (0..n)
            .map(|i| generate_label_map(derive_seed(seed, "test-label", i as u64), width, height, num_classes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            images: labels.iter().map(colorize_labels).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Translates every test image, segments the output and scores it.
pub fn evaluate_pipeline(p: &impl ImageTranslator, test: &TestSet) -> Result<MetricsReport> {
    if test.labels.is_empty() && !test.images.is_empty() {
        return Err(EvalError::MissingLabels);
    }
    if test.labels.len() != test.images.len() {
        return Err(EvalError::LengthMismatch {
            pred: test.images.len(),
            gt: test.labels.len(),
        });
    }
    let k = test.labels.first().ok_or(EvalError::Empty)?.num_classes();
    let outputs = p.translate_all(&test.images)?;
    let pred: Vec<LabelMap> = outputs.iter().map(|o| oracle_segment(o, k)).collect();
    fcn_scores(&pred, &test.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_photo;

    /// 8x8 map whose pixels repeat `pattern` row-major.
    fn map(pattern: &[u8], k: usize) -> LabelMap {
        let pixels = pattern.iter().copied().cycle().take(64).collect();
        LabelMap::new(8, 8, k, pixels).unwrap()
    }

    #[test]
    fn uniform_base_color_segments_to_its_class() {
        for k in 0..4 {
            let im = Image::filled(8, 8, photo_color(k)).unwrap();
            assert!(oracle_segment(&im, 4).pixels().iter().all(|&p| p as usize == k));
        }
    }

    #[test]
    fn equidistant_pixel_goes_to_lower_class() {
        let (a, b) = (photo_color(0), photo_color(1));
        let mid: [f32; 3] = std::array::from_fn(|i| (a[i] + b[i]) / 2.0);
        // The midpoint must be exactly representable for the tie to be exact.
        assert!((0..3).all(|i| (mid[i] - a[i]).abs() == (b[i] - mid[i]).abs()));
        let im = Image::filled(8, 8, mid).unwrap();
        assert!(oracle_segment(&im, 4).pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn oracle_inverts_rendering() {
        for i in 0..20 {
            let l = generate_label_map(i, 32, 32, 6).unwrap();
            assert_eq!(oracle_segment(&render_photo(&l, i + 100), 6), l);
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let l = generate_label_map(3, 16, 16, 4).unwrap();
        let r = fcn_scores(&[l.clone()], &[l]).unwrap();
        assert_eq!(r.scores(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_computed_confusion() {
        let r = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]], 1);
        assert_eq!(r.scores(), [0.75, 0.75, 0.6]);
        // The same proportions over 64 pixels.
        // gt:   0 0 0 0 1 1 1 1
        // pred: 0 0 0 1 1 1 1 0
        let gt = map(&[0, 0, 0, 0, 1, 1, 1, 1], 2);
        let pred = map(&[0, 0, 0, 1, 1, 1, 1, 0], 2);
        let r = fcn_scores(&[pred], &[gt]).unwrap();
        assert_eq!(r.confusion, vec![vec![24, 8], vec![8, 24]]);
        assert_eq!(r.scores(), [0.75, 0.75, 0.6]);
    }

    #[test]
    fn absent_classes_are_skipped_in_means() {
        let gt = map(&[0], 3);
        let pred = map(&[0, 0, 0, 0, 0, 0, 2, 2], 3);
        let r = fcn_scores(&[pred], &[gt]).unwrap();
        assert_eq!(r.per_class_acc, 0.75);
        assert_eq!(r.class_iou, 0.75);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let a = map(&[0], 2);
        let b = LabelMap::new(8, 16, 2, vec![0; 128]).unwrap();
        assert!(matches!(fcn_scores(&[a.clone()], &[]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(fcn_scores(&[a], &[b]), Err(EvalError::ShapeMismatch { index: 0, .. })));
    }

    #[test]
    fn ground_truth_photos_evaluate_perfectly() {
        let test = TestSet::generate(5, 16, 16, 4, 1).unwrap();
        let truth: Vec<Image> = test.labels.iter().map(|l| render_photo(l, 7)).collect();
        let lookup = |x: &Image| {
            let i = test.images.iter().position(|y| y == x).unwrap();
            truth[i].clone()
        };
        let r = evaluate_pipeline(&lookup, &test).unwrap();
        assert_eq!(r.scores(), [1.0, 1.0, 1.0]);
        assert_eq!(r.n_images, 5);
    }
}
