//! Black-box access to the monitored classifier.
//!
//! Every classifier answers with a list of predictions: detectors return one entry
//! per object with a box, single-label classifiers return at most one entry and no
//! box. Besides the subprocess bridge, a few deterministic synthetic classifiers
//! live here so the rest of the pipeline can be exercised without a model.

use std::fmt;
use std::hash::Hasher;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{box_to_mask, connected_components, iou, BBox, Image, PixelMask};
use crate::protocol::{pixel_box, SubprocessClient};

/// IoU a detector's box must reach against the original box to count as the same object.
pub const SAME_OBJECT_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
    pub bbox: Option<BBox>,
}

impl Prediction {
    pub fn new(label: impl Into<String>, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidConfig(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            label: label.into(),
            confidence,
            bbox: None,
        })
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    /// Pixels the prediction refers to: its box, or the whole raster for label-only output.
    pub fn region(&self, width: usize, height: usize) -> Result<PixelMask> {
        match self.bbox {
            Some(b) => box_to_mask(b, width, height),
            None => Ok(PixelMask::full(width, height)),
        }
    }
}

fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Labels compared after trimming and lowercasing.
pub fn label_match(a: &Prediction, b: &Prediction) -> bool {
    normalize_label(&a.label) == normalize_label(&b.label)
}

pub fn label_is(p: &Prediction, label: &str) -> bool {
    normalize_label(&p.label) == normalize_label(label)
}

/// Whether `candidate` reproduces `original`: same label, and for boxed originals a
/// box overlapping it with IoU of at least [`SAME_OBJECT_IOU`].
pub fn same_prediction(original: &Prediction, candidate: &Prediction) -> bool {
    if !label_match(original, candidate) {
        return false;
    }
    match (original.bbox, candidate.bbox) {
        (Some(a), Some(b)) => iou(&a, &b) >= SAME_OBJECT_IOU,
        (Some(_), None) => false,
        (None, _) => true,
    }
}

pub trait Classifier: Send + Sync {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>>;

    fn describe(&self) -> String;
}

impl<C: Classifier + ?Sized> Classifier for Arc<C> {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        (**self).classify(img)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

pub fn classify(h: &dyn Classifier, img: &Image) -> Result<Vec<Prediction>> {
    h.classify(img)
}

/// Classifies every image, possibly in parallel; output order follows input order.
/// The first failing index (in input order) fails the whole batch.
pub fn classify_batch(h: &dyn Classifier, imgs: &[Image]) -> Result<Vec<Vec<Prediction>>> {
    let results: Vec<Result<Vec<Prediction>>> = imgs.par_iter().map(|img| h.classify(img)).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Thresholded connected components of bright pixels, one boxed prediction per blob.
///
/// A pixel is bright when the mean of its channels reaches `threshold`. Confidence is
/// `0.5 + 0.5 · mean_luminance / 255` over the blob, so a pure white blob scores 1.0.
#[derive(Clone, Debug)]
pub struct BrightBlobClassifier {
    pub label: String,
    pub threshold: u8,
    pub min_area: usize,
}

impl Default for BrightBlobClassifier {
    fn default() -> Self {
        Self {
            label: "person".into(),
            threshold: 128,
            min_area: 4,
        }
    }
}

impl Classifier for BrightBlobClassifier {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        let blobs = connected_components(img.width(), img.height(), |x, y| {
            img.luminance(x, y) >= self.threshold
        });
        let mut out = Vec::new();
        for blob in blobs.iter().filter(|b| b.count() >= self.min_area) {
            let w = img.width();
            let lum: u64 = blob
                .iter_set()
                .map(|k| img.luminance(k % w, k / w) as u64)
                .sum();
            let mean = lum as f64 / blob.count() as f64;
            let confidence = (0.5 + 0.5 * mean / 255.0).min(1.0);
            let bbox = blob.bounding_box().expect("non-empty blob");
            out.push(Prediction::new(self.label.clone(), confidence)?.with_bbox(bbox));
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("bright-blob:{}", self.label)
    }
}

/// Label-only classifier naming the quadrant that holds the brightest pixel.
///
/// Ties go to the first pixel in row-major order. Confidence is the pixel's
/// luminance over 255. An all-black image yields no prediction.
#[derive(Clone, Debug, Default)]
pub struct QuadrantClassifier;

impl QuadrantClassifier {
    pub const LABELS: [&'static str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

    pub fn quadrant_of(x: usize, y: usize, width: usize, height: usize) -> usize {
        let right = 2 * x >= width;
        let bottom = 2 * y >= height;
        (bottom as usize) * 2 + right as usize
    }
}

impl Classifier for QuadrantClassifier {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        let mut best = (0u8, 0usize, 0usize);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let lum = img.luminance(x, y);
                if lum > best.0 {
                    best = (lum, x, y);
                }
            }
        }
        let (lum, x, y) = best;
        if lum == 0 {
            return Ok(Vec::new());
        }
        let q = Self::quadrant_of(x, y, img.width(), img.height());
        Ok(vec![Prediction::new(Self::LABELS[q], lum as f64 / 255.0)?])
    }

    fn describe(&self) -> String {
        "quadrant".into()
    }
}

/// Returns the same predictions for every input.
#[derive(Clone, Debug)]
pub struct ConstantClassifier {
    pub predictions: Vec<Prediction>,
}

impl Classifier for ConstantClassifier {
    fn classify(&self, _img: &Image) -> Result<Vec<Prediction>> {
        Ok(self.predictions.clone())
    }

    fn describe(&self) -> String {
        "constant".into()
    }
}

/// Wraps a classifier and relabels each prediction with probability `flip_probability`.
///
/// The random stream is seeded from `seed` and the image bytes, so the wrapper stays a
/// pure function of its input.
pub struct NoisyClassifier<C> {
    pub inner: C,
    pub flip_probability: f64,
    pub flipped_label: String,
    pub seed: u64,
}

impl<C: Classifier> Classifier for NoisyClassifier<C> {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        hasher.write_u64(self.seed);
        hasher.write_usize(img.width());
        hasher.write_usize(img.height());
        hasher.write(img.data());
        let mut rng = ChaCha8Rng::seed_from_u64(hasher.finish());
        let mut preds = self.inner.classify(img)?;
        for p in &mut preds {
            if rng.gen_bool(self.flip_probability.clamp(0.0, 1.0)) {
                p.label = self.flipped_label.clone();
            }
        }
        Ok(preds)
    }

    fn describe(&self) -> String {
        format!("noisy({}, p={})", self.inner.describe(), self.flip_probability)
    }
}

/// Counts classify calls made through it.
pub struct CountingClassifier<C> {
    pub inner: C,
    calls: AtomicUsize,
}

impl<C> CountingClassifier<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: Classifier> Classifier for CountingClassifier<C> {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(img)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}

/// A model process speaking the line protocol.
#[derive(Debug)]
pub struct SubprocessClassifier {
    client: SubprocessClient,
}

impl SubprocessClassifier {
    pub fn spawn(command: &str) -> Result<Self> {
        Ok(Self {
            client: SubprocessClient::spawn(command)?,
        })
    }
}

impl Classifier for SubprocessClassifier {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        let resp = self.client.call(img, None)?;
        resp.predictions
            .into_iter()
            .map(|wp| {
                let mut p = Prediction::new(wp.label, wp.confidence)
                    .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
                if let Some(raw) = wp.bbox {
                    let b = pixel_box(raw)
                        .ok()
                        .and_then(|b| b.clip(img.width(), img.height()))
                        .ok_or_else(|| {
                            Error::BackendUnavailable(format!("bbox {raw:?} outside the image"))
                        })?;
                    p = p.with_bbox(b);
                }
                Ok(p)
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!("subprocess:{}", self.client.command())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    InProcess,
    Subprocess,
}

/// A classifier built from a textual descriptor.
///
/// Accepted descriptors: `bright-blob`, `bright-blob:<label>`, `quadrant`,
/// `subprocess:<command line>`.
#[derive(Clone)]
pub struct ClassifierHandle {
    descriptor: String,
    kind: ClassifierKind,
    inner: Arc<dyn Classifier>,
}

impl fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("descriptor", &self.descriptor)
            .field("kind", &self.kind)
            .finish()
    }
}

impl ClassifierHandle {
    pub fn from_descriptor(descriptor: &str) -> Result<Self> {
        let descriptor = descriptor.trim();
        let (name, arg) = match descriptor.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (descriptor, None),
        };
        let (kind, inner): (_, Arc<dyn Classifier>) = match (name, arg) {
            ("bright-blob", label) => {
                let mut c = BrightBlobClassifier::default();
                if let Some(l) = label.filter(|l| !l.is_empty()) {
                    c.label = l.to_owned();
                }
                (ClassifierKind::InProcess, Arc::new(c))
            }
            ("quadrant", None) => (ClassifierKind::InProcess, Arc::new(QuadrantClassifier)),
            ("subprocess", Some(cmd)) if !cmd.trim().is_empty() => (
                ClassifierKind::Subprocess,
                Arc::new(SubprocessClassifier::spawn(cmd)?),
            ),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown classifier descriptor `{descriptor}`"
                )))
            }
        };
        Ok(Self {
            descriptor: descriptor.to_owned(),
            kind,
            inner,
        })
    }

    pub fn from_classifier(descriptor: impl Into<String>, classifier: Arc<dyn Classifier>) -> Self {
        Self {
            descriptor: descriptor.into(),
            kind: ClassifierKind::InProcess,
            inner: classifier,
        }
    }

    /// Relabels predictions with the given probability (see [`NoisyClassifier`]).
    pub fn with_noise(self, flip_probability: f64, seed: u64) -> Self {
        let descriptor = format!("{}+noise({flip_probability})", self.descriptor);
        let kind = self.kind;
        Self {
            descriptor,
            kind,
            inner: Arc::new(NoisyClassifier {
                inner: self.inner,
                flip_probability,
                flipped_label: "noise".into(),
                seed,
            }),
        }
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }
}

impl Classifier for ClassifierHandle {
    fn classify(&self, img: &Image) -> Result<Vec<Prediction>> {
        self.inner.classify(img)
    }

    fn describe(&self) -> String {
        self.descriptor.clone()
    }
}
