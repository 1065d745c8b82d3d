//! Scores every prediction the classifier makes on one image.

use serde::Serialize;

use crate::classifier::{label_is, Classifier, Prediction};
use crate::error::Result;
use crate::explainer::{explain, ExplainerConfig, Explanation, ExplanationMeta};
use crate::features::{detect_features, filter_by_prediction, FeatureDetection, SpecRegistry};
use crate::imaging::{Image, PixelMask};
use crate::tcs::{compute_tcs, TcsBreakdown, TcsConfig};

#[derive(Clone, Debug)]
pub struct ScoredPrediction {
    pub prediction: Prediction,
    /// Pixels the prediction refers to (its box, or the whole image).
    pub region: PixelMask,
    pub explanation: Explanation,
    /// Detections attributed to this prediction.
    pub features: Vec<FeatureDetection>,
    pub tcs: TcsBreakdown,
}

#[derive(Clone, Debug)]
pub struct ImageScore {
    pub image_id: String,
    pub predictions: Vec<ScoredPrediction>,
    /// Every detection in the image, attributed or not.
    pub detections: Vec<FeatureDetection>,
    pub detector_failures: Vec<String>,
}

#[derive(Serialize)]
pub struct PredictionReport<'a> {
    pub label: &'a str,
    pub confidence: f64,
    pub bbox: Option<[i64; 4]>,
    pub explanation: ExplanationMeta,
    pub tcs: &'a TcsBreakdown,
}

impl ImageScore {
    pub fn reports(&self) -> Vec<PredictionReport<'_>> {
        self.predictions
            .iter()
            .map(|p| PredictionReport {
                label: &p.prediction.label,
                confidence: p.prediction.confidence,
                bbox: p.prediction.bbox.map(Into::into),
                explanation: p.explanation.meta(),
                tcs: &p.tcs,
            })
            .collect()
    }
}

/// Explains and scores the predictions of `h` on `img`, optionally keeping only
/// those with `target_label`.
pub fn score_image(
    h: &dyn Classifier,
    reg: &SpecRegistry,
    img: &Image,
    target_label: Option<&str>,
    explainer: &ExplainerConfig,
    tcs: &TcsConfig,
) -> Result<ImageScore> {
    let predictions: Vec<Prediction> = h
        .classify(img)?
        .into_iter()
        .filter(|p| target_label.is_none_or(|l| label_is(p, l)))
        .collect();
    let scan = detect_features(reg, img)?;
    for failure in &scan.failures {
        log::warn!("{}: {failure}", img.id());
    }

    let mut scored = Vec::with_capacity(predictions.len());
    for prediction in predictions {
        let region = prediction.region(img.width(), img.height())?;
        let explanation = explain(h, img, &prediction, explainer)?;
        let features = filter_by_prediction(&scan.detections, &region)?;
        let breakdown = compute_tcs(&features, &explanation.mask, reg, tcs)?;
        scored.push(ScoredPrediction {
            prediction,
            region,
            explanation,
            features,
            tcs: breakdown,
        });
    }
    Ok(ImageScore {
        image_id: img.id().to_owned(),
        predictions: scored,
        detections: scan.detections,
        detector_failures: scan.failures.iter().map(ToString::to_string).collect(),
    })
}
