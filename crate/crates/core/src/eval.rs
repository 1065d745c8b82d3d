//! Evaluation of TCS-based acceptance against ground-truth annotations.
//!
//! Each prediction of the target label is counted twice. Against ground truth it is
//! a TP when it matches an annotation and an FP otherwise; unmatched annotations are
//! FNs. Under TCS it is a TP when its score reaches the threshold τ and an FP when it
//! falls short, while groups of nearby feature detections that no prediction covers
//! are the TCS FNs. The mutual-agreement fractions compare the two views per outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{label_is, Classifier, Prediction};
use crate::error::{Error, Result};
use crate::explainer::{ExplainerConfig, ExplanationMeta};
use crate::features::{FeatureDetection, SpecRegistry};
use crate::imaging::{iou, BBox, Image, PixelMask};
use crate::pipeline::score_image;
use crate::protocol::pixel_box;
use crate::tcs::{compute_tcs, TcsBreakdown, TcsConfig};

/// Fraction of an orphan feature group's pixels that must fall inside an unmatched
/// annotation for the two misses to count as the same object.
pub const FN_AGREEMENT_COVERAGE: f64 = 0.5;

// ---------------------------------------------------------------------------
// dataset

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
enum RawId {
    Int(i64),
    Str(String),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Int(i) => i.to_string(),
            RawId::Str(s) => s,
        }
    }
}

#[derive(Deserialize)]
struct RawImage {
    id: RawId,
    width: usize,
    height: usize,
    file_name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: RawId,
    category: String,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawDataset {
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annotation {
    pub image_id: String,
    pub category: String,
    pub bbox: BBox,
}

/// Images and their box annotations, with boxes clipped to their image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    pub name: String,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
}

impl GroundTruthSet {
    pub fn new(name: impl Into<String>, images: Vec<ImageEntry>, annotations: Vec<Annotation>) -> Result<Self> {
        let mut set = Self {
            name: name.into(),
            images,
            annotations,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&mut self) -> Result<()> {
        let mut dims = BTreeMap::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidDataset(format!("image `{}` has zero extent", img.id)));
            }
            if dims.insert(img.id.clone(), (img.width, img.height)).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate image id `{}`", img.id)));
            }
        }
        for ann in &mut self.annotations {
            let &(w, h) = dims.get(&ann.image_id).ok_or_else(|| {
                Error::InvalidDataset(format!("annotation references unknown image `{}`", ann.image_id))
            })?;
            ann.bbox = ann.bbox.clip(w, h).ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "annotation box {:?} lies outside image `{}`",
                    ann.bbox, ann.image_id
                ))
            })?;
        }
        Ok(())
    }

    /// Parses the COCO-style subset
    /// `{images: [{id, width, height, file_name}], annotations: [{image_id, category, bbox}]}`.
    pub fn from_json(name: impl Into<String>, json: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(json).map_err(|e| Error::InvalidDataset(e.to_string()))?;
        let images = raw
            .images
            .into_iter()
            .map(|i| ImageEntry {
                id: i.id.into_string(),
                width: i.width,
                height: i.height,
                file_name: i.file_name,
            })
            .collect();
        let annotations = raw
            .annotations
            .into_iter()
            .map(|a| {
                Ok(Annotation {
                    image_id: a.image_id.into_string(),
                    category: a.category,
                    bbox: pixel_box(a.bbox).map_err(|e| Error::InvalidDataset(e.to_string()))?,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(name, images, annotations)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_json(name, &text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "images": self.images.iter().map(|i| serde_json::json!({
                "id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name,
            })).collect::<Vec<_>>(),
            "annotations": self.annotations.iter().map(|a| serde_json::json!({
                "image_id": a.image_id, "category": a.category, "bbox": <[i64; 4]>::from(a.bbox),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn boxes_for(&self, image_id: &str, label: &str) -> Vec<BBox> {
        let probe = Prediction {
            label: label.to_owned(),
            confidence: 1.0,
            bbox: None,
        };
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id && label_is(&probe, &a.category))
            .map(|a| a.bbox)
            .collect()
    }
}

/// Loads dataset images from files relative to `root`.
pub fn file_loader(root: impl Into<PathBuf>) -> impl Fn(&ImageEntry) -> Result<Image> + Sync {
    let root = root.into();
    move |entry: &ImageEntry| {
        let img = Image::open(root.join(&entry.file_name))?.with_id(entry.id.clone());
        if img.width() != entry.width || img.height() != entry.height {
            return Err(Error::InvalidDataset(format!(
                "image `{}` is {}x{}, dataset says {}x{}",
                entry.id,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    }
}

// ---------------------------------------------------------------------------
// counting

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// One-to-one assignment of predictions to ground-truth boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    /// Matched ground-truth index per prediction.
    pub pred_to_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub counts: Counts,
}

/// Greedy matching: predictions by descending confidence (ties by input order) each
/// take the unmatched box of highest IoU, provided it reaches `iou_min`.
/// Label-only predictions are treated as covering the whole image of `frame`.
pub fn match_predictions_gt(preds: &[Prediction], gts: &[BBox], iou_min: f64, frame: Option<BBox>) -> Matching {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut pred_to_gt = vec![None; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in order {
        let Some(pbox) = preds[i].bbox.or(frame) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for (g, gbox) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = iou(&pbox, gbox);
            if v >= iou_min && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            pred_to_gt[i] = Some(g);
        }
    }
    let tp = pred_to_gt.iter().filter(|m| m.is_some()).count();
    Matching {
        counts: Counts {
            tp,
            fp: preds.len() - tp,
            fn_: gts.len() - tp,
        },
        pred_to_gt,
        gt_matched,
    }
}

/// Nearby feature detections grouped into one object hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCluster {
    pub members: Vec<usize>,
    pub spec_ids: BTreeSet<String>,
    pub region: PixelMask,
}

/// Groups detections whose bounding boxes lie within `margin` pixels of each other
/// (0 = touching or overlapping), transitively.
pub fn cluster_features(dets: &[FeatureDetection], margin: i64) -> Vec<FeatureCluster> {
    let boxes: Vec<Option<BBox>> = dets.iter().map(|d| d.region.bounding_box()).collect();
    let mut parent: Vec<usize> = (0..dets.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..dets.len() {
        for j in i + 1..dets.len() {
            if let (Some(a), Some(b)) = (boxes[i], boxes[j]) {
                if a.gap(&b) <= margin {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dets.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups
        .into_values()
        .map(|members| {
            let mut region = dets[members[0]].region.clone();
            for &m in &members[1..] {
                region = region.union(&dets[m].region).expect("detections share image dimensions");
            }
            FeatureCluster {
                spec_ids: members.iter().map(|&m| dets[m].spec_id.clone()).collect(),
                members,
                region,
            }
        })
        .collect()
}

/// Outcome of TCS-based counting on one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcsDecision {
    pub accepted: Vec<bool>,
    /// Indices of clusters counted as TCS false negatives.
    pub orphans: Vec<usize>,
    pub counts: Counts,
}

/// A prediction's region and score, as seen by [`classify_by_tcs`].
pub struct ScoredRegion<'a> {
    pub region: &'a PixelMask,
    pub tcs: f64,
}

/// Predictions scoring at least `tau` are TCS-TP, the rest TCS-FP. A cluster with
/// features of two or more distinct specifications that shares no pixel with any
/// prediction region is a TCS-FN.
pub fn classify_by_tcs(preds: &[ScoredRegion<'_>], clusters: &[FeatureCluster], tau: f64) -> Result<TcsDecision> {
    let accepted: Vec<bool> = preds.iter().map(|p| p.tcs >= tau).collect();
    let mut orphans = Vec::new();
    'clusters: for (ci, c) in clusters.iter().enumerate() {
        if c.spec_ids.len() < 2 {
            continue;
        }
        for p in preds {
            if c.region.intersection_count(p.region)? > 0 {
                continue 'clusters;
            }
        }
        orphans.push(ci);
    }
    let tp = accepted.iter().filter(|&&a| a).count();
    Ok(TcsDecision {
        counts: Counts {
            tp,
            fp: accepted.len() - tp,
            fn_: orphans.len(),
        },
        accepted,
        orphans,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and F1, with every 0/0 taken as 0.
pub fn prf1(c: Counts) -> Prf1 {
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    Prf1 {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// Counts for one image at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub gt_matches: Vec<Option<usize>>,
    pub counts_gt: Counts,
    pub counts_tcs: Counts,
    pub agreement: Counts,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementFractions {
    pub frac_tp: Option<f64>,
    pub frac_fp: Option<f64>,
    pub frac_fn: Option<f64>,
}

/// `Σ both / Σ gt` per outcome; `None` where the ground-truth count is zero.
pub fn agreement_fractions(records: &[EvalRecord]) -> AgreementFractions {
    let mut gt = Counts::default();
    let mut both = Counts::default();
    for r in records {
        gt += r.counts_gt;
        both += r.agreement;
    }
    let frac = |b: usize, g: usize| (g > 0).then(|| b as f64 / g as f64);
    AgreementFractions {
        frac_tp: frac(both.tp, gt.tp),
        frac_fp: frac(both.fp, gt.fp),
        frac_fn: frac(both.fn_, gt.fn_),
    }
}

// ---------------------------------------------------------------------------
// evaluation run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub target_label: String,
    pub iou_min: f64,
    /// Predictions and annotations with a smaller box area are ignored; 0 disables.
    pub min_box_area: i64,
    /// Feature detections this close (in pixels) belong to the same object hypothesis.
    pub cluster_margin: i64,
    pub tau_grid: Vec<f64>,
    /// Also score with the first 1, 2, … registered specifications.
    pub incremental_features: bool,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target_label: "person".into(),
            iou_min: 0.5,
            min_box_area: 0,
            cluster_margin: 12,
            tau_grid: (0..=10).map(|i| i as f64 * 10.0).collect(),
            incremental_features: false,
            jobs: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tau_grid.is_empty() {
            return Err(Error::InvalidConfig("tau grid is empty".into()));
        }
        if self.tau_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidConfig("tau values must be finite and non-negative".into()));
        }
        if !(self.iou_min > 0.0 && self.iou_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("iou_min must lie in (0, 1], got {}", self.iou_min)));
        }
        if self.cluster_margin < 0 {
            return Err(Error::InvalidConfig("cluster_margin must be non-negative".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::InvalidConfig("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything that determines an evaluation's numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub explainer: ExplainerConfig,
    pub tcs: TcsConfig,
    pub eval: EvalOptions,
}

#[derive(Clone, Debug)]
struct PredictionEvidence {
    prediction: Prediction,
    region: PixelMask,
    explanation_mask: PixelMask,
    explanation: ExplanationMeta,
    features: Vec<FeatureDetection>,
}

/// Everything gathered for one image before any threshold is applied.
#[derive(Clone, Debug)]
struct ImageEvidence {
    image_id: String,
    width: usize,
    height: usize,
    predictions: Vec<PredictionEvidence>,
    detections: Vec<FeatureDetection>,
    gt_boxes: Vec<BBox>,
    matching: Matching,
}

fn large_enough(b: Option<BBox>, min_area: i64) -> bool {
    min_area <= 0 || b.is_none_or(|b| b.area() >= min_area)
}

fn gather(
    entry: &ImageEntry,
    img: &Image,
    dataset: &GroundTruthSet,
    h: &dyn Classifier,
    reg: &SpecRegistry,
    cfg: &EvalConfig,
) -> Result<ImageEvidence> {
    let opts = &cfg.eval;
    let score = score_image(h, reg, img, Some(&opts.target_label), &cfg.explainer, &cfg.tcs)?;
    let predictions: Vec<PredictionEvidence> = score
        .predictions
        .into_iter()
        .filter(|p| large_enough(p.prediction.bbox, opts.min_box_area))
        .map(|p| PredictionEvidence {
            explanation: p.explanation.meta(),
            explanation_mask: p.explanation.mask,
            prediction: p.prediction,
            region: p.region,
            features: p.features,
        })
        .collect();
    let gt_boxes: Vec<BBox> = dataset
        .boxes_for(&entry.id, &opts.target_label)
        .into_iter()
        .filter(|b| large_enough(Some(*b), opts.min_box_area))
        .collect();
    let preds: Vec<Prediction> = predictions.iter().map(|p| p.prediction.clone()).collect();
    let frame = BBox::new(0, 0, img.width() as i64, img.height() as i64).ok();
    let matching = match_predictions_gt(&preds, &gt_boxes, opts.iou_min, frame);
    Ok(ImageEvidence {
        image_id: entry.id.clone(),
        width: img.width(),
        height: img.height(),
        predictions,
        detections: score.detections,
        gt_boxes,
        matching,
    })
}

/// Per-prediction scores and clusters of one image under one specification subset.
struct SubsetView {
    breakdowns: Vec<TcsBreakdown>,
    clusters: Vec<FeatureCluster>,
}

fn subset_view(ev: &ImageEvidence, reg: &SpecRegistry, cfg: &EvalConfig) -> Result<SubsetView> {
    let keep = |d: &&FeatureDetection| reg.get(&d.spec_id).is_some();
    let breakdowns = ev
        .predictions
        .iter()
        .map(|p| {
            let feats: Vec<FeatureDetection> = p.features.iter().filter(keep).cloned().collect();
            compute_tcs(&feats, &p.explanation_mask, reg, &cfg.tcs)
        })
        .collect::<Result<_>>()?;
    let dets: Vec<FeatureDetection> = ev.detections.iter().filter(keep).cloned().collect();
    Ok(SubsetView {
        breakdowns,
        clusters: cluster_features(&dets, cfg.eval.cluster_margin),
    })
}

fn record_at(ev: &ImageEvidence, view: &SubsetView, tau: f64) -> Result<EvalRecord> {
    let scored: Vec<ScoredRegion<'_>> = ev
        .predictions
        .iter()
        .zip(&view.breakdowns)
        .map(|(p, b)| ScoredRegion {
            region: &p.region,
            tcs: b.tcs,
        })
        .collect();
    let decision = classify_by_tcs(&scored, &view.clusters, tau)?;

    let mut agreement = Counts::default();
    for (m, &acc) in ev.matching.pred_to_gt.iter().zip(&decision.accepted) {
        match (m.is_some(), acc) {
            (true, true) => agreement.tp += 1,
            (false, false) => agreement.fp += 1,
            _ => {}
        }
    }
    let mut used = vec![false; decision.orphans.len()];
    for (g, gbox) in ev.gt_boxes.iter().enumerate() {
        if ev.matching.gt_matched[g] {
            continue;
        }
        let gmask = gbox.to_mask(ev.width, ev.height)?;
        for (k, &ci) in decision.orphans.iter().enumerate() {
            let region = &view.clusters[ci].region;
            let inside = region.intersection_count(&gmask)? as f64 / region.count() as f64;
            if !used[k] && inside >= FN_AGREEMENT_COVERAGE {
                used[k] = true;
                agreement.fn_ += 1;
                break;
            }
        }
    }
    Ok(EvalRecord {
        image_id: ev.image_id.clone(),
        gt_matches: ev.matching.pred_to_gt.clone(),
        counts_gt: ev.matching.counts,
        counts_tcs: decision.counts,
        agreement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub precision_gt: f64,
    pub recall_gt: f64,
    pub f1_gt: f64,
    pub precision_tcs: f64,
    pub recall_tcs: f64,
    pub f1_tcs: f64,
    pub frac_tp: Option<f64>,
    pub frac_fp: Option<f64>,
    pub frac_fn: Option<f64>,
    pub counts_gt: Counts,
    pub counts_tcs: Counts,
    pub agreement: Counts,
}

/// Threshold sweep under one set of specifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub specs: Vec<String>,
    pub rows: Vec<ThresholdRow>,
}

pub const CSV_HEADER: &str = "tau,p_gt,r_gt,f1_gt,p_tcs,r_tcs,f1_tcs,frac_tp,frac_fp,frac_fn";

impl ReportSection {
    pub fn row(&self, tau: f64) -> Option<&ThresholdRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }

    /// One line per τ after the header. `preamble` lines are emitted first as `#` comments.
    pub fn to_csv(&self, preamble: &[String]) -> String {
        let mut out = String::new();
        for line in preamble {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(|| "null".to_owned(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                r.tau,
                r.precision_gt,
                r.recall_gt,
                r.f1_gt,
                r.precision_tcs,
                r.recall_tcs,
                r.f1_tcs,
                opt(r.frac_tp),
                opt(r.frac_fp),
                opt(r.frac_fn)
            );
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageReport {
    pub image_id: String,
    pub gt_boxes: Vec<[i64; 4]>,
    pub predictions: Vec<PredictionSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictionSummary {
    pub label: String,
    pub confidence: f64,
    pub bbox: Option<[i64; 4]>,
    pub gt_match: Option<usize>,
    pub explanation: ExplanationMeta,
    pub tcs: TcsBreakdown,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub seed: u64,
    pub config: EvalConfig,
    pub images_evaluated: usize,
    pub images_failed: usize,
    pub failures: Vec<String>,
    /// The last section always uses the full registry.
    pub sections: Vec<ReportSection>,
    pub images: Vec<ImageReport>,
}

impl MetricsReport {
    pub fn full(&self) -> &ReportSection {
        self.sections.last().expect("at least one section")
    }
}

/// Sweeps `records_by_tau` into rows.
fn section(specs: Vec<String>, taus: &[f64], per_tau: Vec<Vec<EvalRecord>>) -> ReportSection {
    let rows = taus
        .iter()
        .zip(per_tau)
        .map(|(&tau, records)| {
            let mut gt = Counts::default();
            let mut tcs = Counts::default();
            let mut both = Counts::default();
            for r in &records {
                gt += r.counts_gt;
                tcs += r.counts_tcs;
                both += r.agreement;
            }
            let (g, t) = (prf1(gt), prf1(tcs));
            let fr = agreement_fractions(&records);
            ThresholdRow {
                tau,
                precision_gt: g.precision,
                recall_gt: g.recall,
                f1_gt: g.f1,
                precision_tcs: t.precision,
                recall_tcs: t.recall,
                f1_tcs: t.f1,
                frac_tp: fr.frac_tp,
                frac_fp: fr.frac_fp,
                frac_fn: fr.frac_fn,
                counts_gt: gt,
                counts_tcs: tcs,
                agreement: both,
            }
        })
        .collect();
    ReportSection { specs, rows }
}

/// Runs the full pipeline over a dataset and sweeps the τ grid.
///
/// Images that fail are logged and left out; more than 10% failures abort the run.
pub fn run_evaluation<L>(
    dataset: &GroundTruthSet,
    load: L,
    h: &dyn Classifier,
    reg: &SpecRegistry,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport>
where
    L: Fn(&ImageEntry) -> Result<Image> + Sync,
{
    cfg.eval.validate()?;
    cfg.explainer.validate()?;
    cfg.tcs.validate()?;
    if reg.is_empty() {
        return Err(Error::InvalidConfig("registry has no feature specifications".into()));
    }
    let mut cfg = cfg.clone();
    cfg.explainer.mutation.seed = seed;
    let mut taus = cfg.eval.tau_grid.clone();
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let work = || -> Vec<Result<ImageEvidence>> {
        dataset
            .images
            .par_iter()
            .map(|entry| {
                let img = load(entry)?;
                gather(entry, &img, dataset, h, reg, &cfg)
            })
            .collect()
    };
    let gathered = match cfg.eval.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut evidence = Vec::new();
    let mut failures = Vec::new();
    for (entry, r) in dataset.images.iter().zip(gathered) {
        match r {
            Ok(ev) => evidence.push(ev),
            Err(e) => {
                log::warn!("skipping image `{}`: {e}", entry.id);
                failures.push(format!("{}: {e}", entry.id));
            }
        }
    }
    let total = dataset.images.len();
    if failures.len() * 10 > total {
        return Err(Error::EvaluationAborted {
            failed: failures.len(),
            total,
        });
    }

    let subsets: Vec<SpecRegistry> = if cfg.eval.incremental_features {
        (1..=reg.len()).map(|n| reg.prefix(n)).collect()
    } else {
        vec![reg.clone()]
    };
    let mut sections = Vec::new();
    let mut full_views = Vec::new();
    for subset in &subsets {
        let views: Vec<SubsetView> = evidence
            .iter()
            .map(|ev| subset_view(ev, subset, &cfg))
            .collect::<Result<_>>()?;
        let per_tau = taus
            .iter()
            .map(|&tau| {
                evidence
                    .iter()
                    .zip(&views)
                    .map(|(ev, v)| record_at(ev, v, tau))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        sections.push(section(subset.ids(), &taus, per_tau));
        full_views = views;
    }

    let images = evidence
        .iter()
        .zip(&full_views)
        .map(|(ev, view)| ImageReport {
            image_id: ev.image_id.clone(),
            gt_boxes: ev.gt_boxes.iter().map(|&b| b.into()).collect(),
            predictions: ev
                .predictions
                .iter()
                .zip(&view.breakdowns)
                .zip(&ev.matching.pred_to_gt)
                .map(|((p, b), m)| PredictionSummary {
                    label: p.prediction.label.clone(),
                    confidence: p.prediction.confidence,
                    bbox: p.prediction.bbox.map(Into::into),
                    gt_match: *m,
                    explanation: p.explanation.clone(),
                    tcs: b.clone(),
                })
                .collect(),
        })
        .collect();

    Ok(MetricsReport {
        dataset: dataset.name.clone(),
        seed,
        config: cfg,
        images_evaluated: evidence.len(),
        images_failed: failures.len(),
        failures,
        sections,
        images,
    })
}

/// Per-image records of the full registry at one threshold, for callers that want
/// the raw counts behind a report row.
pub fn records_at<L>(
    dataset: &GroundTruthSet,
    load: L,
    h: &dyn Classifier,
    reg: &SpecRegistry,
    cfg: &EvalConfig,
    tau: f64,
) -> Result<Vec<EvalRecord>>
where
    L: Fn(&ImageEntry) -> Result<Image> + Sync,
{
    dataset
        .images
        .iter()
        .map(|entry| {
            let img = load(entry)?;
            let ev = gather(entry, &img, dataset, h, reg, cfg)?;
            let view = subset_view(&ev, reg, cfg)?;
            record_at(&ev, &view, tau)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(conf: f64, b: [i64; 4]) -> Prediction {
        Prediction::new("person", conf).unwrap().with_bbox(BBox::try_from(b).unwrap())
    }

    #[test]
    fn matching_cases() {
        let gt = [BBox::new(0, 0, 10, 10).unwrap()];
        let m = match_predictions_gt(&[boxed(0.9, [0, 0, 10, 10])], &gt, 0.5, None);
        assert_eq!(m.counts, Counts { tp: 1, fp: 0, fn_: 0 });

        let two = [BBox::new(0, 0, 4, 4).unwrap(), BBox::new(10, 10, 4, 4).unwrap()];
        let m = match_predictions_gt(&[], &two, 0.5, None);
        assert_eq!(m.counts, Counts { tp: 0, fp: 0, fn_: 2 });

        let preds = [boxed(0.6, [1, 0, 10, 10]), boxed(0.9, [0, 1, 10, 10])];
        let m = match_predictions_gt(&preds, &gt, 0.5, None);
        assert_eq!(m.counts, Counts { tp: 1, fp: 1, fn_: 0 });
        // the more confident prediction claims the box
        assert_eq!(m.pred_to_gt, vec![None, Some(0)]);
    }

    #[test]
    fn matching_takes_best_iou() {
        let gts = [BBox::new(0, 0, 10, 10).unwrap(), BBox::new(2, 0, 10, 10).unwrap()];
        let m = match_predictions_gt(&[boxed(0.9, [2, 0, 10, 10])], &gts, 0.5, None);
        assert_eq!(m.pred_to_gt, vec![Some(1)]);
    }

    #[test]
    fn prf1_cases() {
        let p = prf1(Counts { tp: 85, fp: 15, fn_: 15 });
        assert!((p.precision - 0.85).abs() < 1e-12);
        assert!((p.recall - 0.85).abs() < 1e-12);
        assert!((p.f1 - 0.85).abs() < 1e-12);
        assert_eq!(prf1(Counts::default()), Prf1 { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(prf1(Counts { tp: 1, fp: 0, fn_: 0 }), Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    fn det(id: &str, b: [i64; 4]) -> FeatureDetection {
        FeatureDetection::new(id, BBox::try_from(b).unwrap().to_mask(64, 64).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn clusters_follow_margin() {
        let dets = [
            det("face", [0, 0, 4, 4]),
            det("legs", [0, 10, 4, 4]),
            det("hand", [40, 40, 2, 2]),
        ];
        let tight = cluster_features(&dets, 3);
        assert_eq!(tight.len(), 3);
        let loose = cluster_features(&dets, 6);
        assert_eq!(loose.len(), 2);
        assert_eq!(loose[0].members, vec![0, 1]);
        assert_eq!(loose[0].spec_ids.len(), 2);
        assert_eq!(loose[0].region.count(), 32);
    }

    #[test]
    fn tcs_counting() {
        let region = BBox::new(0, 0, 20, 20).unwrap().to_mask(64, 64).unwrap();
        let high = ScoredRegion { region: &region, tcs: 80.0 };
        let d = classify_by_tcs(&[high], &[], 50.0).unwrap();
        assert_eq!(d.counts, Counts { tp: 1, fp: 0, fn_: 0 });

        let zero = ScoredRegion { region: &region, tcs: 0.0 };
        let d = classify_by_tcs(&[zero], &[], 10.0).unwrap();
        assert_eq!(d.counts.fp, 1);

        let orphan = cluster_features(&[det("face", [40, 30, 4, 4]), det("legs", [40, 40, 4, 4])], 12);
        let lone = cluster_features(&[det("face", [40, 30, 4, 4])], 12);
        let inside = cluster_features(&[det("face", [2, 2, 4, 4]), det("legs", [2, 10, 4, 4])], 12);
        let zero = ScoredRegion { region: &region, tcs: 0.0 };
        assert_eq!(classify_by_tcs(&[], &orphan, 0.0).unwrap().counts.fn_, 1);
        assert_eq!(classify_by_tcs(&[], &lone, 0.0).unwrap().counts.fn_, 0);
        assert_eq!(classify_by_tcs(&[zero], &inside, 0.0).unwrap().counts.fn_, 0);
    }

    fn rec(gt: Counts, both: Counts) -> EvalRecord {
        EvalRecord {
            image_id: "x".into(),
            gt_matches: vec![],
            counts_gt: gt,
            counts_tcs: Counts::default(),
            agreement: both,
        }
    }

    #[test]
    fn fractions() {
        let c = Counts { tp: 3, fp: 2, fn_: 1 };
        let f = agreement_fractions(&[rec(c, c), rec(c, c)]);
        assert_eq!((f.frac_tp, f.frac_fp, f.frac_fn), (Some(1.0), Some(1.0), Some(1.0)));

        let f = agreement_fractions(&[rec(c, Counts { tp: 3, fp: 0, fn_: 1 })]);
        assert_eq!(f.frac_fp, Some(0.0));

        let f = agreement_fractions(&[rec(Counts { tp: 2, fp: 0, fn_: 0 }, Counts { tp: 1, fp: 0, fn_: 0 })]);
        assert_eq!(f.frac_tp, Some(0.5));
        assert_eq!(f.frac_fn, None);
        assert_eq!(f.frac_fp, None);
    }

    #[test]
    fn dataset_parsing() {
        let json = r#"{
            "images": [{"id": 1, "width": 20, "height": 10, "file_name": "a.png"},
                       {"id": "b", "width": 8, "height": 8, "file_name": "b.ppm"}],
            "annotations": [{"image_id": 1, "category": "person", "bbox": [15.5, 2, 10, 4]},
                            {"image_id": "b", "category": "dog", "bbox": [0, 0, 2, 2]}]
        }"#;
        let ds = GroundTruthSet::from_json("t", json).unwrap();
        assert_eq!(ds.images[0].id, "1");
        // clipped to the 20-pixel width
        assert_eq!(ds.annotations[0].bbox, BBox::new(15, 2, 5, 4).unwrap());
        assert_eq!(ds.boxes_for("1", "Person").len(), 1);
        assert!(ds.boxes_for("b", "person").is_empty());

        for bad in [
            "{",
            r#"{"images": [{"id": 1, "width": 2, "height": 2}]}"#,
            r#"{"images": [], "annotations": [{"image_id": 3, "category": "p", "bbox": [0,0,1,1]}]}"#,
            r#"{"images": [{"id": 1, "width": 4, "height": 4, "file_name": "x"}],
                "annotations": [{"image_id": 1, "category": "p", "bbox": [9,9,1,1]}]}"#,
        ] {
            assert!(matches!(GroundTruthSet::from_json("t", bad), Err(Error::InvalidDataset(_))), "{bad}");
        }
    }

    #[test]
    fn empty_tau_grid_rejected() {
        let opts = EvalOptions {
            tau_grid: vec![],
            ..Default::default()
        };
        assert!(matches!(opts.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn csv_layout() {
        let s = ReportSection {
            specs: vec!["face".into()],
            rows: vec![ThresholdRow {
                tau: 10.0,
                precision_gt: 1.0,
                recall_gt: 0.5,
                f1_gt: 2.0 / 3.0,
                precision_tcs: 0.0,
                recall_tcs: 0.0,
                f1_tcs: 0.0,
                frac_tp: Some(1.0),
                frac_fp: None,
                frac_fn: Some(0.25),
                counts_gt: Counts::default(),
                counts_tcs: Counts::default(),
                agreement: Counts::default(),
            }],
        };
        let csv = s.to_csv(&["seed 0".into()]);
        assert_eq!(
            csv,
            "# seed 0\ntau,p_gt,r_gt,f1_gt,p_tcs,r_tcs,f1_tcs,frac_tp,frac_fp,frac_fn\n\
             10,1.000000,0.500000,0.666667,0.000000,0.000000,0.000000,1.000000,null,0.250000\n"
        );
    }
}
