//! Occlusion-based explanations for black-box predictions.
//!
//! The explanation of a prediction `y` is grown from a pixel ranking: many randomly
//! occluded copies of the image (mutants) are classified, each pixel is scored by how
//! often its presence coincides with the classifier still answering `y`, and pixels
//! are then revealed from the highest score down until the revealed image reproduces
//! `y` at a similar confidence.
//!
//! Predictions that already carry a bounding box skip all of this: the box is the
//! explanation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{same_prediction, Classifier, Prediction};
use crate::error::{Error, Result};
use crate::imaging::{apply_mask, box_to_mask, Image, PixelMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingScheme {
    /// Every pixel is kept independently with probability `keep_fraction`.
    RandomPixel,
    /// Square blocks of `block_size` pixels are kept or occluded together.
    GridBlock,
}

/// How the "wrong" count of a pixel is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingVariant {
    /// Mutants that lose `y` while the pixel is visible.
    Text,
    /// Mutants that lose `y` while the pixel is occluded.
    Figure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    pub num_mutants: usize,
    pub scheme: MaskingScheme,
    pub keep_fraction: f64,
    pub block_size: usize,
    pub seed: u64,
    /// Sample value written into occluded pixels.
    pub fill: u8,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            num_mutants: 500,
            scheme: MaskingScheme::RandomPixel,
            keep_fraction: 0.5,
            block_size: 4,
            seed: 0,
            fill: 0,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_mutants == 0 {
            return Err(Error::InvalidConfig("num_mutants must be at least 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "keep_fraction must lie in (0, 1), got {}",
                self.keep_fraction
            )));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub mutation: MutationConfig,
    /// Largest absolute confidence difference accepted as "close" to `y`.
    pub confidence_closeness: f64,
    /// Pixels revealed per growth step; `None` means 1% of the image (at least 1).
    pub step_size: Option<usize>,
    /// Growth stops unconverged once this fraction of the image is revealed.
    pub max_fraction: f64,
    pub ranking_variant: RankingVariant,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            mutation: MutationConfig::default(),
            confidence_closeness: 0.1,
            step_size: None,
            max_fraction: 1.0,
            ranking_variant: RankingVariant::Text,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.mutation.validate()?;
        if !(0.0..=1.0).contains(&self.confidence_closeness) {
            return Err(Error::InvalidConfig(format!(
                "confidence_closeness must lie in [0, 1], got {}",
                self.confidence_closeness
            )));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_fraction must lie in (0, 1], got {}",
                self.max_fraction
            )));
        }
        if self.step_size == Some(0) {
            return Err(Error::InvalidConfig("step_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step_for(&self, pixels: usize) -> usize {
        self.step_size.unwrap_or_else(|| (pixels / 100).max(1))
    }
}

/// An occluded copy of the input together with the mask that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mutant {
    pub mask: PixelMask,
    pub image: Image,
}

fn random_mask(width: usize, height: usize, cfg: &MutationConfig, rng: &mut ChaCha8Rng) -> PixelMask {
    match cfg.scheme {
        MaskingScheme::RandomPixel => {
            PixelMask::from_fn(width, height, |_, _| rng.gen_bool(cfg.keep_fraction))
        }
        MaskingScheme::GridBlock => {
            let bs = cfg.block_size;
            let cols = width.div_ceil(bs);
            let rows = height.div_ceil(bs);
            let kept: Vec<bool> = (0..cols * rows).map(|_| rng.gen_bool(cfg.keep_fraction)).collect();
            PixelMask::from_fn(width, height, |x, y| kept[(y / bs) * cols + x / bs])
        }
    }
}

/// `cfg.num_mutants` seeded mutants of `img`.
pub fn generate_mutants(img: &Image, cfg: &MutationConfig) -> Result<Vec<Mutant>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_mutants)
        .map(|_| {
            let mask = random_mask(img.width(), img.height(), cfg, &mut rng);
            let image = apply_mask(img, &mask, cfg.fill)?;
            Ok(Mutant { mask, image })
        })
        .collect()
}

fn reproduces(y: &Prediction, preds: &[Prediction]) -> bool {
    preds.iter().any(|p| same_prediction(y, p))
}

/// Whether each mutant still yields `y`. Output index `j` belongs to mutant `j`
/// regardless of evaluation order.
pub fn evaluate_mutants(h: &dyn Classifier, y: &Prediction, mutants: &[Mutant]) -> Result<Vec<bool>> {
    let results: Vec<Result<bool>> = mutants
        .par_iter()
        .map(|m| h.classify(&m.image).map(|preds| reproduces(y, &preds)))
        .collect();
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

/// Per-pixel evidence counts and the resulting rank `a_t − a_f`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelRanking {
    pub width: usize,
    pub height: usize,
    pub a_t: Vec<u32>,
    pub a_f: Vec<u32>,
    pub rank: Vec<i64>,
}

impl PixelRanking {
    /// Pixel indices by descending rank; equal ranks keep row-major order.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rank.len()).collect();
        idx.sort_by(|&a, &b| self.rank[b].cmp(&self.rank[a]).then(a.cmp(&b)));
        idx
    }
}

pub fn rank_pixels(
    masks: &[PixelMask],
    outcomes: &[bool],
    variant: RankingVariant,
) -> Result<PixelRanking> {
    let first = masks.first().ok_or(Error::EmptyInput("no mutants to rank"))?;
    if masks.len() != outcomes.len() {
        return Err(Error::InvalidConfig(format!(
            "{} masks but {} outcomes",
            masks.len(),
            outcomes.len()
        )));
    }
    let (width, height) = (first.width(), first.height());
    let n = width * height;
    let mut a_t = vec![0u32; n];
    let mut a_f = vec![0u32; n];
    for (mask, &correct) in masks.iter().zip(outcomes) {
        mask.check_dims(width, height)?;
        match (correct, variant) {
            (true, _) | (false, RankingVariant::Text) => {
                let counts = if correct { &mut a_t } else { &mut a_f };
                for k in mask.iter_set() {
                    counts[k] += 1;
                }
            }
            (false, RankingVariant::Figure) => {
                for (k, c) in a_f.iter_mut().enumerate() {
                    if !mask.get_index(k) {
                        *c += 1;
                    }
                }
            }
        }
    }
    let rank = a_t.iter().zip(&a_f).map(|(&t, &f)| t as i64 - f as i64).collect();
    Ok(PixelRanking {
        width,
        height,
        a_t,
        a_f,
        rank,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub mask: PixelMask,
    pub pixels_used: usize,
    pub achieved_confidence: f64,
    pub converged: bool,
    /// Mutant classifications issued to build the ranking.
    pub mutant_evaluations: usize,
    /// Classifications of partially revealed images during growth.
    pub growth_steps: usize,
}

impl Explanation {
    pub fn meta(&self) -> ExplanationMeta {
        ExplanationMeta {
            pixels_used: self.pixels_used,
            achieved_confidence: self.achieved_confidence,
            converged: self.converged,
            mutant_evaluations: self.mutant_evaluations,
            growth_steps: self.growth_steps,
        }
    }
}

/// The mask-free part of an [`Explanation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMeta {
    pub pixels_used: usize,
    pub achieved_confidence: f64,
    pub converged: bool,
    pub mutant_evaluations: usize,
    pub growth_steps: usize,
}

/// Reveals pixels in rank order, `step` at a time, until the classifier reproduces
/// `y` within the closeness threshold or the size cap is reached.
pub fn assemble_explanation(
    h: &dyn Classifier,
    img: &Image,
    y: &Prediction,
    ranking: &PixelRanking,
    cfg: &ExplainerConfig,
) -> Result<Explanation> {
    cfg.validate()?;
    if ranking.width != img.width() || ranking.height != img.height() {
        return Err(Error::DimensionMismatch {
            left_w: ranking.width,
            left_h: ranking.height,
            right_w: img.width(),
            right_h: img.height(),
        });
    }
    let order = ranking.order();
    let total = order.len();
    let step = cfg.step_for(total);
    let cap = ((cfg.max_fraction * total as f64).ceil() as usize).clamp(1, total);

    let mut mask = PixelMask::empty(img.width(), img.height());
    let mut used = 0;
    let mut achieved = 0.0;
    let mut steps = 0;
    loop {
        let next = (used + step).min(total);
        for &k in &order[used..next] {
            mask.set_index(k, true);
        }
        used = next;
        steps += 1;

        let preds = h.classify(&apply_mask(img, &mask, cfg.mutation.fill)?)?;
        let closest = preds
            .iter()
            .filter(|p| same_prediction(y, p))
            .min_by(|a, b| {
                let da = (a.confidence - y.confidence).abs();
                let db = (b.confidence - y.confidence).abs();
                da.total_cmp(&db)
            });
        if let Some(p) = closest {
            achieved = p.confidence;
            if (p.confidence - y.confidence).abs() <= cfg.confidence_closeness + 1e-12 {
                return Ok(Explanation {
                    mask,
                    pixels_used: used,
                    achieved_confidence: achieved,
                    converged: true,
                    mutant_evaluations: 0,
                    growth_steps: steps,
                });
            }
        }
        if used >= cap {
            return Ok(Explanation {
                mask,
                pixels_used: used,
                achieved_confidence: achieved,
                converged: false,
                mutant_evaluations: 0,
                growth_steps: steps,
            });
        }
    }
}

/// Explanation of `y` on `img`: the prediction's own box when it has one, otherwise
/// the mutant ranking followed by greedy assembly.
pub fn explain(h: &dyn Classifier, img: &Image, y: &Prediction, cfg: &ExplainerConfig) -> Result<Explanation> {
    if let Some(bbox) = y.bbox {
        let mask = box_to_mask(bbox, img.width(), img.height())?;
        return Ok(Explanation {
            pixels_used: mask.count(),
            mask,
            achieved_confidence: y.confidence,
            converged: true,
            mutant_evaluations: 0,
            growth_steps: 0,
        });
    }
    cfg.validate()?;
    let mutants = generate_mutants(img, &cfg.mutation)?;
    let outcomes = evaluate_mutants(h, y, &mutants)?;
    let masks: Vec<PixelMask> = mutants.into_iter().map(|m| m.mask).collect();
    let ranking = rank_pixels(&masks, &outcomes, cfg.ranking_variant)?;
    let mut expl = assemble_explanation(h, img, y, &ranking, cfg)?;
    expl.mutant_evaluations = masks.len();
    Ok(expl)
}

#[derive(Serialize)]
struct Sidecar<'a, C: Serialize> {
    image_id: &'a str,
    label: &'a str,
    #[serde(flatten)]
    meta: ExplanationMeta,
    config: &'a C,
}

/// Writes the mask as a bilevel PNG and a JSON sidecar next to it.
pub fn export_explanation<C: Serialize>(
    mask_path: &Path,
    sidecar_path: &Path,
    image_id: &str,
    y: &Prediction,
    expl: &Explanation,
    config: &C,
) -> Result<()> {
    expl.mask.save_png(mask_path)?;
    let sidecar = Sidecar {
        image_id,
        label: &y.label,
        meta: expl.meta(),
        config,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path, json + "\n").map_err(|e| Error::io(sidecar_path, e))
}
