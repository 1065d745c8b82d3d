//! Trustworthiness in Classification Score.
//!
//! For each feature detected around a prediction, the coverage `R` is the percentage
//! of the feature's pixels that the explanation keeps. A feature counts only if its
//! coverage reaches `r_lim`; counted features contribute `β · R` to the score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDetection, SpecRegistry};
use crate::imaging::PixelMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcsConfig {
    /// Minimum coverage percentage for a feature to count.
    pub r_lim: f64,
    /// Divide each weight by the summed weight of all registered specifications,
    /// which keeps the score within [0, 100].
    pub normalize_weights: bool,
}

impl Default for TcsConfig {
    fn default() -> Self {
        Self {
            r_lim: 50.0,
            normalize_weights: true,
        }
    }
}

impl TcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.r_lim) {
            return Err(Error::InvalidConfig(format!(
                "r_lim must lie in [0, 100], got {}",
                self.r_lim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub spec_id: String,
    /// Coverage percentage.
    pub r: f64,
    /// 1 when `r >= r_lim`, else 0.
    pub a: u8,
    pub beta_effective: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcsBreakdown {
    pub tcs: f64,
    pub per_feature: Vec<FeatureScore>,
    /// Distinct specifications detected.
    pub z_i: usize,
}

impl TcsBreakdown {
    pub fn empty() -> Self {
        Self {
            tcs: 0.0,
            per_feature: Vec::new(),
            z_i: 0,
        }
    }
}

/// `100 · |F ∩ E| / |F|`.
pub fn overlap_ratio(feature: &FeatureDetection, explanation: &PixelMask) -> Result<f64> {
    let total = feature.region.count();
    if total == 0 {
        return Err(Error::EmptyFeature(feature.spec_id.clone()));
    }
    let covered = feature.region.intersection_count(explanation)?;
    Ok((100 * covered) as f64 / total as f64)
}

/// Scores a prediction whose explanation is `explanation`.
///
/// Several detections of one specification collapse to the best-covered one. The
/// breakdown lists every detected specification in registry order, gated-out ones
/// included with a zero contribution.
pub fn compute_tcs(
    features: &[FeatureDetection],
    explanation: &PixelMask,
    reg: &SpecRegistry,
    cfg: &TcsConfig,
) -> Result<TcsBreakdown> {
    cfg.validate()?;
    let mut best: Vec<Option<f64>> = vec![None; reg.len()];
    for f in features {
        let pos = reg
            .position(&f.spec_id)
            .ok_or_else(|| Error::UnknownSpec(f.spec_id.clone()))?;
        let r = overlap_ratio(f, explanation)?;
        best[pos] = Some(best[pos].map_or(r, |prev: f64| prev.max(r)));
    }

    let total_weight = reg.total_weight();
    let mut per_feature = Vec::new();
    for (spec, r) in reg.specs().iter().zip(best) {
        let Some(r) = r else { continue };
        let beta_effective = if !cfg.normalize_weights {
            spec.weight
        } else if total_weight > 0.0 {
            spec.weight / total_weight
        } else {
            0.0
        };
        let a = u8::from(r >= cfg.r_lim);
        per_feature.push(FeatureScore {
            spec_id: spec.id.clone(),
            r,
            a,
            beta_effective,
            contribution: beta_effective * a as f64 * r,
        });
    }
    // one division at the end keeps full coverage at exactly 100
    let tcs = if cfg.normalize_weights && total_weight > 0.0 {
        let weighted: f64 = reg
            .specs()
            .iter()
            .filter_map(|s| per_feature.iter().find(|f| f.spec_id == s.id).map(|f| s.weight * f.a as f64 * f.r))
            .sum();
        weighted / total_weight
    } else {
        per_feature.iter().map(|f| f.contribution).sum()
    };
    Ok(TcsBreakdown {
        tcs,
        z_i: per_feature.len(),
        per_feature,
    })
}

/// Accepts the prediction when its score reaches `tau` (inclusive).
pub fn is_trustworthy(b: &TcsBreakdown, tau: f64) -> bool {
    b.tcs >= tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DetectorHandle, FeatureSpecification, MarkerDetector};
    use crate::imaging::{box_to_mask, BBox};

    fn registry(ids: &[&str]) -> SpecRegistry {
        let mut reg = SpecRegistry::new();
        for id in ids {
            reg.register(
                FeatureSpecification::new(*id, "", 1.0, DetectorHandle::Marker(MarkerDetector::new([0; 3])))
                    .unwrap(),
            )
            .unwrap();
        }
        reg
    }

    fn det(id: &str, b: BBox) -> FeatureDetection {
        FeatureDetection::new(id, box_to_mask(b, 16, 16).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn overlap_cases() {
        let expl = box_to_mask(BBox::new(0, 0, 8, 8).unwrap(), 16, 16).unwrap();
        assert_eq!(overlap_ratio(&det("f", BBox::new(1, 1, 3, 3).unwrap()), &expl).unwrap(), 100.0);
        assert_eq!(overlap_ratio(&det("f", BBox::new(9, 9, 3, 3).unwrap()), &expl).unwrap(), 0.0);
        // 8-pixel feature with 2 pixels inside
        assert_eq!(overlap_ratio(&det("f", BBox::new(6, 0, 8, 1).unwrap()), &expl).unwrap(), 25.0);
        let empty = FeatureDetection {
            spec_id: "f".into(),
            region: PixelMask::empty(16, 16),
            confidence: 1.0,
        };
        assert!(matches!(overlap_ratio(&empty, &expl), Err(Error::EmptyFeature(_))));
        assert!(overlap_ratio(&det("f", BBox::new(0, 0, 2, 2).unwrap()), &PixelMask::full(4, 4)).is_err());
    }

    #[test]
    fn empty_sum() {
        let b = compute_tcs(&[], &PixelMask::full(16, 16), &registry(&["face"]), &TcsConfig::default()).unwrap();
        assert_eq!(b.tcs, 0.0);
        assert_eq!(b.z_i, 0);
    }

    #[test]
    fn full_coverage_normalized() {
        let reg = registry(&["face", "hand", "legs"]);
        let feats = [
            det("face", BBox::new(0, 0, 2, 2).unwrap()),
            det("hand", BBox::new(4, 4, 2, 2).unwrap()),
            det("legs", BBox::new(8, 8, 2, 2).unwrap()),
        ];
        let b = compute_tcs(&feats, &PixelMask::full(16, 16), &reg, &TcsConfig::default()).unwrap();
        assert!((b.tcs - 100.0).abs() < 1e-9);
        assert_eq!(b.z_i, 3);
    }

    #[test]
    fn gated_feature_contributes_nothing() {
        let reg = registry(&["face"]);
        let expl = box_to_mask(BBox::new(0, 0, 2, 5).unwrap(), 16, 16).unwrap();
        let f = det("face", BBox::new(0, 0, 5, 1).unwrap());
        let cfg = TcsConfig {
            r_lim: 50.0,
            normalize_weights: false,
        };
        let b = compute_tcs(&[f], &expl, &reg, &cfg).unwrap();
        assert_eq!(b.per_feature[0].r, 40.0);
        assert_eq!(b.per_feature[0].a, 0);
        assert_eq!(b.tcs, 0.0);
        assert_eq!(b.z_i, 1);
    }

    #[test]
    fn duplicates_keep_best_instance() {
        let reg = registry(&["hand"]);
        let expl = box_to_mask(BBox::new(0, 0, 8, 16).unwrap(), 16, 16).unwrap();
        let inside = det("hand", BBox::new(0, 0, 2, 2).unwrap());
        let outside = det("hand", BBox::new(10, 0, 2, 2).unwrap());
        let cfg = TcsConfig {
            r_lim: 0.0,
            normalize_weights: false,
        };
        let b = compute_tcs(&[outside, inside], &expl, &reg, &cfg).unwrap();
        assert_eq!(b.per_feature.len(), 1);
        assert_eq!(b.tcs, 100.0);
    }

    #[test]
    fn unknown_spec_rejected() {
        let reg = registry(&["face"]);
        let err = compute_tcs(&[det("tail", BBox::new(0, 0, 1, 1).unwrap())], &PixelMask::full(16, 16), &reg, &TcsConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownSpec(_)));
    }

    #[test]
    fn threshold_is_inclusive() {
        let with = |tcs| TcsBreakdown {
            tcs,
            per_feature: vec![],
            z_i: 0,
        };
        assert!(is_trustworthy(&with(0.0), 0.0));
        assert!(!is_trustworthy(&with(33.3), 50.0));
        assert!(is_trustworthy(&with(42.5), 42.5));
    }

    #[test]
    fn invalid_r_lim() {
        let cfg = TcsConfig {
            r_lim: 101.0,
            normalize_weights: true,
        };
        assert!(compute_tcs(&[], &PixelMask::full(2, 2), &registry(&["a"]), &cfg).is_err());
    }
}
