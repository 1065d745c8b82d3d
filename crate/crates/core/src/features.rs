//! Feature specifications and the detectors that monitor them.
//!
//! A feature specification names a distinctive part of the target class ("a person
//! shows a face") and binds it to a detector that reports the pixel regions where the
//! part appears in an image.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{box_to_mask, connected_components, Image, PixelMask};
use crate::protocol::{pixel_box, SubprocessClient};

/// Finds solid regions of one color: every 4-connected patch whose pixels all lie
/// within `tolerance` of `color` on every channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerDetector {
    pub color: [u8; 3],
    #[serde(default)]
    pub tolerance: u8,
    #[serde(default = "one")]
    pub min_area: usize,
}

fn one() -> usize {
    1
}

impl MarkerDetector {
    pub fn new(color: [u8; 3]) -> Self {
        Self {
            color,
            tolerance: 0,
            min_area: 1,
        }
    }

    fn matches(&self, px: &[u8]) -> bool {
        let close = |a: u8, b: u8| a.abs_diff(b) <= self.tolerance;
        match px {
            [r, g, b] => close(*r, self.color[0]) && close(*g, self.color[1]) && close(*b, self.color[2]),
            [v] => {
                let gray = (self.color.iter().map(|&c| c as u32).sum::<u32>() / 3) as u8;
                close(*v, gray)
            }
            _ => false,
        }
    }

    pub fn detect(&self, spec_id: &str, img: &Image) -> Vec<FeatureDetection> {
        connected_components(img.width(), img.height(), |x, y| self.matches(img.pixel(x, y)))
            .into_iter()
            .filter(|c| c.count() >= self.min_area.max(1))
            .map(|region| FeatureDetection {
                spec_id: spec_id.to_owned(),
                region,
                confidence: 1.0,
            })
            .collect()
    }
}

/// Serializable description of a detector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DetectorConfig {
    GeometricBuiltin(MarkerDetector),
    Subprocess { command: String },
}

#[derive(Clone, Debug)]
pub enum DetectorHandle {
    Marker(MarkerDetector),
    Subprocess(Arc<SubprocessClient>),
}

impl DetectorHandle {
    pub fn from_config(cfg: &DetectorConfig) -> Result<Self> {
        Ok(match cfg {
            DetectorConfig::GeometricBuiltin(m) => DetectorHandle::Marker(m.clone()),
            DetectorConfig::Subprocess { command } => {
                DetectorHandle::Subprocess(Arc::new(SubprocessClient::spawn(command)?))
            }
        })
    }

    pub fn config(&self) -> DetectorConfig {
        match self {
            DetectorHandle::Marker(m) => DetectorConfig::GeometricBuiltin(m.clone()),
            DetectorHandle::Subprocess(c) => DetectorConfig::Subprocess {
                command: c.command().to_owned(),
            },
        }
    }

    pub fn detect(&self, spec_id: &str, img: &Image) -> Result<Vec<FeatureDetection>> {
        match self {
            DetectorHandle::Marker(m) => Ok(m.detect(spec_id, img)),
            DetectorHandle::Subprocess(client) => {
                let unavailable = |reason: String| Error::DetectorUnavailable {
                    spec_id: spec_id.to_owned(),
                    reason,
                };
                let resp = client
                    .call(img, Some(spec_id))
                    .map_err(|e| unavailable(e.to_string()))?;
                let mut out = Vec::new();
                for wp in resp.predictions {
                    // label-only answers carry no region to check coverage against
                    let Some(raw) = wp.bbox else { continue };
                    let region = pixel_box(raw)
                        .and_then(|b| box_to_mask(b, img.width(), img.height()))
                        .map_err(|e| unavailable(e.to_string()))?;
                    out.push(FeatureDetection {
                        spec_id: spec_id.to_owned(),
                        region,
                        confidence: wp.confidence,
                    });
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureSpecification {
    pub id: String,
    pub description: String,
    pub weight: f64,
    pub detector: DetectorHandle,
}

impl FeatureSpecification {
    pub fn new(
        id: impl Into<String>,
        description: impl Into<String>,
        weight: f64,
        detector: DetectorHandle,
    ) -> Result<Self> {
        let id = id.into();
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidRegistry(format!(
                "weight of `{id}` must be a non-negative number, got {weight}"
            )));
        }
        Ok(Self {
            id,
            description: description.into(),
            weight,
            detector,
        })
    }

    pub fn to_config(&self) -> SpecConfig {
        SpecConfig {
            id: self.id.clone(),
            description: self.description.clone(),
            weight: self.weight,
            detector: self.detector.config(),
        }
    }
}

/// One entry of the registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub weight: f64,
    pub detector: DetectorConfig,
}

/// One detected instance of a feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDetection {
    pub spec_id: String,
    pub region: PixelMask,
    pub confidence: f64,
}

impl FeatureDetection {
    pub fn new(spec_id: impl Into<String>, region: PixelMask, confidence: f64) -> Result<Self> {
        let spec_id = spec_id.into();
        if region.is_empty() {
            return Err(Error::EmptyFeature(spec_id));
        }
        Ok(Self {
            spec_id,
            region,
            confidence,
        })
    }
}

/// Registered specifications in registration order.
#[derive(Clone, Debug, Default)]
pub struct SpecRegistry {
    specs: Vec<FeatureSpecification>,
}

impl SpecRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: FeatureSpecification) -> Result<()> {
        if self.get(&spec.id).is_some() {
            return Err(Error::DuplicateId(spec.id));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn with(mut self, spec: FeatureSpecification) -> Result<Self> {
        self.register(spec)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[FeatureSpecification] {
        &self.specs
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureSpecification> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.id == id)
    }

    pub fn total_weight(&self) -> f64 {
        self.specs.iter().map(|s| s.weight).sum()
    }

    /// The registry restricted to its first `n` specifications.
    pub fn prefix(&self, n: usize) -> SpecRegistry {
        SpecRegistry {
            specs: self.specs.iter().take(n).cloned().collect(),
        }
    }

    pub fn from_configs(configs: &[SpecConfig]) -> Result<Self> {
        let mut reg = Self::new();
        for c in configs {
            if c.id.trim().is_empty() {
                return Err(Error::InvalidRegistry("specification id must not be empty".into()));
            }
            let detector = DetectorHandle::from_config(&c.detector)?;
            reg.register(FeatureSpecification::new(&c.id, &c.description, c.weight, detector)?)
                .map_err(|e| Error::InvalidRegistry(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let configs: Vec<SpecConfig> =
            serde_json::from_str(json).map_err(|e| Error::InvalidRegistry(e.to_string()))?;
        Self::from_configs(&configs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_configs(&self) -> Vec<SpecConfig> {
        self.specs.iter().map(FeatureSpecification::to_config).collect()
    }
}

/// Detections from all detectors plus the specifications whose detector failed.
#[derive(Debug, Default)]
pub struct FeatureScan {
    pub detections: Vec<FeatureDetection>,
    pub failures: Vec<Error>,
}

fn detection_key(d: &FeatureDetection) -> (String, usize, usize) {
    let origin = d.region.iter_set().next().unwrap_or(0);
    (d.spec_id.clone(), origin, d.region.count())
}

/// Runs every registered detector on `img`. A failing detector is recorded in
/// `failures` and the others still run. Detections are ordered by spec id, then by
/// the row-major position of the region's first pixel.
pub fn detect_features(reg: &SpecRegistry, img: &Image) -> Result<FeatureScan> {
    if reg.is_empty() {
        return Err(Error::EmptyInput("no feature specifications registered"));
    }
    let per_spec: Vec<Result<Vec<FeatureDetection>>> = reg
        .specs()
        .par_iter()
        .map(|s| s.detector.detect(&s.id, img))
        .collect();
    let mut scan = FeatureScan::default();
    for r in per_spec {
        match r {
            Ok(dets) => scan.detections.extend(dets.into_iter().filter(|d| !d.region.is_empty())),
            Err(e) => scan.failures.push(e),
        }
    }
    scan.detections.sort_by_cached_key(detection_key);
    Ok(scan)
}

/// Detections sharing at least one pixel with the prediction's region.
pub fn filter_by_prediction(
    dets: &[FeatureDetection],
    pred_region: &PixelMask,
) -> Result<Vec<FeatureDetection>> {
    let mut kept = Vec::new();
    for d in dets {
        if d.region.intersection_count(pred_region)? >= 1 {
            kept.push(d.clone());
        }
    }
    Ok(kept)
}
