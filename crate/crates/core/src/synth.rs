//! Seeded synthetic "marker scenes" for exercising the whole pipeline without a model.
//!
//! Each scene is a black frame with up to four slots. A slot may hold a person (a
//! light-gray body found by the bright-blob classifier), a hidden person (a dark body
//! the classifier misses) or a decoy (a white square that is not annotated). Persons
//! carry colored markers for face, hand and legs, which the builtin marker detectors
//! find. Only persons, hidden or not, are annotated.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Annotation, GroundTruthSet, ImageEntry};
use crate::features::{DetectorConfig, MarkerDetector, SpecConfig, SpecRegistry};
use crate::imaging::{BBox, Image};

pub const FACE_COLOR: [u8; 3] = [255, 0, 0];
pub const HAND_COLOR: [u8; 3] = [0, 255, 0];
pub const LEGS_COLOR: [u8; 3] = [0, 0, 255];
pub const BODY_COLOR: [u8; 3] = [220, 220, 220];
pub const HIDDEN_BODY_COLOR: [u8; 3] = [60, 60, 60];
pub const DECOY_COLOR: [u8; 3] = [255, 255, 255];

pub const BODY_W: i64 = 14;
pub const BODY_H: i64 = 28;
const SLOT_W: i64 = 32;
const SLOTS: i64 = 4;

// marker rectangles relative to the body origin, all strictly inside the body
const FACE: [i64; 4] = [4, 2, 6, 5];
const HAND: [i64; 4] = [1, 12, 3, 4];
const LEGS: [i64; 4] = [2, 19, 10, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Occupied slots per image are drawn uniformly from `1..=max_objects` (at most 4).
    pub max_objects: usize,
    pub hidden_probability: f64,
    pub decoy_probability: f64,
    pub face_probability: f64,
    pub hand_probability: f64,
    pub legs_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            width: 128,
            height: 64,
            max_objects: 3,
            hidden_probability: 0.2,
            decoy_probability: 0.0,
            face_probability: 1.0,
            hand_probability: 1.0,
            legs_probability: 1.0,
        }
    }
}

impl SceneConfig {
    /// Every person shows all three markers and nothing unannotated is bright.
    pub fn perfect_monitor(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            ..Self::default()
        }
    }

    /// Faces on only 40% of persons; hands and legs more common.
    pub fn under_represented(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            face_probability: 0.4,
            hand_probability: 0.6,
            legs_probability: 0.9,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width < (SLOT_W * SLOTS) as usize || self.height < BODY_H as usize + 4 {
            return Err(Error::InvalidConfig(format!(
                "scenes need at least {}x{} pixels",
                SLOT_W * SLOTS,
                BODY_H + 4
            )));
        }
        if self.max_objects == 0 || self.max_objects > SLOTS as usize {
            return Err(Error::InvalidConfig("max_objects must lie in 1..=4".into()));
        }
        let probs = [
            self.hidden_probability,
            self.decoy_probability,
            self.face_probability,
            self.hand_probability,
            self.legs_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub images: Vec<Image>,
    pub dataset: GroundTruthSet,
}

impl SyntheticCorpus {
    pub fn image(&self, id: &str) -> Option<&Image> {
        self.images.iter().find(|i| i.id() == id)
    }

    /// Loader for [`crate::eval::run_evaluation`] serving the in-memory images.
    pub fn loader(&self) -> impl Fn(&ImageEntry) -> Result<Image> + Sync + '_ {
        move |entry| {
            self.image(&entry.id)
                .cloned()
                .ok_or_else(|| Error::InvalidDataset(format!("no image `{}`", entry.id)))
        }
    }

    /// Writes `<id>.png` files, `dataset.json` and `specs.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (img, entry) in self.images.iter().zip(&self.dataset.images) {
            img.save_png(dir.join(&entry.file_name))?;
        }
        let write_json = |name: &str, v: serde_json::Value| {
            let path = dir.join(name);
            let text = serde_json::to_string_pretty(&v)? + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write_json("dataset.json", self.dataset.to_json())?;
        write_json("specs.json", serde_json::to_value(marker_spec_configs())?)
    }
}

fn offset(body: BBox, rel: [i64; 4]) -> BBox {
    BBox {
        x: body.x + rel[0],
        y: body.y + rel[1],
        w: rel[2],
        h: rel[3],
    }
}

pub fn generate(cfg: &SceneConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.count);
    let mut entries = Vec::with_capacity(cfg.count);
    let mut annotations = Vec::new();
    for i in 0..cfg.count {
        let id = format!("synth-{i:04}");
        let mut img = Image::filled(id.clone(), cfg.width, cfg.height, &[0, 0, 0])?;
        let objects = rng.gen_range(1..=cfg.max_objects);
        let mut slots: Vec<i64> = (0..SLOTS).collect();
        for k in 0..objects {
            let j = rng.gen_range(k..slots.len());
            slots.swap(k, j);
        }
        let mut used = slots[..objects].to_vec();
        used.sort_unstable();
        for slot in used {
            let x = slot * SLOT_W + (SLOT_W - BODY_W) / 2;
            let y = rng.gen_range(2..=(cfg.height as i64 - BODY_H - 2));
            if rng.gen_bool(cfg.decoy_probability) {
                img.fill_rect(BBox::new(x + 3, y + 6, 8, 8)?, &DECOY_COLOR);
                continue;
            }
            let body = BBox::new(x, y, BODY_W, BODY_H)?;
            let hidden = rng.gen_bool(cfg.hidden_probability);
            img.fill_rect(body, if hidden { &HIDDEN_BODY_COLOR } else { &BODY_COLOR });
            for (rel, color, p) in [
                (FACE, FACE_COLOR, cfg.face_probability),
                (HAND, HAND_COLOR, cfg.hand_probability),
                (LEGS, LEGS_COLOR, cfg.legs_probability),
            ] {
                if rng.gen_bool(p) {
                    img.fill_rect(offset(body, rel), &color);
                }
            }
            annotations.push(Annotation {
                image_id: id.clone(),
                category: "person".into(),
                bbox: body,
            });
        }
        entries.push(ImageEntry {
            id: id.clone(),
            width: cfg.width,
            height: cfg.height,
            file_name: format!("{id}.png"),
        });
        images.push(img);
    }
    Ok(SyntheticCorpus {
        images,
        dataset: GroundTruthSet::new("synthetic", entries, annotations)?,
    })
}

/// Face, hand and legs specifications matching the scene markers, weight 1 each.
pub fn marker_spec_configs() -> Vec<SpecConfig> {
    [
        ("face", "A person detection shall include a human face", FACE_COLOR),
        ("hand", "A person detection shall include a human hand", HAND_COLOR),
        ("legs", "A person detection shall include human legs", LEGS_COLOR),
    ]
    .into_iter()
    .map(|(id, description, color)| SpecConfig {
        id: id.into(),
        description: description.into(),
        weight: 1.0,
        detector: DetectorConfig::GeometricBuiltin(MarkerDetector::new(color)),
    })
    .collect()
}

pub fn marker_registry() -> SpecRegistry {
    SpecRegistry::from_configs(&marker_spec_configs()).expect("builtin marker specifications are valid")
}
