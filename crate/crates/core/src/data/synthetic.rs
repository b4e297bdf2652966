//! Synthetic grounding task.
//!
//! Every image holds `objects` distinct (color, shape) objects; each object
//! also carries a material and a size that appear only in its region
//! features. A question names one object by color and shape and asks for
//! its material or its size, so the answer can only be read off the right
//! region. Distractor candidates come from the same image's other objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetFile, DialogDataset, DialogRecord, RoundRecord, Split};
use super::features::{save_features, FeatureMap};
use super::vocab::Vocabulary;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// File name used by [`SyntheticCorpus::save`].
pub const DATASET_FILE: &str = "dataset.json";

pub const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "purple", "orange", "cyan", "gray", "brown", "pink",
];
pub const SHAPES: [&str; 10] = [
    "circle", "square", "triangle", "star", "cube", "cylinder", "sphere", "cone", "ring", "heart",
];
pub const MATERIALS: [&str; 16] = [
    "metal", "rubber", "wood", "glass", "plastic", "stone", "paper", "cloth", "leather", "silk",
    "wool", "steel", "gold", "silver", "clay", "ice",
];
pub const SIZES: [&str; 16] = [
    "tiny", "small", "medium", "large", "huge", "giant", "petite", "massive", "little", "mini",
    "jumbo", "colossal", "compact", "enormous", "immense", "miniature",
];

/// Relevance of a distractor that answers with the asked attribute category.
pub const SAME_CATEGORY_RELEVANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Training images.
    pub num_images: usize,
    /// Held-out images (split `val`).
    pub val_images: usize,
    /// Objects per image (μ_s).
    pub objects: usize,
    pub colors: usize,
    pub shapes: usize,
    pub materials: usize,
    pub sizes: usize,
    /// No two objects in an image share a material or a size, so the
    /// answer to a question identifies its object.
    pub unique_attributes: bool,
    pub rounds: usize,
    pub candidates: usize,
    /// Std-dev of Gaussian noise added to every feature entry.
    pub noise: f64,
    /// Region feature width d_v.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_images: 500,
            val_images: 100,
            objects: 8,
            colors: 4,
            shapes: 4,
            materials: 16,
            sizes: 16,
            unique_attributes: true,
            rounds: 3,
            candidates: 10,
            noise: 0.1,
            feature_dim: 40,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_images", self.num_images),
            ("objects", self.objects),
            ("colors", self.colors),
            ("shapes", self.shapes),
            ("materials", self.materials),
            ("sizes", self.sizes),
            ("rounds", self.rounds),
            ("candidates", self.candidates),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Contract(format!("synthetic `{name}` must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Contract(format!("noise {} outside [0, 1]", self.noise)));
        }
        let limits = [
            ("colors", self.colors, COLORS.len()),
            ("shapes", self.shapes, SHAPES.len()),
            ("materials", self.materials, MATERIALS.len()),
            ("sizes", self.sizes, SIZES.len()),
        ];
        for (name, v, max) in limits {
            if v > max {
                return Err(Error::Contract(format!("at most {max} {name} supported, got {v}")));
            }
        }
        if self.objects > self.colors * self.shapes {
            return Err(Error::Unsatisfiable(format!(
                "{} objects cannot have unique (color, shape) pairs with {} colors x {} shapes",
                self.objects, self.colors, self.shapes
            )));
        }
        if self.unique_attributes && self.objects > self.materials.min(self.sizes) {
            return Err(Error::Unsatisfiable(format!(
                "{} objects cannot have unique attributes with {} materials and {} sizes",
                self.objects, self.materials, self.sizes
            )));
        }
        let words = self.colors + self.shapes + self.materials + self.sizes;
        if self.candidates > words {
            return Err(Error::Unsatisfiable(format!(
                "{} candidates need more than the {words} attribute words available",
                self.candidates
            )));
        }
        let width = self.colors + self.shapes + self.materials + self.sizes;
        if self.feature_dim < width {
            return Err(Error::Unsatisfiable(format!(
                "feature_dim {} is narrower than the {width} one-hot attribute slots",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
    pub material: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Asked {
    Material,
    Size,
}

impl Object {
    pub fn attribute(&self, asked: Asked) -> &'static str {
        match asked {
            Asked::Material => MATERIALS[self.material],
            Asked::Size => SIZES[self.size],
        }
    }
}

/// Generated dialogs plus their region features.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub file: DatasetFile,
    pub features: FeatureMap,
    /// Object table per dialog, in file order.
    pub objects: Vec<Vec<Object>>,
}

impl SyntheticCorpus {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::build(self.file.texts())
    }

    pub fn dataset(&self, split: Split, vocab: Arc<Vocabulary>) -> Result<DialogDataset> {
        DialogDataset::from_file(&self.file, &self.features, split, vocab)
    }

    /// Writes `dataset.json` and its feature file into `dir` (created if
    /// needed) and returns the dataset path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let json = dir.join(DATASET_FILE);
        let mut text = serde_json::to_string(&self.file)?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::file(&json, e))?;
        save_features(super::dataset::features_path(&json, &self.file), &self.features)?;
        Ok(json)
    }

    /// Train and val datasets sharing one vocabulary.
    pub fn train_val(&self) -> Result<(DialogDataset, DialogDataset)> {
        let vocab = Arc::new(self.vocab());
        Ok((
            self.dataset(Split::Train, vocab.clone())?,
            self.dataset(Split::Val, vocab)?,
        ))
    }
}

fn question_text(asked: Asked, color: &str, shape: &str, variant: bool) -> String {
    match (asked, variant) {
        (Asked::Material, false) => format!("what material is the {color} {shape} ?"),
        (Asked::Material, true) => format!("what is the {color} {shape} made of ?"),
        (Asked::Size, false) => format!("what size is the {color} {shape} ?"),
        (Asked::Size, true) => format!("how big is the {color} {shape} ?"),
    }
}

/// Deterministic in `cfg` (including the seed).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");

    let mut dialogs = Vec::new();
    let mut features = FeatureMap::new();
    let mut tables = Vec::new();
    let splits = [(Split::Train, cfg.num_images), (Split::Val, cfg.val_images)];
    for (split, count) in splits {
        for i in 0..count {
            let image_id = format!("synth_{}_{i:05}", split.as_str());
            let objects = sample_objects(cfg, &mut rng);
            let feats = encode_objects(cfg, &objects, &noise, &mut rng);
            features.insert(image_id.clone(), feats);
            let rounds = sample_rounds(cfg, &objects, &mut rng);
            dialogs.push(DialogRecord {
                image_id,
                split: Some(split),
                caption: format!("there are {} objects in the picture .", cfg.objects),
                rounds,
            });
            tables.push(objects);
        }
    }
    Ok(SyntheticCorpus {
        file: DatasetFile {
            version: "1.0".into(),
            features: Some("features.bin".into()),
            dialogs,
        },
        features,
        objects: tables,
    })
}

fn sample_objects(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let mut pairs: Vec<(usize, usize)> = (0..cfg.colors)
        .flat_map(|c| (0..cfg.shapes).map(move |s| (c, s)))
        .collect();
    pairs.shuffle(rng);
    pairs.truncate(cfg.objects);
    let mut pick = |n: usize| -> Vec<usize> {
        if cfg.unique_attributes {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(rng);
            v.truncate(cfg.objects);
            v
        } else {
            (0..cfg.objects).map(|_| rng.random_range(0..n)).collect()
        }
    };
    let materials = pick(cfg.materials);
    let sizes = pick(cfg.sizes);
    pairs
        .into_iter()
        .zip(materials.into_iter().zip(sizes))
        .map(|((color, shape), (material, size))| Object {
            color,
            shape,
            material,
            size,
        })
        .collect()
}

fn encode_objects(
    cfg: &SyntheticConfig,
    objects: &[Object],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let d = cfg.feature_dim;
    let mut data = vec![0.0; objects.len() * d];
    for (i, o) in objects.iter().enumerate() {
        let row = &mut data[i * d..(i + 1) * d];
        let mut off = 0;
        for (v, n) in [
            (o.color, cfg.colors),
            (o.shape, cfg.shapes),
            (o.material, cfg.materials),
            (o.size, cfg.sizes),
        ] {
            row[off + v] = 1.0;
            off += n;
        }
        for x in row.iter_mut() {
            let e = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            // stored as f32 on disk; keep memory and disk identical
            *x = (*x + e) as f32 as f64;
        }
    }
    Tensor::from_parts(vec![objects.len(), d], data)
}

fn sample_rounds(cfg: &SyntheticConfig, objects: &[Object], rng: &mut ChaCha8Rng) -> Vec<RoundRecord> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(rng);
    (0..cfg.rounds)
        .map(|t| {
            let target = if t < order.len() {
                order[t]
            } else {
                rng.random_range(0..objects.len())
            };
            let asked = if rng.random_bool(0.5) { Asked::Material } else { Asked::Size };
            let o = objects[target];
            let question = question_text(asked, COLORS[o.color], SHAPES[o.shape], rng.random_bool(0.5));
            let answer = o.attribute(asked).to_string();
            let (options, relevance, gt_index) = candidates(cfg, objects, target, asked, rng);
            RoundRecord {
                question,
                answer,
                answer_options: options,
                gt_index,
                relevance: Some(relevance),
                gt_grounding: Some(vec![target]),
            }
        })
        .collect()
}

fn candidates(
    cfg: &SyntheticConfig,
    objects: &[Object],
    target: usize,
    asked: Asked,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<f64>, usize) {
    let gt = objects[target].attribute(asked);
    let other = match asked {
        Asked::Material => Asked::Size,
        Asked::Size => Asked::Material,
    };
    let others: Vec<&Object> = objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, o)| o)
        .collect();

    // Priority: same category from other objects, other hidden category
    // from other objects, their colors and shapes, then the remaining words.
    let mut pool: Vec<&'static str> = Vec::new();
    pool.extend(others.iter().map(|o| o.attribute(asked)));
    pool.extend(others.iter().map(|o| o.attribute(other)));
    pool.extend(others.iter().flat_map(|o| [COLORS[o.color], SHAPES[o.shape]]));
    let mut rest: Vec<&'static str> = MATERIALS[..cfg.materials]
        .iter()
        .chain(&SIZES[..cfg.sizes])
        .chain(&COLORS[..cfg.colors])
        .chain(&SHAPES[..cfg.shapes])
        .copied()
        .collect();
    rest.shuffle(rng);
    pool.extend(rest);

    let mut chosen: Vec<&'static str> = vec![gt];
    for w in pool {
        if chosen.len() == cfg.candidates {
            break;
        }
        if !chosen.contains(&w) {
            chosen.push(w);
        }
    }
    chosen.shuffle(rng);
    let same_category: &[&str] = match asked {
        Asked::Material => &MATERIALS,
        Asked::Size => &SIZES,
    };
    let relevance = chosen
        .iter()
        .map(|w| {
            if *w == gt {
                1.0
            } else if same_category.contains(w) {
                SAME_CATEGORY_RELEVANCE
            } else {
                0.0
            }
        })
        .collect();
    let gt_index = chosen.iter().position(|w| *w == gt).expect("gt inserted");
    (chosen.into_iter().map(str::to_string).collect(), relevance, gt_index)
}
