//! Synthetic scene world: scenes, captions, templated QA pairs and an
//! oracle object detector.
//!
//! Every function here is a pure function of its inputs and an explicit
//! seed. Scenes stand in for images; object features are deterministic
//! label/color embeddings plus seeded Gaussian noise.

mod detect;
mod io;
pub mod ontology;

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use detect::{detect_objects, DetectorNoise, ObjectDetection};
pub use io::{read_dataset, write_dataset, DatasetManifest, DATASET_FILE, MANIFEST_FILE};
pub use ontology::{CategoryTaxonomy, LabelInfo, COLORS, ONTOLOGY};

use crate::GvqgError;
use ontology::{activity_of, fnv1a, label_info};

/// Maximum question length in tokens.
pub const MAX_QUESTION_TOKENS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = GvqgError;
    fn from_str(s: &str) -> Result<Self, GvqgError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(GvqgError::InvalidInput(format!("unknown split {other}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub label: String,
    pub color: String,
    pub count_group: u8,
    /// Normalized `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
}

impl ObjectInstance {
    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.bbox[0] + self.bbox[2]),
            0.5 * (self.bbox[1] + self.bbox[3]),
        )
    }

    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.bbox;
        let in_unit = self.bbox.iter().all(|v| (0.0..=1.0).contains(v));
        in_unit
            && x1 < x2
            && y1 < y2
            && self.feature.iter().all(|v| v.is_finite())
            && label_info(&self.label).is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub objects: Vec<ObjectInstance>,
    pub caption_gt: Vec<String>,
    pub split: Split,
}

impl Scene {
    pub fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.label.clone()).collect()
    }

    pub fn object(&self, label: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.label == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub scene_id: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub category: String,
    pub gold_concepts_hint: Vec<String>,
}

/// The template families and the category each one produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    Count,
    Color,
    Object,
    Attribute,
    Location,
    Binary,
    Activity,
    Other,
}

impl Template {
    pub const ALL: [Template; 8] = [
        Template::Count,
        Template::Color,
        Template::Object,
        Template::Attribute,
        Template::Location,
        Template::Binary,
        Template::Activity,
        Template::Other,
    ];

    pub fn category(self) -> &'static str {
        match self {
            Template::Count => "count",
            Template::Color => "color",
            Template::Object => "object",
            Template::Attribute => "attribute",
            Template::Location => "location",
            Template::Binary => "binary",
            Template::Activity => "activity",
            Template::Other => "other",
        }
    }

    pub fn from_category(cat: &str) -> Option<Template> {
        Template::ALL.into_iter().find(|t| t.category() == cat)
    }

    /// Objects of `scene` that can be the subject of this template.
    fn subjects(self, scene: &Scene) -> Vec<usize> {
        let all = 0..scene.objects.len();
        match self {
            Template::Object if scene.objects.len() < 2 => Vec::new(),
            Template::Activity => all
                .filter(|&i| label_info(&scene.objects[i].label).is_some_and(|l| l.animate))
                .collect(),
            Template::Other => all
                .filter(|&i| label_info(&scene.objects[i].label).is_some_and(|l| !l.animate))
                .collect(),
            _ => all.collect(),
        }
    }

    pub fn applicable(self, scene: &Scene) -> bool {
        !self.subjects(scene).is_empty()
    }

    /// Fixed surface tokens of the template, for vocabulary building.
    pub fn surface_words() -> &'static [&'static str] {
        &[
            "how", "many", "are", "there", "?", "what", "color", "is", "the", "next", "to",
            "where", "big", "or", "small", "a", "in", "picture", "doing", "made", "of",
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_scenes: usize,
    pub val_fraction: f64,
    /// Detector slots per scene.
    pub k_o: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub categories: Vec<String>,
    /// Emit one question for every applicable template of every scene.
    pub cover_all_templates: bool,
    /// Additional questions per scene, template drawn by `template_weights`.
    pub extra_qa_per_scene: usize,
    pub template_weights: BTreeMap<String, f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_scenes: 500,
            val_fraction: 0.2,
            k_o: 8,
            min_objects: 5,
            max_objects: 8,
            feature_dim: 64,
            feature_noise: 0.1,
            categories: CategoryTaxonomy::default().names().to_vec(),
            cover_all_templates: true,
            extra_qa_per_scene: 0,
            template_weights: Template::ALL
                .iter()
                .map(|t| (t.category().to_string(), 1.0))
                .collect(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), GvqgError> {
        if self.num_scenes == 0 {
            return Err(GvqgError::config("num_scenes", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(GvqgError::config("val_fraction", "must be in [0, 1)"));
        }
        if self.k_o == 0 {
            return Err(GvqgError::config("k_o", "must be positive"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(GvqgError::config("min_objects", "must be in 1..=max_objects"));
        }
        if self.max_objects > self.k_o {
            return Err(GvqgError::config("max_objects", "must not exceed k_o"));
        }
        if self.max_objects > ONTOLOGY.len() {
            return Err(GvqgError::config("max_objects", "exceeds ontology size"));
        }
        if self.feature_dim == 0 {
            return Err(GvqgError::config("feature_dim", "must be positive"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(GvqgError::config("feature_noise", "must be finite and >= 0"));
        }
        if !self.cover_all_templates && self.extra_qa_per_scene == 0 {
            return Err(GvqgError::config(
                "extra_qa_per_scene",
                "must be positive when cover_all_templates is off",
            ));
        }
        for (k, w) in &self.template_weights {
            if Template::from_category(k).is_none() {
                return Err(GvqgError::config("template_weights", format!("unknown template {k}")));
            }
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(GvqgError::config("template_weights", format!("bad weight for {k}")));
            }
        }
        self.taxonomy().map(|_| ())
    }

    pub fn taxonomy(&self) -> Result<CategoryTaxonomy, GvqgError> {
        CategoryTaxonomy::new(self.categories.clone())
    }

    /// Templates whose category is part of the configured taxonomy.
    pub fn active_templates(&self) -> Vec<Template> {
        Template::ALL
            .into_iter()
            .filter(|t| self.categories.iter().any(|c| c == t.category()))
            .collect()
    }

    pub fn template_weight(&self, t: Template) -> f64 {
        self.template_weights
            .get(t.category())
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub qa: Vec<QaInstance>,
}

impl Dataset {
    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    pub fn qa_for<'a>(&'a self, scene_id: &'a str) -> impl Iterator<Item = &'a QaInstance> {
        self.qa.iter().filter(move |q| q.scene_id == scene_id)
    }

    pub fn taxonomy(&self) -> CategoryTaxonomy {
        self.config.taxonomy().expect("validated at generation")
    }
}

/// Deterministic embedding of a token into `dim` dimensions, unit variance per entry.
pub(crate) fn token_vector(token: &str, salt: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(format!("{salt}:{token}").as_bytes()));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

fn object_feature<R: Rng>(label: &str, color: &str, cfg: &WorldConfig, rng: &mut R) -> Vec<f64> {
    let lv = token_vector(label, "feature-label", cfg.feature_dim);
    let cv = token_vector(color, "feature-color", cfg.feature_dim);
    let noise = Normal::new(0.0, cfg.feature_noise.max(1e-12)).expect("noise std");
    lv.iter()
        .zip(&cv)
        .map(|(l, c)| {
            let n = if cfg.feature_noise > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            l + 0.5 * c + n
        })
        .collect()
}

fn sample_count_group<R: Rng>(rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    match u {
        u if u < 0.5 => 1,
        u if u < 0.75 => 2,
        u if u < 0.9 => 3,
        _ => 4,
    }
}

fn generate_scene<R: Rng>(idx: usize, split: Split, cfg: &WorldConfig, rng: &mut R) -> Scene {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let picks = rand::seq::index::sample(rng, ONTOLOGY.len(), n);
    let mut objects = Vec::with_capacity(n);
    for li in picks.iter() {
        let label = ONTOLOGY[li].label.to_string();
        let color = (*COLORS.choose(rng).expect("colors")).to_string();
        let count_group = sample_count_group(rng);
        let w = rng.random_range(0.1..0.45);
        let h = rng.random_range(0.1..0.45);
        let x1 = rng.random_range(0.0..(1.0 - w));
        let y1 = rng.random_range(0.0..(1.0 - h));
        let feature = object_feature(&label, &color, cfg, rng);
        objects.push(ObjectInstance {
            label,
            color,
            count_group,
            bbox: [x1, y1, x1 + w, y1 + h],
            feature,
        });
    }
    let mut scene = Scene {
        scene_id: format!("s{idx:05}"),
        objects,
        caption_gt: Vec::new(),
        split,
    };
    scene.caption_gt = caption_scene(&scene);
    scene
}

/// Templated caption naming the two largest objects, the first with its color.
pub fn caption_scene(scene: &Scene) -> Vec<String> {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        scene.objects[b]
            .area()
            .total_cmp(&scene.objects[a].area())
            .then_with(|| scene.objects[a].label.cmp(&scene.objects[b].label))
    });
    let mut out: Vec<String> = ["a", "scene", "with"].iter().map(|s| s.to_string()).collect();
    if let Some(&first) = order.first() {
        let o = &scene.objects[first];
        out.extend(["a".to_string(), o.color.clone(), o.label.clone()]);
    }
    if let Some(&second) = order.get(1) {
        out.extend(["and", "a"].iter().map(|s| s.to_string()));
        out.push(scene.objects[second].label.clone());
    }
    out
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn weighted_pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn location_word(x: f64) -> &'static str {
    if x < 1.0 / 3.0 {
        "left"
    } else if x < 2.0 / 3.0 {
        "middle"
    } else {
        "right"
    }
}

/// Area threshold separating "big" from "small" answers.
pub const BIG_AREA: f64 = 0.06;

fn nearest_other(scene: &Scene, i: usize) -> usize {
    let (cx, cy) = scene.objects[i].center();
    (0..scene.objects.len())
        .filter(|&j| j != i)
        .min_by(|&a, &b| {
            let da = dist2(scene.objects[a].center(), (cx, cy));
            let db = dist2(scene.objects[b].center(), (cx, cy));
            da.total_cmp(&db)
                .then_with(|| scene.objects[a].label.cmp(&scene.objects[b].label))
        })
        .expect("object template requires two objects")
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Instantiates one question of `template` about a salience-weighted subject.
pub fn instantiate<R: Rng>(template: Template, scene: &Scene, rng: &mut R) -> Option<QaInstance> {
    let subjects = template.subjects(scene);
    if subjects.is_empty() {
        return None;
    }
    let weights: Vec<f64> = subjects
        .iter()
        .map(|&i| label_info(&scene.objects[i].label).map_or(1.0, |l| l.salience))
        .collect();
    let obj = &scene.objects[subjects[weighted_pick(&weights, rng)]];
    let label = obj.label.as_str();
    let (question, answer, hint) = match template {
        Template::Count => {
            let plural = label_info(label).map_or(label, |l| l.plural);
            (
                toks(&["how", "many", plural, "are", "there", "?"]),
                toks(&[ontology::COUNT_WORDS[(obj.count_group - 1) as usize]]),
                vec![label.to_string()],
            )
        }
        Template::Color => (
            toks(&["what", "color", "is", "the", label, "?"]),
            vec![obj.color.clone()],
            vec![label.to_string(), obj.color.clone()],
        ),
        Template::Object => {
            let idx = scene.objects.iter().position(|o| o.label == label).unwrap();
            let other = &scene.objects[nearest_other(scene, idx)].label;
            (
                toks(&["what", "is", "next", "to", "the", label, "?"]),
                vec![other.clone()],
                vec![label.to_string(), other.clone()],
            )
        }
        Template::Attribute => {
            let size = if obj.area() >= BIG_AREA { "big" } else { "small" };
            (
                toks(&["is", "the", label, "big", "or", "small", "?"]),
                toks(&[size]),
                vec![label.to_string()],
            )
        }
        Template::Location => (
            toks(&["where", "is", "the", label, "?"]),
            toks(&[location_word(obj.center().0)]),
            vec![label.to_string()],
        ),
        Template::Binary => {
            let present = rng.random_bool(0.5);
            let asked = if present {
                label.to_string()
            } else {
                let absent: Vec<&str> = ONTOLOGY
                    .iter()
                    .map(|l| l.label)
                    .filter(|l| scene.object(l).is_none())
                    .collect();
                absent.choose(rng).map_or(label, |v| v).to_string()
            };
            let ans = if scene.object(&asked).is_some() { "yes" } else { "no" };
            (
                toks(&["is", "there", "a", &asked, "in", "the", "picture", "?"]),
                toks(&[ans]),
                vec![asked],
            )
        }
        Template::Activity => (
            toks(&["what", "is", "the", label, "doing", "?"]),
            toks(&[activity_of(label, &obj.color)]),
            vec![label.to_string()],
        ),
        Template::Other => (
            toks(&["what", "is", "the", label, "made", "of", "?"]),
            toks(&[label_info(label).map_or("", |l| l.material)]),
            vec![label.to_string()],
        ),
    };
    Some(QaInstance {
        scene_id: scene.scene_id.clone(),
        question,
        answer,
        category: template.category().to_string(),
        gold_concepts_hint: hint,
    })
}

/// Recomputes the answer of `qa` from `scene` by the template rule; `None`
/// if the question does not parse as any template.
pub fn check_answer(scene: &Scene, qa: &QaInstance) -> Option<Vec<String>> {
    let q: Vec<&str> = qa.question.iter().map(String::as_str).collect();
    let t = Template::from_category(&qa.category)?;
    let find = |label: &str| scene.object(label);
    let ans = match (t, q.as_slice()) {
        (Template::Count, ["how", "many", plural, "are", "there", "?"]) => {
            let o = scene.objects.iter().find(|o| {
                label_info(&o.label).is_some_and(|l| l.plural == *plural)
            })?;
            ontology::COUNT_WORDS[(o.count_group - 1) as usize].to_string()
        }
        (Template::Color, ["what", "color", "is", "the", l, "?"]) => find(l)?.color.clone(),
        (Template::Object, ["what", "is", "next", "to", "the", l, "?"]) => {
            let idx = scene.objects.iter().position(|o| o.label == *l)?;
            scene.objects[nearest_other(scene, idx)].label.clone()
        }
        (Template::Attribute, ["is", "the", l, "big", "or", "small", "?"]) => {
            if find(l)?.area() >= BIG_AREA { "big" } else { "small" }.to_string()
        }
        (Template::Location, ["where", "is", "the", l, "?"]) => {
            location_word(find(l)?.center().0).to_string()
        }
        (Template::Binary, ["is", "there", "a", l, "in", "the", "picture", "?"]) => {
            if find(l).is_some() { "yes" } else { "no" }.to_string()
        }
        (Template::Activity, ["what", "is", "the", l, "doing", "?"]) => {
            let o = find(l)?;
            activity_of(l, &o.color).to_string()
        }
        (Template::Other, ["what", "is", "the", l, "made", "of", "?"]) => {
            label_info(find(l)?.label.as_str())?.material.to_string()
        }
        _ => return None,
    };
    Some(vec![ans])
}

fn scene_rng(seed: u64, stream: &str, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(format!("{stream}:{idx}").as_bytes()))
}

/// Builds the full dataset; a pure function of `(config, seed)`.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<Dataset, GvqgError> {
    config.validate()?;
    let n_val = ((config.num_scenes as f64) * config.val_fraction).round() as usize;
    let n_train = config.num_scenes - n_val;
    let templates = config.active_templates();
    let mut scenes = Vec::with_capacity(config.num_scenes);
    let mut qa = Vec::new();
    for idx in 0..config.num_scenes {
        let split = if idx < n_train { Split::Train } else { Split::Val };
        let mut rng = scene_rng(seed, "scene", idx);
        let scene = generate_scene(idx, split, config, &mut rng);
        let applicable: Vec<Template> = templates
            .iter()
            .copied()
            .filter(|t| t.applicable(&scene))
            .collect();
        if config.cover_all_templates {
            for &t in &applicable {
                qa.extend(instantiate(t, &scene, &mut rng));
            }
        }
        let weights: Vec<f64> = applicable.iter().map(|&t| config.template_weight(t)).collect();
        for _ in 0..config.extra_qa_per_scene {
            if applicable.is_empty() {
                break;
            }
            let t = applicable[weighted_pick(&weights, &mut rng)];
            qa.extend(instantiate(t, &scene, &mut rng));
        }
        scenes.push(scene);
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        scenes,
        qa,
    })
}
