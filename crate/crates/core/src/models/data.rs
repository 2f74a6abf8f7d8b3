//! Turning a generated dataset into model-ready examples.
//!
//! The inference-visible part of an example ([`SceneInput`]) is separated
//! from its question/answer ([`QaTruth`]), which is only reachable through
//! the instrumented [`GroundTruth`] wrapper.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::concepts::{
    build_candidate_concepts, filter_concepts, gold_objects_for_implicit, qa_tokens, ConceptSelection,
    ConceptSet, Stopwords, TokenEmbedder,
};
use crate::realism::{self, GroundTruth, Phase};
use crate::world::{detect_objects, DetectorNoise, ObjectDetection};
use crate::world::{caption_scene, Dataset, Scene, Split};
use crate::GvqgError;

/// What a model may look at when generating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInput {
    pub scene_id: String,
    pub detection: ObjectDetection,
    pub caption: Vec<String>,
    pub candidates: ConceptSet,
}

/// Training and scoring targets of one QA pair.
#[derive(Clone, Debug, PartialEq)]
pub struct QaTruth {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub category: String,
    /// Content tokens of question + answer.
    pub qa_tokens: Vec<String>,
    /// Top-k candidate concepts by similarity to the QA pair, with the category.
    pub filtered: ConceptSelection,
    /// Top-k detected slots by similarity to the QA pair.
    pub gold_slots: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Example {
    pub input: Arc<SceneInput>,
    pub truth: GroundTruth<QaTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub detector_noise: DetectorNoise,
    pub detector_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 2,
            detector_noise: DetectorNoise::NONE,
            detector_seed: 0,
        }
    }
}

/// Stopword list and concept embedder shared by all selection steps.
#[derive(Clone, Debug, Default)]
pub struct ConceptResources {
    pub stopwords: Stopwords,
    pub embedder: TokenEmbedder,
}

/// Detector + captioner + candidate builder for one scene.
pub fn scene_input(scene: &Scene, k_o: usize, cfg: &PipelineConfig, res: &ConceptResources) -> SceneInput {
    let detection = detect_objects(scene, cfg.detector_noise, k_o, cfg.detector_seed);
    let caption = caption_scene(scene);
    let candidates = build_candidate_concepts(&detection.labels, &caption, &res.stopwords);
    SceneInput {
        scene_id: scene.scene_id.clone(),
        detection,
        caption,
        candidates,
    }
}

/// One example per QA pair of the scenes in `split`, in dataset order.
pub fn build_examples(
    dataset: &Dataset,
    split: Split,
    cfg: &PipelineConfig,
    res: &ConceptResources,
) -> Result<Vec<Example>, GvqgError> {
    let _phase = realism::enter(Phase::Selection);
    let k_o = dataset.config.k_o;
    let mut out = Vec::new();
    for scene in dataset.scenes_in(split) {
        let input = Arc::new(scene_input(scene, k_o, cfg, res));
        for qa in dataset.qa_for(&scene.scene_id) {
            let toks = qa_tokens(&qa.question, &qa.answer, &res.stopwords);
            let filtered = filter_concepts(&input.candidates, &toks, cfg.k, &res.embedder)?
                .with_category(Some(qa.category.clone()));
            let gold_slots = gold_objects_for_implicit(&input.detection.labels, &toks, cfg.k, &res.embedder);
            out.push(Example {
                input: Arc::clone(&input),
                truth: GroundTruth::new(QaTruth {
                    question: qa.question.clone(),
                    answer: qa.answer.clone(),
                    category: qa.category.clone(),
                    qa_tokens: toks,
                    filtered,
                    gold_slots,
                }),
            });
        }
    }
    if out.is_empty() {
        return Err(GvqgError::EmptyCorpus);
    }
    Ok(out)
}
