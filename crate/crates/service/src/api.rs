//! Request/response schema (version [`API_VERSION`]) and handlers.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use gvqg_core::concepts::{random_selection, seed_for, ConceptSelection, SelectionMode};
use gvqg_core::models::{ExplicitInput, Guidance, Model, Variant};
use gvqg_core::world::{Scene, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::state::{AppState, VariantSlot};

pub const API_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub api_version: String,
    pub scenes: usize,
    pub variants_loaded: usize,
    pub variants_missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub name: String,
    pub available: bool,
    /// Model family: baseline, explicit, implicit, variational.
    pub model: Option<String>,
    pub modes: Vec<String>,
    pub k: Option<usize>,
    /// Why the checkpoint could not be served.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub label: String,
    pub color: String,
    /// Normalized `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub split: Split,
    pub labels: Vec<String>,
    pub objects: Vec<ObjectView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDetail {
    #[serde(flatten)]
    pub summary: SceneSummary,
    pub caption: Vec<String>,
    /// Detector slot labels in slot order.
    pub detected: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePage {
    pub split: Split,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub scenes: Vec<SceneSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub scene_id: String,
    pub candidate_concepts: Vec<String>,
    pub categories: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub scene_id: String,
    /// Manifest name of the checkpoint.
    pub variant: String,
    /// Defaults per model: `guided` (explicit), `predicted` (implicit,
    /// variational), `image-only` (baseline, image-category).
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub concepts: Option<Vec<String>>,
    #[serde(default)]
    pub category: Option<String>,
    /// Seeds random selections and object sampling; absent means seed 0.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEcho {
    pub mode: String,
    /// Concepts the decoder was conditioned on (explicit).
    pub concepts: Vec<String>,
    /// Category the decoder was conditioned on: given (explicit) or
    /// predicted (implicit).
    pub category: Option<String>,
    pub category_predicted: bool,
    /// Selected detector slots (implicit).
    pub mask: Option<Vec<usize>>,
    /// Labels of the selected slots (implicit).
    pub objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub api_version: String,
    pub scene_id: String,
    pub variant: String,
    pub question_tokens: Vec<String>,
    pub question: String,
    pub guidance: GuidanceEcho,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct PageQuery {
    pub split: Option<String>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/variants", get(variants))
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}", get(get_scene))
        .route("/scenes/{id}/concepts", get(get_concepts))
        .route("/generate", post(generate))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Health> {
    let loaded = s.variants.values().filter(|v| matches!(v, VariantSlot::Loaded(_))).count();
    Json(Health {
        status: "ok".into(),
        api_version: API_VERSION.into(),
        scenes: s.dataset.scenes.len(),
        variants_loaded: loaded,
        variants_missing: s.variants.len() - loaded,
    })
}

fn modes_for(m: &Model<f32>) -> Vec<&'static str> {
    match m.variant() {
        Variant::Explicit => vec!["guided", "random"],
        Variant::Implicit if !m.config.object_guidance => vec!["image-only"],
        Variant::Implicit | Variant::Variational => vec!["predicted", "random"],
        Variant::Baseline => vec!["image-only"],
    }
}

async fn variants(State(s): State<Arc<AppState>>) -> Json<Vec<VariantInfo>> {
    Json(
        s.variants
            .iter()
            .map(|(name, slot)| match slot {
                VariantSlot::Loaded(m) => VariantInfo {
                    name: name.clone(),
                    available: true,
                    model: Some(m.variant().to_string()),
                    modes: modes_for(m).into_iter().map(String::from).collect(),
                    k: Some(m.config.k),
                    reason: None,
                },
                VariantSlot::Missing { reason, .. } => VariantInfo {
                    name: name.clone(),
                    available: false,
                    model: None,
                    modes: Vec::new(),
                    k: None,
                    reason: Some(reason.clone()),
                },
            })
            .collect(),
    )
}

fn summary(scene: &Scene) -> SceneSummary {
    SceneSummary {
        scene_id: scene.scene_id.clone(),
        split: scene.split,
        labels: scene.labels(),
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectView {
                label: o.label.clone(),
                color: o.color.clone(),
                bbox: o.bbox,
            })
            .collect(),
    }
}

async fn list_scenes(State(s): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Result<Json<ScenePage>, ApiError> {
    let split: Split = match q.split.as_deref() {
        None => Split::Val,
        Some(name) => name
            .parse()
            .map_err(|_| ApiError::NotFound(format!("unknown split {name:?}")))?,
    };
    let page = q.page.unwrap_or(0);
    let page_size = q.page_size.unwrap_or(s.page_size);
    if page_size == 0 {
        return Err(ApiError::validation("page_size must be positive", vec!["page_size".into()]));
    }
    let all: Vec<&Scene> = s.dataset.scenes_in(split).collect();
    let scenes = all
        .iter()
        .skip(page.saturating_mul(page_size))
        .take(page_size)
        .map(|sc| summary(sc))
        .collect();
    Ok(Json(ScenePage {
        split,
        page,
        page_size,
        total: all.len(),
        scenes,
    }))
}

fn scene<'a>(s: &'a AppState, id: &str) -> Result<&'a Scene, ApiError> {
    s.dataset
        .scene(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown scene {id:?}")))
}

async fn get_scene(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SceneDetail>, ApiError> {
    let sc = scene(&s, &id)?;
    let input = &s.inputs[&id];
    Ok(Json(SceneDetail {
        summary: summary(sc),
        caption: input.caption.clone(),
        detected: input.detection.labels.clone(),
    }))
}

async fn get_concepts(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ConceptsResponse>, ApiError> {
    scene(&s, &id)?;
    Ok(Json(ConceptsResponse {
        scene_id: id.clone(),
        candidate_concepts: s.inputs[&id].candidates.tokens(),
        categories: s.taxonomy.names().to_vec(),
    }))
}

/// Turns a request into model guidance, rejecting anything the chosen
/// model cannot honour.
fn resolve(req: &GenerateRequest, model: &Model<f32>, s: &AppState) -> Result<(String, Guidance), ApiError> {
    let modes = modes_for(model);
    let mode = req.mode.clone().unwrap_or_else(|| modes[0].to_string());
    if !modes.contains(&mode.as_str()) {
        return Err(ApiError::validation(
            format!("mode {mode:?} is not supported by variant {:?}; expected one of {modes:?}", req.variant),
            vec![mode],
        ));
    }
    let input = &s.inputs[&req.scene_id];
    let seed = req.seed.unwrap_or(0);
    let explicit_guided = model.variant() == Variant::Explicit && mode == "guided";
    if !explicit_guided {
        let mut fields = Vec::new();
        if req.concepts.is_some() {
            fields.push("concepts".to_string());
        }
        if req.category.is_some() {
            fields.push("category".to_string());
        }
        if !fields.is_empty() {
            return Err(ApiError::validation(
                format!("{} mode of a {} model takes no concepts or category", mode, model.variant()),
                fields,
            ));
        }
    }
    let guidance = match mode.as_str() {
        "image-only" => Guidance::None,
        "predicted" => Guidance::Predicted,
        "random" if model.variant() != Variant::Explicit => Guidance::Random,
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "service-random"));
            let mut sel = random_selection(&input.candidates, model.config.k, &model.taxonomy, &mut rng);
            match model.config.explicit_input {
                ExplicitInput::Category => sel.concepts.clear(),
                ExplicitInput::Objects => sel.category = None,
                ExplicitInput::Guided => {}
            }
            Guidance::Select(sel)
        }
        _ => {
            let concepts = req.concepts.clone().unwrap_or_default();
            let category = req.category.clone();
            if concepts.is_empty() && category.is_none() {
                return Err(ApiError::validation(
                    "explicit generation needs concepts and/or a category",
                    vec!["concepts".into(), "category".into()],
                ));
            }
            let input_kind = model.config.explicit_input;
            if input_kind == ExplicitInput::Category && !concepts.is_empty() {
                return Err(ApiError::validation("this checkpoint takes a category only", vec!["concepts".into()]));
            }
            if input_kind == ExplicitInput::Objects && category.is_some() {
                return Err(ApiError::validation("this checkpoint takes concepts only", vec!["category".into()]));
            }
            let k = model.config.k;
            if concepts.len() > k {
                return Err(ApiError::validation(
                    format!("at most {k} concepts allowed, got {}", concepts.len()),
                    concepts.clone(),
                ));
            }
            let mut seen = BTreeSet::new();
            let dups: Vec<String> = concepts.iter().filter(|c| !seen.insert(c.as_str())).cloned().collect();
            if !dups.is_empty() {
                return Err(ApiError::validation("duplicate concepts", dups));
            }
            let sel = ConceptSelection {
                concepts,
                category,
                mode: SelectionMode::Actor,
            };
            let mut offenders = sel.check_subset(&input.candidates).err().unwrap_or_default();
            if let Some(c) = &sel.category {
                if !model.taxonomy.contains(c) {
                    offenders.push(c.clone());
                }
            }
            if !offenders.is_empty() {
                return Err(ApiError::validation(
                    "concepts must come from the scene's candidates and the category from the taxonomy",
                    offenders,
                ));
            }
            Guidance::Select(sel)
        }
    };
    Ok((mode, guidance))
}

async fn generate(State(s): State<Arc<AppState>>, Json(req): Json<GenerateRequest>) -> Result<Json<GenerateResponse>, ApiError> {
    let started = Instant::now();
    scene(&s, &req.scene_id)?;
    let model = match s.variants.get(&req.variant) {
        None => return Err(ApiError::NotFound(format!("unknown variant {:?}", req.variant))),
        Some(VariantSlot::Missing { path, reason }) => {
            return Err(ApiError::Unavailable(format!(
                "checkpoint for {:?} at {} is not loaded: {reason}",
                req.variant,
                path.display()
            )))
        }
        Some(VariantSlot::Loaded(m)) => Arc::clone(m),
    };
    let (mode, guidance) = resolve(&req, &model, &s)?;
    let input = Arc::clone(&s.inputs[&req.scene_id]);
    let seed = req.seed.unwrap_or(0);
    let out = tokio::task::spawn_blocking(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "service-generate"));
        model.generate(&[input.as_ref()], &[guidance], &mut rng)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::validation(e.to_string(), Vec::new()))?
    .pop()
    .ok_or_else(|| ApiError::Internal("no output".into()))?;
    let input = &s.inputs[&req.scene_id];
    let mask = out.mask.as_ref().map(|m| m.indices());
    let echo = GuidanceEcho {
        mode,
        concepts: out.selection.as_ref().map(|x| x.concepts.clone()).unwrap_or_default(),
        category: out
            .selection
            .as_ref()
            .and_then(|x| x.category.clone())
            .or_else(|| out.category.clone()),
        category_predicted: out.selection.is_none() && out.category.is_some(),
        objects: mask
            .iter()
            .flatten()
            .map(|&j| input.detection.labels[j].clone())
            .collect(),
        mask,
    };
    Ok(Json(GenerateResponse {
        api_version: API_VERSION.into(),
        scene_id: req.scene_id,
        variant: req.variant,
        question: out.question.join(" "),
        question_tokens: out.question,
        guidance: echo,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
