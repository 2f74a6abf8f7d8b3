use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gvqg_core::harness::{default_matrix_runs, train, MatrixConfig, PreparedData};
use gvqg_core::models::{Model, ModelConfig, Variant};
use gvqg_core::vocab::Vocab;
use gvqg_core::world::{generate_dataset, Dataset, Split, WorldConfig};
use gvqg_service::{
    router, AppState, CheckpointEntry, ConceptsResponse, ErrorBody, GenerateRequest, GenerateResponse, Health,
    SceneDetail, ScenePage, VariantInfo,
};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use tower::ServiceExt;

fn small_world() -> WorldConfig {
    WorldConfig {
        num_scenes: 60,
        ..Default::default()
    }
}

fn dataset() -> Dataset {
    generate_dataset(&small_world(), 7).unwrap()
}

fn untrained(variant: Variant, ds: &Dataset) -> Model<f32> {
    let cfg = ModelConfig {
        variant,
        dims: gvqg_core::harness::desk_dims(),
        ..Default::default()
    };
    let taxonomy = ds.taxonomy();
    Model::new(cfg, Vocab::standard(&taxonomy), taxonomy, ds.config.feature_dim, ds.config.k_o, 3).unwrap()
}

fn app() -> Router {
    let ds = dataset();
    let explicit = untrained(Variant::Explicit, &ds);
    let implicit = untrained(Variant::Implicit, &ds);
    let variational = untrained(Variant::Variational, &ds);
    let missing = [CheckpointEntry {
        name: "gone".into(),
        path: "/nonexistent/model.ckpt.json".into(),
    }];
    let state = AppState::new(ds, &missing, 5)
        .with_model("explicit", explicit)
        .with_model("implicit", implicit)
        .with_model("variational", variational);
    router(Arc::new(state))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> (StatusCode, Result<T, serde_json::Error>) {
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body))
}

async fn generate(app: &Router, req: &GenerateRequest) -> (StatusCode, Vec<u8>) {
    let r = Request::post("/generate")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(req).unwrap()))
        .unwrap();
    call(app, r).await
}

fn first_val_scene(app_ds: &Dataset) -> String {
    app_ds.scenes_in(Split::Val).next().unwrap().scene_id.clone()
}

#[tokio::test]
async fn health_and_variants() {
    let app = app();
    let (st, h) = get::<Health>(&app, "/health").await;
    assert_eq!(st, StatusCode::OK);
    let h = h.unwrap();
    assert_eq!(h.variants_loaded, 3);
    assert_eq!(h.variants_missing, 1);
    assert_eq!(h.scenes, 60);

    let (_, vs) = get::<Vec<VariantInfo>>(&app, "/variants").await;
    let vs = vs.unwrap();
    let gone = vs.iter().find(|v| v.name == "gone").unwrap();
    assert!(!gone.available);
    assert!(gone.reason.is_some());
    let imp = vs.iter().find(|v| v.name == "implicit").unwrap();
    assert!(imp.available);
    assert_eq!(imp.k, Some(2));
    assert!(imp.modes.contains(&"predicted".to_string()));
}

#[tokio::test]
async fn pagination_is_stable_and_sized() {
    let app = app();
    let ds = dataset();
    let n_val = ds.scenes_in(Split::Val).count();
    let (st, p0) = get::<ScenePage>(&app, "/scenes?split=val&page=0&page_size=5").await;
    assert_eq!(st, StatusCode::OK);
    let p0 = p0.unwrap();
    assert_eq!(p0.total, n_val);
    assert_eq!(p0.scenes.len(), 5.min(n_val));
    let (_, again) = get::<ScenePage>(&app, "/scenes?split=val&page=0&page_size=5").await;
    assert_eq!(p0, again.unwrap());
    let (_, p1) = get::<ScenePage>(&app, "/scenes?split=val&page=1&page_size=5").await;
    let p1 = p1.unwrap();
    assert!(p0.scenes.iter().all(|a| p1.scenes.iter().all(|b| a.scene_id != b.scene_id)));
    for s in &p0.scenes {
        let scene = ds.scene(&s.scene_id).unwrap();
        assert_eq!(s.labels, scene.labels());
    }
    // default page size from the state
    let (_, d) = get::<ScenePage>(&app, "/scenes?split=train").await;
    assert_eq!(d.unwrap().page_size, 5);
}

#[tokio::test]
async fn unknown_split_and_scene_are_not_found() {
    let app = app();
    let (st, body) = get::<ErrorBody>(&app, "/scenes?split=holdout").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(body.unwrap().error, "not_found");
    let (st, _) = get::<ErrorBody>(&app, "/scenes/nope").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = get::<ErrorBody>(&app, "/scenes/nope/concepts").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = get::<ErrorBody>(&app, "/scenes?page_size=0").await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn scene_detail_lists_objects_and_caption() {
    let app = app();
    let ds = dataset();
    let id = first_val_scene(&ds);
    let (st, d) = get::<SceneDetail>(&app, &format!("/scenes/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    let d = d.unwrap();
    assert_eq!(d.summary.objects.len(), ds.scene(&id).unwrap().objects.len());
    assert!(!d.caption.is_empty());
    let mut det = d.detected.clone();
    det.sort();
    let mut labels = d.summary.labels.clone();
    labels.sort();
    assert_eq!(det, labels);
}

#[tokio::test]
async fn concepts_for_person_dog_frisbee_grass_scene() {
    let mut ds = dataset();
    let idx = ds.scenes.iter().position(|s| s.split == Split::Val).unwrap();
    let labels = ["person", "dog", "frisbee", "grass"];
    let scene = &mut ds.scenes[idx];
    scene.objects.truncate(labels.len());
    assert_eq!(scene.objects.len(), 4, "fixture scene needs four objects");
    for (o, l) in scene.objects.iter_mut().zip(labels) {
        o.label = l.into();
    }
    let id = scene.scene_id.clone();
    let app = router(Arc::new(AppState::new(ds.clone(), &[], 20)));
    let (st, c) = get::<ConceptsResponse>(&app, &format!("/scenes/{id}/concepts")).await;
    assert_eq!(st, StatusCode::OK);
    let c = c.unwrap();
    // four object labels plus the caption's color word and "scene"
    assert_eq!(c.candidate_concepts.len(), 6, "{:?}", c.candidate_concepts);
    for l in labels {
        assert!(c.candidate_concepts.contains(&l.to_string()));
    }
    assert_eq!(c.categories, ds.taxonomy().names().to_vec());
    let (_, again) = get::<ConceptsResponse>(&app, &format!("/scenes/{id}/concepts")).await;
    assert_eq!(c, again.unwrap());
}

#[tokio::test]
async fn fabricated_concept_is_rejected_with_offenders() {
    let app = app();
    let ds = dataset();
    let id = first_val_scene(&ds);
    let label = ds.scene(&id).unwrap().objects[0].label.clone();
    let req = GenerateRequest {
        scene_id: id,
        variant: "explicit".into(),
        concepts: Some(vec![label, "unicorn".into()]),
        category: Some("object".into()),
        ..Default::default()
    };
    let (st, body) = generate(&app, &req).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.error, "validation");
    assert_eq!(err.offenders, vec!["unicorn".to_string()]);
}

#[tokio::test]
async fn explicit_request_validation() {
    let app = app();
    let ds = dataset();
    let id = first_val_scene(&ds);
    let labels = ds.scene(&id).unwrap().labels();
    let base = GenerateRequest {
        scene_id: id.clone(),
        variant: "explicit".into(),
        ..Default::default()
    };
    let cases = [
        GenerateRequest { ..base.clone() },
        GenerateRequest {
            concepts: Some(labels[..3].to_vec()),
            ..base.clone()
        },
        GenerateRequest {
            concepts: Some(vec![labels[0].clone(), labels[0].clone()]),
            ..base.clone()
        },
        GenerateRequest {
            category: Some("weather".into()),
            ..base.clone()
        },
        GenerateRequest {
            mode: Some("predicted".into()),
            ..base.clone()
        },
    ];
    for req in &cases {
        let (st, body) = generate(&app, req).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{req:?} -> {}", String::from_utf8_lossy(&body));
    }
    let implicit_with_concepts = GenerateRequest {
        variant: "implicit".into(),
        concepts: Some(vec![labels[0].clone()]),
        ..base.clone()
    };
    let (st, _) = generate(&app, &implicit_with_concepts).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let unknown_field = Request::post("/generate")
        .header("content-type", "application/json")
        .body(Body::from(format!(r#"{{"scene_id":"{id}","variant":"explicit","colour":"red"}}"#)))
        .unwrap();
    let (st, _) = call(&app, unknown_field).await;
    assert!(st.is_client_error());
}

#[tokio::test]
async fn missing_checkpoint_and_unknown_variant() {
    let app = app();
    let id = first_val_scene(&dataset());
    let req = GenerateRequest {
        scene_id: id.clone(),
        variant: "gone".into(),
        ..Default::default()
    };
    let (st, body) = generate(&app, &req).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "unavailable");
    let req = GenerateRequest {
        scene_id: id,
        variant: "nope".into(),
        ..Default::default()
    };
    let (st, _) = generate(&app, &req).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn implicit_returns_predicted_category_and_mask() {
    let app = app();
    let ds = dataset();
    let id = first_val_scene(&ds);
    for variant in ["implicit", "variational"] {
        let req = GenerateRequest {
            scene_id: id.clone(),
            variant: variant.into(),
            ..Default::default()
        };
        let (st, body) = generate(&app, &req).await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.guidance.mode, "predicted");
        assert!(r.guidance.category_predicted);
        let cat = r.guidance.category.unwrap();
        assert!(ds.taxonomy().contains(&cat));
        let mask = r.guidance.mask.unwrap();
        assert!(!mask.is_empty() && mask.len() <= 2);
        assert_eq!(r.guidance.objects.len(), mask.len());
        assert_eq!(r.question, r.question_tokens.join(" "));
    }
}

#[tokio::test]
async fn responses_do_not_depend_on_request_history() {
    let app = app();
    let ds = dataset();
    let ids: Vec<String> = ds.scenes_in(Split::Val).take(3).map(|s| s.scene_id.clone()).collect();
    let req = |id: &str| GenerateRequest {
        scene_id: id.into(),
        variant: "implicit".into(),
        ..Default::default()
    };
    let strip = |b: Vec<u8>| {
        let mut r: GenerateResponse = serde_json::from_slice(&b).unwrap();
        r.latency_ms = 0.0;
        r
    };
    let first = strip(generate(&app, &req(&ids[0])).await.1);
    for id in &ids[1..] {
        generate(&app, &req(id)).await;
    }
    let random = GenerateRequest {
        mode: Some("random".into()),
        seed: Some(9),
        ..req(&ids[1])
    };
    generate(&app, &random).await;
    let again = strip(generate(&app, &req(&ids[0])).await.1);
    assert_eq!(first, again);

    let concurrent = futures_join(&app, &req(&ids[2])).await;
    assert_eq!(concurrent.0, concurrent.1);
}

async fn futures_join(app: &Router, req: &GenerateRequest) -> (GenerateResponse, GenerateResponse) {
    let (a, b) = tokio::join!(generate(app, req), generate(app, req));
    let parse = |b: Vec<u8>| {
        let mut r: GenerateResponse = serde_json::from_slice(&b).unwrap();
        r.latency_ms = 0.0;
        r
    };
    (parse(a.1), parse(b.1))
}

fn trained_explicit() -> &'static (Dataset, Model<f32>) {
    static CELL: OnceLock<(Dataset, Model<f32>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut mcfg = MatrixConfig::default();
        mcfg.data.world.num_scenes = 300;
        mcfg.train.max_steps = 1500;
        mcfg.train.eval_every = 250;
        mcfg.train.patience = 3;
        let data = PreparedData::from_config(&mcfg.data).unwrap();
        let run = default_matrix_runs(&mcfg.model)
            .into_iter()
            .find(|r| r.name == "explicit-guided")
            .unwrap();
        let exp = mcfg.experiment(&run, 1);
        let (_, model) = train(&exp, &data, None).unwrap();
        (data.dataset, model)
    })
}

#[tokio::test]
async fn trained_explicit_model_mentions_selected_concepts() {
    let (ds, model) = trained_explicit();
    let app = router(Arc::new(AppState::new(ds.clone(), &[], 20).with_model("explicit", model.clone())));
    let mut mentioned = 0;
    let mut total = 0;
    for scene in ds.scenes_in(Split::Val) {
        let (_, c) = get::<ConceptsResponse>(&app, &format!("/scenes/{}/concepts", scene.scene_id)).await;
        let cands = c.unwrap().candidate_concepts;
        let labels = scene.labels();
        let chosen: Vec<String> = cands.iter().filter(|t| labels.contains(t)).take(2).cloned().collect();
        let req = GenerateRequest {
            scene_id: scene.scene_id.clone(),
            variant: "explicit".into(),
            concepts: Some(chosen.clone()),
            category: Some("object".into()),
            ..Default::default()
        };
        let (st, body) = generate(&app, &req).await;
        assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.guidance.concepts, chosen);
        assert_eq!(r.guidance.category.as_deref(), Some("object"));
        assert!(!r.guidance.category_predicted);
        total += 1;
        if chosen.iter().any(|c| r.question_tokens.contains(c)) {
            mentioned += 1;
        }
    }
    let rate = mentioned as f64 / total as f64;
    println!("selected-concept mention rate {rate:.3} over {total} val scenes");
    assert!(rate >= 0.7, "mention rate {rate}");
}
