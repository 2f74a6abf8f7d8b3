use gvqg_core::harness::{
    evaluate, evaluate_checkpoint, train, DataConfig, EvalMode, ExperimentConfig, PreparedData, RunStatus, TrainConfig,
};
use gvqg_core::models::{ModelConfig, Variant};
use gvqg_core::neural::ModelDims;
use gvqg_core::world::{Split, WorldConfig};

fn dims() -> ModelDims {
    ModelDims {
        d_model: 16,
        heads: 2,
        text_layers: 1,
        image_layers: 1,
        decoder_layers: 1,
        ffn_dim: 32,
        head_hidden: 16,
        max_len: 20,
        init_std: 0.02,
    }
}

fn data() -> PreparedData {
    PreparedData::from_config(&DataConfig {
        world: WorldConfig {
            num_scenes: 40,
            feature_dim: 16,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap()
}

fn experiment(variant: Variant, modes: Vec<EvalMode>) -> ExperimentConfig {
    ExperimentConfig {
        name: format!("{variant}"),
        model: ModelConfig {
            variant,
            dims: dims(),
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: 8,
            lr: 3e-3,
            max_steps: 40,
            eval_every: 10,
            patience: 10,
            eval_batch: 32,
            ..Default::default()
        },
        eval_modes: modes,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn frozen_model_stops_after_patience_runs_out() {
    let d = data();
    let mut cfg = experiment(Variant::Baseline, vec![EvalMode::ImageOnly]);
    cfg.train.lr = 0.0;
    cfg.train.patience = 1;
    let (rec, _) = train(&cfg, &d, None).unwrap();
    assert_eq!(rec.status, RunStatus::Patience);
    assert_eq!(rec.evals.len(), 2);
    assert_eq!(rec.steps, 20);
    assert_eq!(rec.best_step, 10);
}

#[test]
fn best_bleu_is_the_maximum_of_the_eval_history() {
    let d = data();
    let cfg = experiment(Variant::Explicit, vec![EvalMode::Filtered]);
    let (rec, _) = train(&cfg, &d, None).unwrap();
    let max = rec.evals.iter().map(|e| e.bleu_4).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(rec.best_bleu_4, max);
    let at = rec.evals.iter().find(|e| e.bleu_4 == max).unwrap().step;
    assert_eq!(rec.best_step, at);
    assert_eq!(rec.interval_terms.len(), rec.evals.len());
    assert_eq!(rec.losses.len(), rec.steps);
}

#[test]
fn training_is_deterministic_per_seed() {
    let d = data();
    let cfg = experiment(Variant::Implicit, vec![EvalMode::Predicted]);
    let (a, _) = train(&cfg, &d, None).unwrap();
    let (b, _) = train(&cfg, &d, None).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.reports, b.reports);
    let mut other = cfg.clone();
    other.seed = 5;
    let (c, _) = train(&other, &d, None).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn saved_checkpoint_reproduces_the_final_report() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Variant::Variational, vec![EvalMode::Gold, EvalMode::Predicted, EvalMode::Random]);
    let (rec, _) = train(&cfg, &d, Some(dir.path())).unwrap();
    assert_eq!(rec.inference_reads, 0);
    let path = rec.best_checkpoint.clone().unwrap();
    for mode in [EvalMode::Gold, EvalMode::Predicted] {
        let out = evaluate_checkpoint(&path, &d, Split::Val, mode, cfg.seed).unwrap();
        assert_eq!(&out.report, &rec.reports[&mode], "{mode}");
        assert_eq!(out.inference_reads, 0);
    }
    let gold = evaluate_checkpoint(&path, &d, Split::Val, EvalMode::Gold, cfg.seed).unwrap();
    assert_eq!(gold.report.overlap_accuracy, Some(1.0));
    assert!(evaluate_checkpoint(&path, &d, Split::Val, EvalMode::Filtered, cfg.seed).is_err());
}

#[test]
fn stochastic_modes_do_not_depend_on_batch_size() {
    let d = data();
    let mut cfg = experiment(Variant::Explicit, vec![EvalMode::Random]);
    cfg.train.max_steps = 10;
    let (_, explicit) = train(&cfg, &d, None).unwrap();
    let mut cfg = experiment(Variant::Implicit, vec![EvalMode::Predicted]);
    cfg.train.max_steps = 10;
    let (_, implicit) = train(&cfg, &d, None).unwrap();
    for (m, mode) in [(&explicit, EvalMode::Random), (&implicit, EvalMode::Predicted), (&implicit, EvalMode::Random)] {
        let a = evaluate(m, &d.val, mode, 7, 3).unwrap();
        let b = evaluate(m, &d.val, mode, 64, 3).unwrap();
        assert_eq!(a.questions, b.questions, "{mode}");
        assert_eq!(a.predicted_slots, b.predicted_slots, "{mode}");
    }
}

#[test]
fn config_roundtrips_through_toml() {
    let cfg = experiment(Variant::Explicit, vec![EvalMode::Filtered, EvalMode::Random]);
    let text = toml::to_string(&cfg).unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut changed = cfg.clone();
    changed.train.lr = 1e-2;
    assert_ne!(changed.hash(), cfg.hash());
}

#[test]
fn invalid_mode_for_variant_is_rejected() {
    let cfg = experiment(Variant::Baseline, vec![EvalMode::Gold]);
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("gold") || err.contains("eval_modes"), "{err}");
}
