//! Experiment configuration, the training loop with BLEU-4 early stopping,
//! checkpoint evaluation and the 12-row comparison matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{random_selection, seed_for, ConceptSelection, SelectionMode};
use crate::metrics::{overlap_accuracy, EvalCorpus, EvalReport};
use crate::models::{
    build_examples, ConceptResources, Example, ExplicitInput, Guidance, Model, ModelConfig, PipelineConfig,
    SceneInput, Variant,
};
use crate::neural::ModelDims;
use crate::params::{Adam, AdamConfig};
use crate::realism::{self, Phase};
use crate::vocab::Vocab;
use crate::world::{generate_dataset, read_dataset, Dataset, Split, WorldConfig};
use crate::GvqgError;

/// How guidance is produced when evaluating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// No guidance input.
    ImageOnly,
    /// QA-filtered concepts plus the answer category.
    Filtered,
    /// Answer category only.
    CategoryOnly,
    /// QA-filtered concepts only.
    ObjectsOnly,
    /// Gold object slots.
    Gold,
    /// The model's own object prediction.
    Predicted,
    /// Random concepts and category (explicit) or random slots (implicit).
    Random,
}

impl EvalMode {
    pub const ALL: [EvalMode; 7] = [
        EvalMode::ImageOnly,
        EvalMode::Filtered,
        EvalMode::CategoryOnly,
        EvalMode::ObjectsOnly,
        EvalMode::Gold,
        EvalMode::Predicted,
        EvalMode::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::ImageOnly => "image-only",
            EvalMode::Filtered => "filtered",
            EvalMode::CategoryOnly => "category-only",
            EvalMode::ObjectsOnly => "objects-only",
            EvalMode::Gold => "gold",
            EvalMode::Predicted => "predicted",
            EvalMode::Random => "random",
        }
    }

    /// Whether a model built from `cfg` can be evaluated in this mode.
    pub fn valid_for(self, cfg: &ModelConfig) -> bool {
        match cfg.variant {
            Variant::Baseline => self == EvalMode::ImageOnly,
            Variant::Explicit => match cfg.explicit_input {
                ExplicitInput::Guided => matches!(
                    self,
                    EvalMode::Filtered | EvalMode::CategoryOnly | EvalMode::ObjectsOnly | EvalMode::Random
                ),
                ExplicitInput::Category => matches!(self, EvalMode::CategoryOnly | EvalMode::Random),
                ExplicitInput::Objects => matches!(self, EvalMode::ObjectsOnly | EvalMode::Random),
            },
            Variant::Implicit if !cfg.object_guidance => self == EvalMode::ImageOnly,
            Variant::Implicit | Variant::Variational => {
                matches!(self, EvalMode::Gold | EvalMode::Predicted | EvalMode::Random)
            }
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = GvqgError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GvqgError::Parse(format!("unknown eval mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Cap on validation items used for early-stopping evaluations.
    pub early_stop_items: Option<usize>,
    /// Cap on validation items used for final reports.
    pub eval_items: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-4,
            clip_norm: 1.0,
            max_steps: 5000,
            eval_every: 250,
            patience: 10,
            early_stop_items: None,
            eval_items: None,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GvqgError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("eval_batch", self.eval_batch),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(GvqgError::config(field, "must be positive"));
            }
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(GvqgError::config("lr", "must be a finite non-negative number"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(GvqgError::config("clip_norm", "must be non-negative (0 disables clipping)"));
        }
        Ok(())
    }
}

/// Where the dataset comes from: a directory written by `worldgen`, or a
/// world config generated on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub world_seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            world: WorldConfig::default(),
            world_seed: 7,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset, GvqgError> {
        match &self.dataset_dir {
            Some(dir) => read_dataset(dir),
            None => generate_dataset(&self.world, self.world_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Modes reported after training.
    pub eval_modes: Vec<EvalMode>,
    /// Mode used for early stopping; defaults to the first eval mode.
    pub early_stop_mode: Option<EvalMode>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_modes: vec![EvalMode::Filtered],
            early_stop_mode: None,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, GvqgError> {
        let cfg: Self = toml::from_str(text).map_err(|e| GvqgError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stop_mode(&self) -> EvalMode {
        self.early_stop_mode
            .or_else(|| self.eval_modes.first().copied())
            .unwrap_or(EvalMode::ImageOnly)
    }

    pub fn validate(&self) -> Result<(), GvqgError> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.world.validate()?;
        if self.eval_modes.is_empty() {
            return Err(GvqgError::config("eval_modes", "at least one mode required"));
        }
        for m in self.eval_modes.iter().copied().chain(self.early_stop_mode) {
            if !m.valid_for(&self.model) {
                return Err(GvqgError::config(
                    "eval_modes",
                    format!("mode {m} is not valid for the {} variant", self.model.variant),
                ));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Train/val examples prepared once and shared by runs.
pub struct PreparedData {
    pub dataset: Dataset,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub resources: ConceptResources,
}

impl PreparedData {
    pub fn new(dataset: Dataset, pipeline: &PipelineConfig) -> Result<Self, GvqgError> {
        let resources = ConceptResources::default();
        let train = build_examples(&dataset, Split::Train, pipeline, &resources)?;
        let val = build_examples(&dataset, Split::Val, pipeline, &resources)?;
        Ok(Self {
            dataset,
            train,
            val,
            resources,
        })
    }

    pub fn from_config(cfg: &DataConfig) -> Result<Self, GvqgError> {
        Self::new(cfg.load()?, &cfg.pipeline)
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Result of one evaluation pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: EvalMode,
    pub report: EvalReport,
    /// Predicted object slots per item, for implicit variants.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicted_slots: Vec<Vec<usize>>,
    /// Generated questions, in item order.
    pub questions: Vec<Vec<String>>,
    /// Ground-truth reads observed during inference (must be 0).
    pub inference_reads: u64,
}

/// Builds guidance for each example from its QA (selection phase only).
/// `offset` is the position of `examples[0]` in the evaluated split.
fn resolve_guidance(
    model: &Model<f32>,
    examples: &[&Example],
    offset: usize,
    mode: EvalMode,
    seed: u64,
) -> Result<Vec<Guidance>, GvqgError> {
    let _phase = realism::enter(Phase::Selection);
    let k = model.config.k;
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(match mode {
                EvalMode::ImageOnly => Guidance::None,
                EvalMode::Gold => Guidance::Gold(e.truth.read().gold_slots.clone()),
                EvalMode::Predicted => Guidance::Predicted,
                EvalMode::Random if model.variant() != Variant::Explicit => Guidance::Random,
                EvalMode::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &format!("random-selection:{}", offset + i)));
                    let mut sel = random_selection(&e.input.candidates, k, &model.taxonomy, &mut rng);
                    match model.config.explicit_input {
                        ExplicitInput::Category => sel.concepts.clear(),
                        ExplicitInput::Objects => sel.category = None,
                        ExplicitInput::Guided => {}
                    }
                    Guidance::Select(sel)
                }
                EvalMode::Filtered | EvalMode::CategoryOnly | EvalMode::ObjectsOnly => {
                    let f = &e.truth.read().filtered;
                    Guidance::Select(ConceptSelection {
                        concepts: if mode == EvalMode::CategoryOnly { Vec::new() } else { f.concepts.clone() },
                        category: if mode == EvalMode::ObjectsOnly { None } else { f.category.clone() },
                        mode: SelectionMode::Filtered,
                    })
                }
            })
        })
        .collect()
}

/// Greedy generation over `examples` and full metric report.
pub fn evaluate(
    model: &Model<f32>,
    examples: &[Example],
    mode: EvalMode,
    batch_size: usize,
    seed: u64,
) -> Result<EvalOutcome, GvqgError> {
    if !mode.valid_for(&model.config) {
        return Err(GvqgError::InvalidInput(format!(
            "mode {mode} is not valid for the {} variant",
            model.variant()
        )));
    }
    if examples.is_empty() {
        return Err(GvqgError::EmptyCorpus);
    }
    let reads_before = realism::inference_reads();
    let mut questions = Vec::with_capacity(examples.len());
    let mut predicted_slots = Vec::new();
    let implicit = matches!(model.variant(), Variant::Implicit | Variant::Variational) && model.config.object_guidance;
    // one stream for the whole pass: masks are drawn row by row, so results
    // do not depend on the batch size
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "generate"));
    let batch_size = batch_size.max(1);
    for (b, chunk) in examples.chunks(batch_size).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let guidance = resolve_guidance(model, &refs, b * batch_size, mode, seed)?;
        let inputs: Vec<&SceneInput> = chunk.iter().map(|e| e.input.as_ref()).collect();
        let out = model.generate(&inputs, &guidance, &mut rng)?;
        for o in out {
            if implicit {
                predicted_slots.push(o.mask.as_ref().map(|m| m.indices()).unwrap_or_default());
            }
            questions.push(o.question);
        }
    }
    let inference_reads = realism::inference_reads() - reads_before;
    let _phase = realism::enter(Phase::Scoring);
    let mut corpus = EvalCorpus::new(mode.name());
    for (q, e) in questions.iter().zip(examples) {
        corpus.push(q.clone(), e.truth.read().question.clone());
    }
    let overlap = if implicit {
        let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.truth.read().gold_slots.clone()).collect();
        Some(overlap_accuracy(&predicted_slots, &gold, model.config.k)?)
    } else {
        None
    };
    Ok(EvalOutcome {
        mode,
        report: EvalReport::compute(&corpus, overlap)?,
        predicted_slots,
        questions,
        inference_reads,
    })
}

/// Loads a checkpoint and evaluates it on a split.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &PreparedData,
    split: Split,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalOutcome, GvqgError> {
    let model = Model::<f32>::load(checkpoint)?;
    let world = &data.dataset.config;
    if model.k_o != world.k_o || model.feature_dim != world.feature_dim {
        return Err(GvqgError::Checkpoint(format!(
            "checkpoint expects k_o={} feature_dim={}, dataset has k_o={} feature_dim={}",
            model.k_o, model.feature_dim, world.k_o, world.feature_dim
        )));
    }
    evaluate(&model, data.examples(split), mode, 64, seed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunStatus {
    Patience,
    StepCap,
    /// Training aborted on a non-finite loss or gradient.
    Aborted { step: usize, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub bleu_4: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub steps: usize,
    /// Total loss at every step.
    pub losses: Vec<f64>,
    /// Mean of each loss term over each eval interval.
    pub interval_terms: Vec<BTreeMap<String, f64>>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_bleu_4: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub status: RunStatus,
    pub reports: BTreeMap<EvalMode, EvalReport>,
    pub inference_reads: u64,
    pub wall_time_s: f64,
}

fn new_model(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Model<f32>, GvqgError> {
    let taxonomy = data.dataset.taxonomy();
    let world = &data.dataset.config;
    Model::new(
        cfg.model.clone(),
        Vocab::standard(&taxonomy),
        taxonomy,
        world.feature_dim,
        world.k_o,
        cfg.seed,
    )
}

fn capped(examples: &[Example], cap: Option<usize>) -> &[Example] {
    &examples[..cap.map_or(examples.len(), |c| c.min(examples.len()))]
}

/// Trains with periodic BLEU-4 evaluation on the validation split, keeps the
/// best parameters, and reports every configured eval mode at the end.
/// A non-finite loss ends the run with [`RunStatus::Aborted`].
pub fn train(cfg: &ExperimentConfig, data: &PreparedData, out_dir: Option<&Path>) -> Result<(RunRecord, Model<f32>), GvqgError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut model = new_model(cfg, data)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.train.lr,
            clip_norm: cfg.train.clip_norm,
            ..Default::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, "train"));
    let stop_mode = cfg.stop_mode();
    let stop_examples = capped(&data.val, cfg.train.early_stop_items);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::new();
    let mut interval_terms = Vec::new();
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    let mut acc_n = 0usize;
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64, crate::params::ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut reads = 0;
    let mut status = RunStatus::StepCap;
    let mut step = 0;
    while step < cfg.train.max_steps {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        for _ in 0..cfg.train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data.train[order[cursor]]);
            cursor += 1;
        }
        match model.train_step(&mut adam, &batch, &mut rng) {
            Ok(terms) => {
                losses.push(terms["total"]);
                for (k, v) in terms {
                    *acc.entry(k).or_insert(0.0) += v;
                }
                acc_n += 1;
            }
            Err(GvqgError::NonFiniteLoss { .. }) => {
                log::error!("{}: non-finite loss at step {step}", cfg.name);
                status = RunStatus::Aborted {
                    step,
                    reason: "non-finite loss or gradient".into(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
        step += 1;
        if step % cfg.train.eval_every == 0 || step == cfg.train.max_steps {
            interval_terms.push(acc.iter().map(|(k, v)| (k.clone(), v / acc_n as f64)).collect());
            acc.clear();
            acc_n = 0;
            let out = evaluate(&model, stop_examples, stop_mode, cfg.train.eval_batch, cfg.seed)?;
            reads += out.inference_reads;
            let b4 = out.report.bleu_4;
            log::info!("{} step {step}: bleu_4 {:.4}", cfg.name, b4);
            evals.push(EvalPoint { step, bleu_4: b4 });
            if best.as_ref().is_none_or(|(_, b, _)| b4 > *b) {
                best = Some((step, b4, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.train.patience {
                    status = RunStatus::Patience;
                    break;
                }
            }
        }
    }
    let (best_step, best_bleu_4) = match best {
        Some((s, b, store)) => {
            model.store = store;
            (s, b)
        }
        None => (0, 0.0),
    };
    let best_checkpoint = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}-seed{}.ckpt.json", cfg.name, cfg.seed));
            model.save(&path)?;
            Some(path)
        }
        None => None,
    };
    let mut reports = BTreeMap::new();
    if !matches!(status, RunStatus::Aborted { .. }) {
        let final_examples = capped(&data.val, cfg.train.eval_items);
        for &m in &cfg.eval_modes {
            let out = evaluate(&model, final_examples, m, cfg.train.eval_batch, cfg.seed)?;
            reads += out.inference_reads;
            reports.insert(m, out.report);
        }
    }
    let record = RunRecord {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        variant: cfg.model.variant,
        steps: step,
        losses,
        interval_terms,
        evals,
        best_step,
        best_bleu_4,
        best_checkpoint,
        status,
        reports,
        inference_reads: reads,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

/// One training configuration of the matrix and the rows it feeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub name: String,
    pub model: ModelConfig,
    pub early_stop_mode: EvalMode,
    pub rows: Vec<MatrixRowSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRowSpec {
    pub block: String,
    pub label: String,
    pub mode: EvalMode,
}

fn row(block: &str, label: &str, mode: EvalMode) -> MatrixRowSpec {
    MatrixRowSpec {
        block: block.into(),
        label: label.into(),
        mode,
    }
}

/// The seven training runs behind the twelve comparison rows.
pub fn default_matrix_runs(base: &ModelConfig) -> Vec<MatrixRun> {
    let with = |variant, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        m.variant = variant;
        f(&mut m);
        m
    };
    vec![
        MatrixRun {
            name: "image-only".into(),
            model: with(Variant::Baseline, &|_| {}),
            early_stop_mode: EvalMode::ImageOnly,
            rows: vec![row("explicit", "image-only", EvalMode::ImageOnly)],
        },
        MatrixRun {
            name: "explicit-category".into(),
            model: with(Variant::Explicit, &|m| m.explicit_input = ExplicitInput::Category),
            early_stop_mode: EvalMode::CategoryOnly,
            rows: vec![row("explicit", "image-category", EvalMode::CategoryOnly)],
        },
        MatrixRun {
            name: "explicit-objects".into(),
            model: with(Variant::Explicit, &|m| m.explicit_input = ExplicitInput::Objects),
            early_stop_mode: EvalMode::ObjectsOnly,
            rows: vec![row("explicit", "image-objects", EvalMode::ObjectsOnly)],
        },
        MatrixRun {
            name: "explicit-guided".into(),
            model: with(Variant::Explicit, &|m| m.explicit_input = ExplicitInput::Guided),
            early_stop_mode: EvalMode::Filtered,
            rows: vec![
                row("explicit", "image-guided", EvalMode::Filtered),
                row("explicit", "image-guided-random", EvalMode::Random),
            ],
        },
        MatrixRun {
            name: "implicit-category".into(),
            model: with(Variant::Implicit, &|m| m.object_guidance = false),
            early_stop_mode: EvalMode::ImageOnly,
            rows: vec![row("implicit", "image-category", EvalMode::ImageOnly)],
        },
        MatrixRun {
            name: "implicit".into(),
            model: with(Variant::Implicit, &|_| {}),
            early_stop_mode: EvalMode::Gold,
            rows: vec![
                row("implicit", "gold", EvalMode::Gold),
                row("implicit", "pred", EvalMode::Predicted),
                row("implicit", "random", EvalMode::Random),
            ],
        },
        MatrixRun {
            name: "variational".into(),
            model: with(Variant::Variational, &|_| {}),
            early_stop_mode: EvalMode::Gold,
            rows: vec![
                row("variational", "gold", EvalMode::Gold),
                row("variational", "pred", EvalMode::Predicted),
                row("variational", "random", EvalMode::Random),
            ],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub data: DataConfig,
    /// Base model settings; each run overrides the variant-specific fields.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Empty means [`default_matrix_runs`].
    pub runs: Vec<MatrixRun>,
    pub out_dir: Option<PathBuf>,
}

/// Model size used by the desk matrix.
pub fn desk_dims() -> ModelDims {
    ModelDims {
        d_model: 32,
        heads: 4,
        text_layers: 1,
        image_layers: 1,
        decoder_layers: 1,
        ffn_dim: 64,
        head_hidden: 32,
        max_len: 24,
        init_std: 0.02,
    }
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig {
                dims: desk_dims(),
                ..Default::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                early_stop_items: Some(256),
                ..Default::default()
            },
            seeds: vec![1, 2, 3],
            runs: Vec::new(),
            out_dir: None,
        }
    }
}

impl MatrixConfig {
    pub fn from_toml(text: &str) -> Result<Self, GvqgError> {
        let cfg: Self = toml::from_str(text).map_err(|e| GvqgError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GvqgError> {
        if self.seeds.is_empty() {
            return Err(GvqgError::config("seeds", "at least one seed required"));
        }
        self.train.validate()?;
        for run in self.effective_runs() {
            self.experiment(&run, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn effective_runs(&self) -> Vec<MatrixRun> {
        if self.runs.is_empty() {
            default_matrix_runs(&self.model)
        } else {
            self.runs.clone()
        }
    }

    pub fn experiment(&self, run: &MatrixRun, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: run.name.clone(),
            data: self.data.clone(),
            model: run.model.clone(),
            train: self.train.clone(),
            eval_modes: run.rows.iter().map(|r| r.mode).collect(),
            early_stop_mode: Some(run.early_stop_mode),
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixRowResult {
    pub block: String,
    pub label: String,
    pub run: String,
    pub mode: EvalMode,
    /// One report per seed that finished.
    pub per_seed: Vec<EvalReport>,
    /// Per-metric median over seeds.
    pub median: Option<EvalReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixFailure {
    pub run: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixResult {
    pub rows: Vec<MatrixRowResult>,
    pub records: Vec<RunRecord>,
    pub failures: Vec<MatrixFailure>,
    pub inference_reads: u64,
    pub wall_time_s: f64,
    /// `k / k_o` for the configured world.
    pub analytic_random_overlap: f64,
}

impl MatrixResult {
    pub fn row(&self, block: &str, label: &str) -> Option<&MatrixRowResult> {
        self.rows.iter().find(|r| r.block == block && r.label == label)
    }

    /// Markdown comparison table, metrics ×100.
    pub fn table(&self) -> String {
        let mut s = String::from(
            "| block | row | seeds | BLEU-1 | BLEU-4 | ROUGE-L | CIDEr | METEOR | MSJ-4 | overlap |\n|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            match &r.median {
                Some(m) => s.push_str(&format!(
                    "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
                    r.block,
                    r.label,
                    r.per_seed.len(),
                    m.bleu_1 * 100.0,
                    m.bleu_4 * 100.0,
                    m.rouge_l * 100.0,
                    m.cider * 100.0,
                    m.meteor * 100.0,
                    m.msj_4 * 100.0,
                    m.overlap_accuracy.map_or("-".to_string(), |o| format!("{:.2}", o * 100.0)),
                )),
                None => s.push_str(&format!("| {} | {} | 0 | failed | | | | | | |\n", r.block, r.label)),
            }
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-field median of several reports.
pub fn median_report(reports: &[EvalReport]) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let f = |g: fn(&EvalReport) -> f64| median(reports.iter().map(g).collect());
    let overlaps: Vec<f64> = reports.iter().filter_map(|r| r.overlap_accuracy).collect();
    Some(EvalReport {
        items: reports[0].items,
        bleu_1: f(|r| r.bleu_1),
        bleu_2: f(|r| r.bleu_2),
        bleu_3: f(|r| r.bleu_3),
        bleu_4: f(|r| r.bleu_4),
        rouge_l: f(|r| r.rouge_l),
        cider: f(|r| r.cider),
        meteor: f(|r| r.meteor),
        msj_3: f(|r| r.msj_3),
        msj_4: f(|r| r.msj_4),
        msj_5: f(|r| r.msj_5),
        overlap_accuracy: (!overlaps.is_empty()).then(|| median(overlaps)),
    })
}

/// Runs every training configuration for every seed; failures are recorded
/// and the matrix continues.
pub fn run_matrix(cfg: &MatrixConfig, data: &PreparedData) -> Result<MatrixResult, GvqgError> {
    cfg.validate()?;
    let started = Instant::now();
    let runs = cfg.effective_runs();
    let mut rows: Vec<MatrixRowResult> = runs
        .iter()
        .flat_map(|run| {
            run.rows.iter().map(|r| MatrixRowResult {
                block: r.block.clone(),
                label: r.label.clone(),
                run: run.name.clone(),
                mode: r.mode,
                per_seed: Vec::new(),
                median: None,
            })
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut reads = 0;
    for run in &runs {
        for &seed in &cfg.seeds {
            let exp = cfg.experiment(run, seed);
            let run_dir = cfg.out_dir.as_ref().map(|d| d.join("checkpoints"));
            match train(&exp, data, run_dir.as_deref()) {
                Ok((record, _)) => {
                    reads += record.inference_reads;
                    if let RunStatus::Aborted { reason, .. } = &record.status {
                        failures.push(MatrixFailure {
                            run: run.name.clone(),
                            seed,
                            error: reason.clone(),
                        });
                    }
                    for r in rows.iter_mut().filter(|r| r.run == run.name) {
                        if let Some(rep) = record.reports.get(&r.mode) {
                            r.per_seed.push(rep.clone());
                        }
                    }
                    log::info!(
                        "matrix {} seed {seed}: {} steps, best bleu_4 {:.4}, {:.1}s",
                        run.name,
                        record.steps,
                        record.best_bleu_4,
                        record.wall_time_s
                    );
                    records.push(record);
                }
                Err(e) => {
                    log::error!("matrix {} seed {seed} failed: {e}", run.name);
                    failures.push(MatrixFailure {
                        run: run.name.clone(),
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    for r in &mut rows {
        r.median = median_report(&r.per_seed);
    }
    let result = MatrixResult {
        rows,
        records,
        failures,
        inference_reads: reads,
        wall_time_s: started.elapsed().as_secs_f64(),
        analytic_random_overlap: cfg.model.k as f64 / data.dataset.config.k_o as f64,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&result).map_err(|e| GvqgError::Parse(e.to_string()))?;
        std::fs::write(dir.join("matrix.json"), json)?;
        std::fs::write(dir.join("matrix.md"), result.table())?;
    }
    Ok(result)
}
