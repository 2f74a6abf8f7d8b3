//! Startup: manifest parsing, dataset loading and checkpoint preloading.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gvqg_core::models::{scene_input, ConceptResources, Model, PipelineConfig, SceneInput};
use gvqg_core::world::{generate_dataset, read_dataset, CategoryTaxonomy, Dataset, WorldConfig};
use gvqg_core::GvqgError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    /// Name clients use in `GenerateRequest.variant`.
    pub name: String,
    pub path: PathBuf,
}

/// Startup manifest (TOML). Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub dataset_dir: Option<PathBuf>,
    /// Used when `dataset_dir` is absent.
    pub world: WorldConfig,
    pub world_seed: u64,
    pub page_size: usize,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            world: WorldConfig::default(),
            world_seed: 7,
            page_size: 20,
            checkpoints: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, GvqgError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| GvqgError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &m.dataset_dir {
            m.dataset_dir = Some(base.join(d));
        }
        for c in &mut m.checkpoints {
            c.path = base.join(&c.path);
        }
        Ok(m)
    }
}

/// A manifest entry that either loaded or failed to.
#[derive(Clone, Debug)]
pub enum VariantSlot {
    Loaded(Arc<Model<f32>>),
    Missing { path: PathBuf, reason: String },
}

/// Immutable state shared by all requests.
pub struct AppState {
    pub dataset: Dataset,
    pub taxonomy: CategoryTaxonomy,
    pub inputs: HashMap<String, Arc<SceneInput>>,
    pub variants: BTreeMap<String, VariantSlot>,
    pub page_size: usize,
}

impl AppState {
    /// Zero-noise detection and candidate concepts for every scene, plus
    /// the manifest's checkpoints. Unloadable checkpoints are kept as
    /// [`VariantSlot::Missing`] so requests for them get a 503.
    pub fn new(dataset: Dataset, checkpoints: &[CheckpointEntry], page_size: usize) -> Self {
        let res = ConceptResources::default();
        let pipeline = PipelineConfig::default();
        let k_o = dataset.config.k_o;
        let inputs = dataset
            .scenes
            .iter()
            .map(|s| (s.scene_id.clone(), Arc::new(scene_input(s, k_o, &pipeline, &res))))
            .collect();
        let mut variants = BTreeMap::new();
        for c in checkpoints {
            let slot = match Model::<f32>::load(&c.path).and_then(|m| check_compatible(m, &dataset)) {
                Ok(m) => VariantSlot::Loaded(Arc::new(m)),
                Err(e) => {
                    log::warn!("checkpoint {} ({}) unavailable: {e}", c.name, c.path.display());
                    VariantSlot::Missing {
                        path: c.path.clone(),
                        reason: e.to_string(),
                    }
                }
            };
            variants.insert(c.name.clone(), slot);
        }
        Self {
            taxonomy: dataset.taxonomy(),
            dataset,
            inputs,
            variants,
            page_size: page_size.max(1),
        }
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self, GvqgError> {
        let dataset = match &m.dataset_dir {
            Some(d) => read_dataset(d)?,
            None => generate_dataset(&m.world, m.world_seed)?,
        };
        Ok(Self::new(dataset, &m.checkpoints, m.page_size))
    }

    /// Adds an in-memory model under `name`.
    pub fn with_model(mut self, name: &str, model: Model<f32>) -> Self {
        self.variants.insert(name.into(), VariantSlot::Loaded(Arc::new(model)));
        self
    }
}

fn check_compatible(m: Model<f32>, ds: &Dataset) -> Result<Model<f32>, GvqgError> {
    if m.k_o != ds.config.k_o || m.feature_dim != ds.config.feature_dim {
        return Err(GvqgError::Checkpoint(format!(
            "checkpoint expects k_o={} feature_dim={}, dataset has k_o={} feature_dim={}",
            m.k_o, m.feature_dim, ds.config.k_o, ds.config.feature_dim
        )));
    }
    if m.taxonomy != ds.taxonomy() {
        return Err(GvqgError::Checkpoint("category taxonomy differs from the dataset".into()));
    }
    Ok(m)
}
