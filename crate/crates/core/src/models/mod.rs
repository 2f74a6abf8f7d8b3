//! The four generator variants built on the shared transformer stack:
//! image-only baseline, explicit (actor-supplied concepts and category),
//! implicit (predicted k-hot object mask and category) and its variational
//! counterpart.

pub mod data;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttentionSpec, Graph, Segment, Var};
use crate::concepts::ConceptSelection;
use crate::neural::{
    self, decode, fuse, teacher_forced_nll, uniform_segs, Decoder, EncoderStack, ImageEncoder, Linear, Memory,
    Mlp, ModelDims, Rows, Sampling, Specials, TextEncoder,
};
use crate::params::{Adam, NamedTensor, ParamId, ParamStore};
use crate::realism::{self, Phase};
use crate::sampling::{draw_noise, random_k_subset, sample_k_hot_masked, GuidanceMask, GumbelConfig, MaskMode};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use crate::vocab::Vocab;
use crate::world::CategoryTaxonomy;
use crate::GvqgError;

pub use data::{build_examples, scene_input, ConceptResources, Example, PipelineConfig, QaTruth, SceneInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Explicit,
    Implicit,
    Variational,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Explicit, Variant::Implicit, Variant::Variational];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Explicit => "explicit",
            Variant::Implicit => "implicit",
            Variant::Variational => "variational",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = GvqgError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GvqgError::Parse(format!("unknown variant {s:?}")))
    }
}

/// Which parts of a concept selection the explicit model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplicitInput {
    /// Concepts and category.
    Guided,
    /// Category only.
    Category,
    /// Concepts only.
    Objects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dims: ModelDims,
    /// Guiding concepts / sampled objects per question.
    pub k: usize,
    pub gumbel: GumbelConfig,
    pub explicit_input: ExplicitInput,
    /// Implicit only: when false the model predicts a category but no
    /// object mask.
    pub object_guidance: bool,
    pub start_end_weight: f64,
    /// KL weight in the variational objective.
    pub beta: f64,
    /// Optional membership loss on the variational posterior logits.
    pub posterior_membership_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Explicit,
            dims: ModelDims::default(),
            k: 2,
            gumbel: GumbelConfig::default(),
            explicit_input: ExplicitInput::Guided,
            object_guidance: true,
            start_end_weight: 1.0,
            beta: 1.0,
            posterior_membership_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GvqgError> {
        self.dims.validate()?;
        self.gumbel.validate()?;
        if self.k == 0 {
            return Err(GvqgError::config("k", "must be at least 1"));
        }
        if !self.object_guidance && self.variant != Variant::Implicit {
            return Err(GvqgError::config("object_guidance", "can only be disabled for the implicit variant"));
        }
        for (field, v) in [
            ("beta", self.beta),
            ("start_end_weight", self.start_end_weight),
            ("posterior_membership_weight", self.posterior_membership_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GvqgError::config(field, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Guidance supplied to one generation call.
#[derive(Clone, Debug, PartialEq)]
pub enum Guidance {
    /// Image only (baseline, implicit image-category).
    None,
    /// Explicit concepts and/or category.
    Select(ConceptSelection),
    /// Object mask from the model's own score/prior head.
    Predicted,
    /// Object mask from given slot indices.
    Gold(Vec<usize>),
    /// Uniform random object mask.
    Random,
}

impl Guidance {
    pub fn label(&self) -> &'static str {
        match self {
            Guidance::None => "none",
            Guidance::Select(_) => "select",
            Guidance::Predicted => "predicted",
            Guidance::Gold(_) => "gold",
            Guidance::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub question: Vec<String>,
    pub category: Option<String>,
    pub mask: Option<GuidanceMask>,
    pub selection: Option<ConceptSelection>,
}

/// Per-slot logits head: `MLP([slot row; context rows...])`, with the
/// first layer split into one linear map per input block.
#[derive(Clone, Debug)]
struct SlotHead {
    inputs: Vec<Linear>,
    out: Linear,
}

impl SlotHead {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, blocks: usize, dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            inputs: (0..blocks)
                .map(|i| Linear::new(store, &format!("{name}.in{i}"), dims.d_model, dims.head_hidden, dims.init_std, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), dims.head_hidden, 1, dims.init_std, rng),
        }
    }

    /// `blocks` must all have the same number of rows (one per slot).
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, blocks: &[Var]) -> Var {
        let mut h = self.inputs[0].forward(g, blocks[0]);
        for (lin, &b) in self.inputs.iter().zip(blocks).skip(1) {
            let w = g.param(lin.w);
            let x = g.matmul(b, w);
            h = g.add(h, x);
        }
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct ImplicitParts {
    obj_embed: ParamId,
    score: Option<Mlp>,
    cat_head: Mlp,
    cat_embed: ParamId,
    text: Option<TextEncoder>,
}

#[derive(Clone, Debug)]
struct VariationalParts {
    encode: EncoderStack,
    cls: ParamId,
    prior: SlotHead,
    posterior: SlotHead,
}

#[derive(Clone, Debug)]
struct Net {
    image: ImageEncoder,
    decoder: Decoder,
    text: Option<TextEncoder>,
    implicit: Option<ImplicitParts>,
    variational: Option<VariationalParts>,
}

/// A generator with its parameters and the vocabulary it was built for.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub taxonomy: CategoryTaxonomy,
    pub feature_dim: usize,
    pub k_o: usize,
    pub seed: u64,
    pub store: ParamStore<T>,
    net: Net,
}

/// Scalar loss terms of one training step.
pub type LossTerms = BTreeMap<String, f64>;

struct Loss {
    total: Var,
    terms: Vec<(&'static str, Var)>,
}

/// Batched image-encoder inputs.
struct ImageBatch<T> {
    features: Tensor<T>,
    boxes: Tensor<T>,
    valid: Vec<bool>,
}

fn image_batch<T: Scalar>(inputs: &[&SceneInput]) -> ImageBatch<T> {
    let feats: Vec<&[Vec<f64>]> = inputs.iter().map(|x| x.detection.features.as_slice()).collect();
    let boxes: Vec<&[[f64; 4]]> = inputs.iter().map(|x| x.detection.boxes.as_slice()).collect();
    let (features, boxes) = neural::image_tensors(&feats, &boxes);
    ImageBatch {
        features,
        boxes,
        valid: inputs.iter().flat_map(|x| x.detection.valid.iter().copied()).collect(),
    }
}

fn column<T: Scalar>(v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(v.len(), 1, v.iter().map(|&x| s::<T>(x)).collect()).expect("column")
}

fn row_argmax<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows()).map(|r| neural::argmax(t.row(r))).collect()
}

/// `(start, 1)` windows over one row per example.
fn single_rows(batch: usize) -> Vec<(usize, usize)> {
    uniform_segs(batch, 1)
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of `(config, vocab, taxonomy, feature_dim, k_o, seed)`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        taxonomy: CategoryTaxonomy,
        feature_dim: usize,
        k_o: usize,
        seed: u64,
    ) -> Result<Self, GvqgError> {
        config.validate()?;
        taxonomy.validate()?;
        if config.k > k_o {
            return Err(GvqgError::config("k", format!("k={} exceeds k_o={k_o}", config.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = &config.dims;
        let v = vocab.len();
        let image = ImageEncoder::new(&mut store, "image", feature_dim, dims, &mut rng);
        let decoder = Decoder::new(&mut store, "decoder", v, dims, &mut rng);
        let mut text = None;
        let mut implicit = None;
        let mut variational = None;
        match config.variant {
            Variant::Baseline => {}
            Variant::Explicit => text = Some(TextEncoder::new(&mut store, "text", v, dims, &mut rng)),
            Variant::Implicit | Variant::Variational => {
                let guided = config.object_guidance;
                implicit = Some(ImplicitParts {
                    obj_embed: store.add_normal("obj_embed", v, dims.d_model, dims.init_std * 10.0, &mut rng),
                    score: (guided && config.variant == Variant::Implicit)
                        .then(|| Mlp::new(&mut store, "score", dims.d_model, dims.head_hidden, 1, dims.init_std, &mut rng)),
                    cat_head: Mlp::new(&mut store, "cat_head", dims.d_model, dims.head_hidden, taxonomy.len(), dims.init_std, &mut rng),
                    cat_embed: store.add_normal("cat_embed", taxonomy.len(), dims.d_model, dims.init_std, &mut rng),
                    text: guided.then(|| TextEncoder::new(&mut store, "text", v, dims, &mut rng)),
                });
                if config.variant == Variant::Variational {
                    variational = Some(VariationalParts {
                        encode: EncoderStack::new(&mut store, "encode", dims.text_layers.max(1), dims, &mut rng),
                        cls: store.add_normal("cls", 1, dims.d_model, dims.init_std, &mut rng),
                        prior: SlotHead::new(&mut store, "prior", 2, dims, &mut rng),
                        posterior: SlotHead::new(&mut store, "posterior", 4, dims, &mut rng),
                    });
                }
            }
        }
        Ok(Self {
            config,
            vocab,
            taxonomy,
            feature_dim,
            k_o,
            seed,
            store,
            net: Net {
                image,
                decoder,
                text,
                implicit,
                variational,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Per-slot selection logits (score head, or the prior for the
    /// variational model); padding slots are included.
    pub fn slot_scores(&self, input: &SceneInput) -> Result<Vec<f64>, GvqgError> {
        let _phase = realism::enter(Phase::Inference);
        if !matches!(self.config.variant, Variant::Implicit | Variant::Variational) || !self.config.object_guidance {
            return Err(GvqgError::InvalidInput("model has no object selection head".into()));
        }
        self.check_inputs(&[input])?;
        let mut g = Graph::new(&self.store);
        let (e_obj, valid) = self.object_rows(&mut g, &[input]);
        let logits = match self.config.variant {
            Variant::Implicit => self.parts().score.as_ref().expect("score head").forward(&mut g, e_obj),
            _ => {
                let img = self.encode_image(&mut g, &[input])?;
                self.variational_logits(&mut g, &img, e_obj, &valid, None).0
            }
        };
        let v = g.value(logits);
        Ok((0..self.k_o).map(|j| v.get(j, 0).to_f64_lossy()).collect())
    }

    fn specials(&self) -> Specials {
        Specials {
            bos: self.vocab.bos(),
            eos: self.vocab.eos(),
        }
    }

    fn check_inputs(&self, inputs: &[&SceneInput]) -> Result<(), GvqgError> {
        if inputs.is_empty() {
            return Err(GvqgError::InvalidInput("empty batch".into()));
        }
        for x in inputs {
            let d = &x.detection;
            if d.k_o() != self.k_o || d.features.iter().any(|f| f.len() != self.feature_dim) {
                return Err(GvqgError::Shape(format!(
                    "scene {} has k_o={} feature_dim={:?}, model expects k_o={} feature_dim={}",
                    x.scene_id,
                    d.k_o(),
                    d.features.first().map(Vec::len),
                    self.k_o,
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    fn encode_image(&self, g: &mut Graph<T>, inputs: &[&SceneInput]) -> Result<Rows, GvqgError> {
        let ib = image_batch::<T>(inputs);
        let f = g.input(ib.features);
        let b = g.input(ib.boxes);
        self.net.image.encode(g, f, b, self.k_o, &ib.valid)
    }

    /// Token set fed to the explicit text encoder.
    fn selection_tokens(&self, sel: &ConceptSelection) -> Result<Vec<usize>, GvqgError> {
        let mut ids: Vec<usize> = Vec::new();
        let use_concepts = self.config.explicit_input != ExplicitInput::Category;
        let use_category = self.config.explicit_input != ExplicitInput::Objects;
        if use_concepts {
            ids.extend(sel.concepts.iter().map(|c| self.vocab.id(c)));
        }
        if use_category {
            if let Some(c) = &sel.category {
                if !self.taxonomy.contains(c) {
                    return Err(GvqgError::InvalidInput(format!("unknown category {c}")));
                }
                ids.push(self.vocab.id(c));
            }
        }
        if ids.is_empty() {
            return Err(GvqgError::InvalidInput(
                "explicit guidance needs at least one concept or a category".into(),
            ));
        }
        Ok(ids)
    }

    fn explicit_memory(&self, g: &mut Graph<T>, img: &Rows, sels: &[&ConceptSelection]) -> Result<Rows, GvqgError> {
        let sets = sels
            .iter()
            .map(|s| self.selection_tokens(s))
            .collect::<Result<Vec<_>, _>>()?;
        let text = self.net.text.as_ref().expect("explicit text encoder");
        let st = text.encode_tokens(g, &sets);
        Ok(fuse(g, &[st.view(), img.view()]))
    }

    fn parts(&self) -> &ImplicitParts {
        self.net.implicit.as_ref().expect("implicit parts")
    }

    /// Object-label embeddings, `k_o` rows per example (padding slots use PAD).
    fn object_rows(&self, g: &mut Graph<T>, inputs: &[&SceneInput]) -> (Var, Vec<bool>) {
        let mut ids = Vec::with_capacity(inputs.len() * self.k_o);
        let mut valid = Vec::with_capacity(inputs.len() * self.k_o);
        for x in inputs {
            for slot in 0..self.k_o {
                match x.detection.labels.get(slot) {
                    Some(l) => {
                        ids.push(self.vocab.id(l));
                        valid.push(true);
                    }
                    None => {
                        ids.push(self.vocab.pad());
                        valid.push(false);
                    }
                }
            }
        }
        let table = g.param(self.parts().obj_embed);
        (g.gather(table, ids), valid)
    }

    /// Category logits from (masked) object embeddings: one row per example.
    fn category_logits(&self, g: &mut Graph<T>, masked: Var, batch: usize) -> Var {
        let pooled = g.segment_sum(masked, uniform_segs(batch, self.k_o));
        self.parts().cat_head.forward(g, pooled)
    }

    fn category_rows(&self, g: &mut Graph<T>, cats: &[usize]) -> Rows {
        let table = g.param(self.parts().cat_embed);
        let var = g.gather(table, cats.to_vec());
        Rows {
            var,
            segs: single_rows(cats.len()),
            valid: vec![true; cats.len()],
        }
    }

    /// `[i; S̃; e_cat]` with `S̃` the text encoding of the masked object rows.
    fn implicit_memory(&self, g: &mut Graph<T>, img: &Rows, masked: Option<(Var, &[bool])>, cat: &Rows) -> Rows {
        match masked {
            Some((m, valid)) => {
                let text = self.parts().text.as_ref().expect("object text encoder");
                let segs = uniform_segs(cat.batch(), self.k_o);
                let st = text.encode_embedded(
                    g,
                    neural::Encoded {
                        var: m,
                        segs: &segs,
                        valid,
                    },
                );
                fuse(g, &[img.view(), st.view(), cat.view()])
            }
            None => fuse(g, &[img.view(), cat.view()]),
        }
    }

    /// Prior and (optionally) posterior slot logits, each `B·k_o × 1`.
    fn variational_logits(
        &self,
        g: &mut Graph<T>,
        img: &Rows,
        e_obj: Var,
        valid: &[bool],
        qa: Option<&[Vec<usize>]>,
    ) -> (Var, Option<Var>) {
        let vp = self.net.variational.as_ref().expect("variational parts");
        let b = img.batch();
        let k_o = self.k_o;
        let cls_table = g.param(vp.cls);
        let cls = g.gather(cls_table, vec![0; b]);
        let cls_rows = Rows {
            var: cls,
            segs: single_rows(b),
            valid: vec![true; b],
        };
        let obj_rows = Rows {
            var: e_obj,
            segs: uniform_segs(b, k_o),
            valid: valid.to_vec(),
        };
        let gen_in = fuse(g, &[cls_rows.view(), obj_rows.view(), img.view()]);
        let m_gen = vp.encode.forward(g, gen_in.var, &gen_in.segs, &gen_in.valid);
        let gen_cls_idx: Vec<usize> = gen_in.segs.iter().map(|&(st, _)| st).collect();
        let gen_obj_idx: Vec<usize> = gen_in
            .segs
            .iter()
            .flat_map(|&(st, _)| st + 1..st + 1 + k_o)
            .collect();
        let rep = |idx: &[usize]| idx.iter().flat_map(|&i| std::iter::repeat_n(i, k_o)).collect::<Vec<_>>();
        let gen_obj = g.gather(m_gen, gen_obj_idx);
        let gen_cls = g.gather(m_gen, rep(&gen_cls_idx));
        let prior = vp.prior.forward(g, &[gen_obj, gen_cls]);
        let Some(qa) = qa else {
            return (prior, None);
        };
        let table = g.param(self.parts().obj_embed);
        let mut qa_idx = Vec::new();
        let mut qa_segs = Vec::with_capacity(b);
        for toks in qa {
            qa_segs.push((qa_idx.len(), toks.len()));
            qa_idx.extend_from_slice(toks);
        }
        let e_qa = g.gather(table, qa_idx.clone());
        let qa_rows = Rows {
            var: e_qa,
            segs: qa_segs,
            valid: vec![true; qa_idx.len()],
        };
        let m_gen_rows = Rows {
            var: m_gen,
            segs: gen_in.segs.clone(),
            valid: gen_in.valid.clone(),
        };
        let var_in = fuse(g, &[cls_rows.view(), qa_rows.view(), m_gen_rows.view()]);
        let m_var = vp.encode.forward(g, var_in.var, &var_in.segs, &var_in.valid);
        let var_cls_idx: Vec<usize> = var_in.segs.iter().map(|&(st, _)| st).collect();
        let var_obj_idx: Vec<usize> = var_in
            .segs
            .iter()
            .zip(qa)
            .flat_map(|(&(st, _), toks)| {
                let obj0 = st + 1 + toks.len() + 1;
                obj0..obj0 + k_o
            })
            .collect();
        let var_obj = g.gather(m_var, var_obj_idx);
        let var_cls = g.gather(m_var, rep(&var_cls_idx));
        // Each slot attends over its QA tokens; the product with the slot's
        // own embedding exposes label matches directly.
        let match_spec = AttentionSpec {
            heads: 1,
            causal: false,
            segments: qa_rows
                .segs
                .iter()
                .enumerate()
                .map(|(i, &(ks, kl))| Segment {
                    q_start: i * k_o,
                    q_len: k_o,
                    k_start: ks,
                    k_len: kl,
                })
                .collect(),
            key_valid: None,
        };
        let pooled = g.attention(e_obj, e_qa, e_qa, match_spec);
        let matched = g.mul(e_obj, pooled);
        let posterior = vp.posterior.forward(g, &[var_obj, gen_cls, var_cls, matched]);
        (prior, Some(posterior))
    }

    fn encode_question(&self, q: &[String]) -> Vec<usize> {
        self.vocab.encode(q)
    }

    fn training_loss<R: Rng>(&self, g: &mut Graph<T>, batch: &[&Example], rng: &mut R) -> Result<Loss, GvqgError> {
        let inputs: Vec<&SceneInput> = batch.iter().map(|e| e.input.as_ref()).collect();
        self.check_inputs(&inputs)?;
        let truths: Vec<&QaTruth> = batch.iter().map(|e| e.truth.read()).collect();
        let targets: Vec<Vec<usize>> = truths.iter().map(|t| self.encode_question(&t.question)).collect();
        let img = self.encode_image(g, &inputs)?;
        let sp = self.specials();
        let b = batch.len();
        match self.config.variant {
            Variant::Baseline => {
                let (nll, _) = teacher_forced_nll(g, &self.net.decoder, img.view(), &targets, sp)?;
                Ok(Loss {
                    total: nll,
                    terms: vec![("nll", nll)],
                })
            }
            Variant::Explicit => {
                let sels: Vec<&ConceptSelection> = truths.iter().map(|t| &t.filtered).collect();
                let mem = self.explicit_memory(g, &img, &sels)?;
                let (nll, _) = teacher_forced_nll(g, &self.net.decoder, mem.view(), &targets, sp)?;
                Ok(Loss {
                    total: nll,
                    terms: vec![("nll", nll)],
                })
            }
            Variant::Implicit | Variant::Variational => {
                let cats: Vec<Option<usize>> = truths
                    .iter()
                    .map(|t| {
                        self.taxonomy
                            .index(&t.category)
                            .ok_or_else(|| GvqgError::InvalidInput(format!("unknown category {}", t.category)))
                            .map(Some)
                    })
                    .collect::<Result<_, _>>()?;
                let (e_obj, valid) = self.object_rows(g, &inputs);
                if !self.config.object_guidance {
                    let v: Vec<f64> = valid.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
                    let col = g.input(column(&v));
                    let masked = g.mul_col(e_obj, col);
                    let cat_logits = self.category_logits(g, masked, b);
                    let ce_cat = g.cross_entropy(cat_logits, cats);
                    let pred = row_argmax(g.value(cat_logits));
                    let cat_rows = self.category_rows(g, &pred);
                    let mem = self.implicit_memory(g, &img, None, &cat_rows);
                    let (nll, _) = teacher_forced_nll(g, &self.net.decoder, mem.view(), &targets, sp)?;
                    let total = g.weighted_sum(&[(nll, T::one()), (ce_cat, T::one())]);
                    return Ok(Loss {
                        total,
                        terms: vec![("nll", nll), ("ce_category", ce_cat)],
                    });
                }
                let gold: Vec<Option<T>> = truths
                    .iter()
                    .zip(&inputs)
                    .flat_map(|(t, x)| {
                        (0..self.k_o).map(move |slot| {
                            x.detection.valid[slot].then(|| if t.gold_slots.contains(&slot) { T::one() } else { T::zero() })
                        })
                    })
                    .collect();
                let noise = draw_noise::<T, R>(b, self.k_o, self.config.k, rng);
                let tau = s::<T>(self.config.gumbel.temperature);
                if self.config.variant == Variant::Implicit {
                    let score = self.parts().score.as_ref().expect("score head");
                    let logits = score.forward(g, e_obj);
                    let grid = g.reshape(logits, b, self.k_o);
                    let z = g.khot_straight_through(grid, &noise, tau, &valid);
                    let z = g.reshape(z, b * self.k_o, 1);
                    let pred_masked = g.mul_col(e_obj, z);
                    let cat_logits = self.category_logits(g, pred_masked, b);
                    let ce_cat = g.cross_entropy(cat_logits, cats);
                    let pred = row_argmax(g.value(cat_logits));
                    let zg: Vec<f64> = gold.iter().map(|x| x.map_or(0.0, |v| v.to_f64_lossy())).collect();
                    let zg = g.input(column(&zg));
                    let gold_masked = g.mul_col(e_obj, zg);
                    let cat_rows = self.category_rows(g, &pred);
                    let mem = self.implicit_memory(g, &img, Some((gold_masked, &valid)), &cat_rows);
                    let (nll, _) = teacher_forced_nll(g, &self.net.decoder, mem.view(), &targets, sp)?;
                    let start_end = g.bce_with_logits(logits, gold);
                    let total = g.weighted_sum(&[
                        (nll, T::one()),
                        (ce_cat, T::one()),
                        (start_end, s(self.config.start_end_weight)),
                    ]);
                    Ok(Loss {
                        total,
                        terms: vec![("nll", nll), ("ce_category", ce_cat), ("start_end", start_end)],
                    })
                } else {
                    let qa: Vec<Vec<usize>> = truths.iter().map(|t| self.vocab.encode(&t.qa_tokens)).collect();
                    let (prior, posterior) = self.variational_logits(g, &img, e_obj, &valid, Some(&qa));
                    let posterior = posterior.expect("posterior logits");
                    let q_grid = g.reshape(posterior, b, self.k_o);
                    let p_grid = g.reshape(prior, b, self.k_o);
                    let z = g.khot_straight_through(q_grid, &noise, tau, &valid);
                    let z = g.reshape(z, b * self.k_o, 1);
                    let masked = g.mul_col(e_obj, z);
                    let cat_logits = self.category_logits(g, masked, b);
                    let ce_cat = g.cross_entropy(cat_logits, cats);
                    let pred = row_argmax(g.value(cat_logits));
                    let cat_rows = self.category_rows(g, &pred);
                    let mem = self.implicit_memory(g, &img, Some((masked, &valid)), &cat_rows);
                    let (recon, _) = teacher_forced_nll(g, &self.net.decoder, mem.view(), &targets, sp)?;
                    let kl = g.kl_logits(q_grid, p_grid, valid.clone());
                    let mut terms = vec![(recon, T::one()), (kl, s(self.config.beta)), (ce_cat, T::one())];
                    let mut named = vec![("recon_nll", recon), ("kl", kl), ("ce_category", ce_cat)];
                    if self.config.posterior_membership_weight > 0.0 {
                        let m = g.bce_with_logits(posterior, gold);
                        terms.push((m, s(self.config.posterior_membership_weight)));
                        named.push(("posterior_membership", m));
                    }
                    let total = g.weighted_sum(&terms);
                    Ok(Loss { total, terms: named })
                }
            }
        }
    }

    /// Loss terms of a batch without updating parameters.
    pub fn loss_terms<R: Rng>(&self, batch: &[&Example], rng: &mut R) -> Result<LossTerms, GvqgError> {
        let _phase = realism::enter(Phase::Training);
        let mut g = Graph::new(&self.store);
        let loss = self.training_loss(&mut g, batch, rng)?;
        Ok(collect_terms(&g, &loss))
    }

    /// One optimizer step; fails without touching parameters when the loss
    /// or any gradient is non-finite.
    pub fn train_step<R: Rng>(&mut self, adam: &mut Adam<T>, batch: &[&Example], rng: &mut R) -> Result<LossTerms, GvqgError> {
        let _phase = realism::enter(Phase::Training);
        let (terms, grads) = {
            let mut g = Graph::new(&self.store);
            let loss = self.training_loss(&mut g, batch, rng)?;
            let terms = collect_terms(&g, &loss);
            let grads = g.backward(loss.total);
            if !terms.values().all(|v| v.is_finite()) || !grads.all_finite() {
                return Err(GvqgError::NonFiniteLoss {
                    step: adam.steps() as usize,
                });
            }
            (terms, grads.into_params())
        };
        adam.update(&mut self.store, &grads);
        Ok(terms)
    }

    /// Gradients of the training loss, for diagnostics and tests.
    pub fn gradients<R: Rng>(&self, batch: &[&Example], rng: &mut R) -> Result<Vec<(String, Tensor<T>)>, GvqgError> {
        let _phase = realism::enter(Phase::Training);
        let mut g = Graph::new(&self.store);
        let loss = self.training_loss(&mut g, batch, rng)?;
        Ok(g.backward(loss.total)
            .into_params()
            .into_iter()
            .map(|(id, t)| (self.store.name(id).to_string(), t))
            .collect())
    }

    /// Generates one question per input. Runs entirely in the inference
    /// phase; guidance must already be resolved to plain data.
    pub fn generate<R: Rng>(
        &self,
        inputs: &[&SceneInput],
        guidance: &[Guidance],
        rng: &mut R,
    ) -> Result<Vec<GenerationOutput>, GvqgError> {
        let _phase = realism::enter(Phase::Inference);
        self.check_inputs(inputs)?;
        if guidance.len() != inputs.len() {
            return Err(GvqgError::InvalidInput("one guidance entry per input required".into()));
        }
        let b = inputs.len();
        let mut g = Graph::new(&self.store);
        let img = self.encode_image(&mut g, inputs)?;
        let mut outputs: Vec<GenerationOutput> = (0..b)
            .map(|_| GenerationOutput {
                question: Vec::new(),
                category: None,
                mask: None,
                selection: None,
            })
            .collect();
        let memory = match self.config.variant {
            Variant::Baseline => {
                if let Some(bad) = guidance.iter().find(|g| **g != Guidance::None) {
                    return Err(GvqgError::InvalidInput(format!(
                        "baseline accepts no guidance, got {}",
                        bad.label()
                    )));
                }
                img
            }
            Variant::Explicit => {
                let sels = guidance
                    .iter()
                    .map(|g| match g {
                        Guidance::Select(s) => Ok(s),
                        other => Err(GvqgError::InvalidInput(format!(
                            "explicit model needs a concept selection, got {}",
                            other.label()
                        ))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                for (o, s) in outputs.iter_mut().zip(&sels) {
                    o.selection = Some((*s).clone());
                }
                self.explicit_memory(&mut g, &img, &sels)?
            }
            Variant::Implicit | Variant::Variational => {
                if inputs.iter().any(|x| x.detection.empty) {
                    return Err(GvqgError::InvalidInput("implicit models need at least one detected object".into()));
                }
                let (e_obj, valid) = self.object_rows(&mut g, inputs);
                if !self.config.object_guidance {
                    if let Some(bad) = guidance.iter().find(|g| **g != Guidance::None) {
                        return Err(GvqgError::InvalidInput(format!(
                            "image-category model accepts no object guidance, got {}",
                            bad.label()
                        )));
                    }
                    let v: Vec<f64> = valid.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
                    let col = g.input(column(&v));
                    let masked = g.mul_col(e_obj, col);
                    let cat_logits = self.category_logits(&mut g, masked, b);
                    let pred = row_argmax(g.value(cat_logits));
                    for (o, &c) in outputs.iter_mut().zip(&pred) {
                        o.category = Some(self.taxonomy.names()[c].clone());
                    }
                    let cat_rows = self.category_rows(&mut g, &pred);
                    self.implicit_memory(&mut g, &img, None, &cat_rows)
                } else {
                    let slot_logits = match self.config.variant {
                        Variant::Implicit => {
                            let score = self.parts().score.as_ref().expect("score head");
                            score.forward(&mut g, e_obj)
                        }
                        _ => self.variational_logits(&mut g, &img, e_obj, &valid, None).0,
                    };
                    let lv = g.value(slot_logits).clone();
                    let mut z = vec![0.0; b * self.k_o];
                    for (i, gd) in guidance.iter().enumerate() {
                        let vrow = &valid[i * self.k_o..(i + 1) * self.k_o];
                        let mask = match gd {
                            Guidance::Predicted => {
                                let scores: Vec<f64> = (0..self.k_o)
                                    .map(|j| lv.get(i * self.k_o + j, 0).to_f64_lossy())
                                    .collect();
                                sample_k_hot_masked(&scores, vrow, self.config.k, &self.config.gumbel, rng)?
                            }
                            Guidance::Gold(idx) => {
                                if let Some(&bad) = idx.iter().find(|&&j| j >= self.k_o || !vrow[j]) {
                                    return Err(GvqgError::InvalidInput(format!("gold slot {bad} is not a detected object")));
                                }
                                GuidanceMask::from_indices(self.k_o, idx, MaskMode::Gold)?
                            }
                            Guidance::Random => random_k_subset(vrow, self.config.k, rng)?,
                            other => {
                                return Err(GvqgError::InvalidInput(format!(
                                    "{} model needs predicted, gold or random object guidance, got {}",
                                    self.config.variant,
                                    other.label()
                                )))
                            }
                        };
                        for j in mask.indices() {
                            z[i * self.k_o + j] = 1.0;
                        }
                        outputs[i].mask = Some(mask);
                    }
                    let zc = g.input(column(&z));
                    let masked = g.mul_col(e_obj, zc);
                    let cat_logits = self.category_logits(&mut g, masked, b);
                    let pred = row_argmax(g.value(cat_logits));
                    for (o, &c) in outputs.iter_mut().zip(&pred) {
                        o.category = Some(self.taxonomy.names()[c].clone());
                    }
                    let cat_rows = self.category_rows(&mut g, &pred);
                    self.implicit_memory(&mut g, &img, Some((masked, &valid)), &cat_rows)
                }
            }
        };
        let mem = Memory::from_rows(&g, &memory);
        drop(g);
        let ids = decode::<T, R>(&self.store, &self.net.decoder, &mem, self.specials(), Sampling::Greedy);
        for (o, q) in outputs.iter_mut().zip(ids) {
            o.question = self.vocab.decode(&q);
        }
        Ok(outputs)
    }

    /// Slot probabilities `(posterior, prior)` of the variational model for a
    /// training batch, per example over valid slots.
    pub fn variational_distributions(&self, batch: &[&Example]) -> Result<Vec<(Vec<f64>, Vec<f64>)>, GvqgError> {
        if self.config.variant != Variant::Variational {
            return Err(GvqgError::InvalidInput("not a variational model".into()));
        }
        let _phase = realism::enter(Phase::Training);
        let inputs: Vec<&SceneInput> = batch.iter().map(|e| e.input.as_ref()).collect();
        self.check_inputs(&inputs)?;
        let qa: Vec<Vec<usize>> = batch.iter().map(|e| self.vocab.encode(&e.truth.read().qa_tokens)).collect();
        let mut g = Graph::new(&self.store);
        let img = self.encode_image(&mut g, &inputs)?;
        let (e_obj, valid) = self.object_rows(&mut g, &inputs);
        let (prior, posterior) = self.variational_logits(&mut g, &img, e_obj, &valid, Some(&qa));
        let (pv, qv) = (g.value(prior), g.value(posterior.expect("posterior")));
        let mut out = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let slots: Vec<usize> = (0..self.k_o).filter(|&j| valid[i * self.k_o + j]).collect();
            let soft = |t: &Tensor<T>| {
                crate::sampling::softmax(&slots.iter().map(|&j| t.get(i * self.k_o + j, 0).to_f64_lossy()).collect::<Vec<_>>())
            };
            out.push((soft(qv), soft(pv)));
        }
        Ok(out)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, &self.vocab, &self.taxonomy, self.feature_dim, self.k_o)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: Checkpoint::FORMAT_VERSION,
            variant: self.config.variant,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            taxonomy: self.taxonomy.clone(),
            feature_dim: self.feature_dim,
            k_o: self.k_o,
            seed: self.seed,
            config_hash: self.config_hash(),
            params: self.store.to_serial(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GvqgError> {
        if ck.format_version != Checkpoint::FORMAT_VERSION {
            return Err(GvqgError::Checkpoint(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.variant != ck.config.variant {
            return Err(GvqgError::Checkpoint("variant tag does not match config".into()));
        }
        let mut vocab = ck.vocab.clone();
        vocab.reindex();
        let expected = config_hash(&ck.config, &vocab, &ck.taxonomy, ck.feature_dim, ck.k_o);
        if expected != ck.config_hash {
            return Err(GvqgError::Checkpoint("config hash mismatch".into()));
        }
        let mut model = Model::new(ck.config.clone(), vocab, ck.taxonomy.clone(), ck.feature_dim, ck.k_o, ck.seed)?;
        model.store.load_serial(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GvqgError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint()).map_err(|e| GvqgError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GvqgError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f).map_err(|e| GvqgError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

fn collect_terms<T: Scalar>(g: &Graph<T>, loss: &Loss) -> LossTerms {
    let mut terms: LossTerms = loss
        .terms
        .iter()
        .map(|(n, v)| (n.to_string(), g.value(*v).item().to_f64_lossy()))
        .collect();
    terms.insert("total".into(), g.value(loss.total).item().to_f64_lossy());
    terms
}

/// SHA-256 over everything that determines parameter shapes and meaning.
pub fn config_hash(
    config: &ModelConfig,
    vocab: &Vocab,
    taxonomy: &CategoryTaxonomy,
    feature_dim: usize,
    k_o: usize,
) -> String {
    let payload = serde_json::json!({
        "config": config,
        "vocab": vocab,
        "taxonomy": taxonomy,
        "feature_dim": feature_dim,
        "k_o": k_o,
    });
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

/// Serialized model: variant tag, build inputs and parameter values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: Variant,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub taxonomy: CategoryTaxonomy,
    pub feature_dim: usize,
    pub k_o: usize,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;
}
