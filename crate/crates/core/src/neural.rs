//! Shared transformer stack: a set-input text encoder, an image encoder
//! with box-derived spatial embeddings, concatenation fusion, and a causal
//! decoder with cross-attention.
//!
//! All modules hold [`ParamId`]s only; the tensors live in a [`ParamStore`]
//! and computation happens on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Segment, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use crate::GvqgError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Hidden width of the score/category/variational MLP heads.
    pub head_hidden: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            text_layers: 2,
            image_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            head_hidden: 64,
            max_len: 24,
            init_std: 0.02,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), GvqgError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(GvqgError::config("d_model", "must be a positive multiple of heads"));
        }
        if self.ffn_dim == 0 || self.head_hidden == 0 {
            return Err(GvqgError::config("ffn_dim", "hidden widths must be positive"));
        }
        if self.max_len < 2 {
            return Err(GvqgError::config("max_len", "must be at least 2"));
        }
        if !(self.init_std > 0.0) {
            return Err(GvqgError::config("init_std", "must be positive"));
        }
        Ok(())
    }
}

/// Rows of a stacked batch: one `(start, len)` window per example plus a
/// per-row validity flag (padding rows are invalid).
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'a> {
    pub var: Var,
    pub segs: &'a [(usize, usize)],
    pub valid: &'a [bool],
}

/// Owned variant of [`Encoded`].
#[derive(Clone, Debug)]
pub struct Rows {
    pub var: Var,
    pub segs: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
}

impl Rows {
    pub fn view(&self) -> Encoded<'_> {
        Encoded {
            var: self.var,
            segs: &self.segs,
            valid: &self.valid,
        }
    }

    pub fn batch(&self) -> usize {
        self.segs.len()
    }

    /// Examples whose rows are all invalid.
    pub fn all_masked(&self) -> Vec<bool> {
        self.segs
            .iter()
            .map(|&(st, len)| !self.valid[st..st + len].iter().any(|&v| v))
            .collect()
    }
}

pub fn uniform_segs(batch: usize, len: usize) -> Vec<(usize, usize)> {
    (0..batch).map(|b| (b * len, len)).collect()
}

fn self_attention_spec(heads: usize, segs: &[(usize, usize)], valid: &[bool], causal: bool) -> AttentionSpec {
    AttentionSpec {
        heads,
        causal,
        segments: segs
            .iter()
            .map(|&(st, len)| Segment {
                q_start: st,
                q_len: len,
                k_start: st,
                k_len: len,
            })
            .collect(),
        key_valid: if valid.iter().all(|&v| v) {
            None
        } else {
            Some(valid.to_vec())
        },
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_normal(format!("{name}.w"), d_in, d_out, std, rng),
            b: store.add_zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, std, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, std, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.g"), 1, d),
            bias: store.add_zeros(format!("{name}.b"), 1, d),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHead {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, std, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, std, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, std, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, std, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, xq: Var, xkv: Var, spec: AttentionSpec) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHead,
    ln2: LayerNorm,
    ff: Mlp,
}

impl EncoderLayer {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let d = dims.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHead::new(store, &format!("{name}.attn"), d, dims.init_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, dims.ffn_dim, d, dims.init_std, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, spec: &AttentionSpec) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, spec.clone());
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Stack of encoder layers with a final norm (omitted for zero layers, so an
/// empty stack is the identity).
#[derive(Clone, Debug)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    ln_f: Option<LayerNorm>,
    heads: usize,
}

impl EncoderStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_layers: usize,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dims, rng))
            .collect();
        let ln_f = (n_layers > 0).then(|| LayerNorm::new(store, &format!("{name}.ln_f"), dims.d_model));
        Self {
            layers,
            ln_f,
            heads: dims.heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, segs: &[(usize, usize)], valid: &[bool]) -> Var {
        let spec = self_attention_spec(self.heads, segs, valid, false);
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, h, &spec);
        }
        match &self.ln_f {
            Some(ln) => ln.forward(g, h),
            None => h,
        }
    }
}

/// Set-input text encoder: token embeddings without positional encoding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub null_row: ParamId,
    stack: EncoderStack,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: store.add_normal(format!("{name}.embed"), vocab_size, dims.d_model, dims.init_std, rng),
            null_row: store.add_normal(format!("{name}.null"), 1, dims.d_model, dims.init_std, rng),
            stack: EncoderStack::new(store, name, dims.text_layers, dims, rng),
        }
    }

    /// Embeds and encodes token sets; an empty set becomes one NULL row.
    pub fn encode_tokens<T: Scalar>(&self, g: &mut Graph<T>, sets: &[Vec<usize>]) -> Rows {
        let table = g.param(self.embed);
        let vocab = g.value(table).rows();
        let null = g.param(self.null_row);
        let combined = g.concat(&[table, null]);
        let mut idx = Vec::new();
        let mut segs = Vec::with_capacity(sets.len());
        for set in sets {
            let st = idx.len();
            if set.is_empty() {
                idx.push(vocab);
            } else {
                idx.extend_from_slice(set);
            }
            segs.push((st, idx.len() - st));
        }
        let x = g.gather(combined, idx);
        let valid = vec![true; g.value(x).rows()];
        let var = self.stack.forward(g, x, &segs, &valid);
        Rows { var, segs, valid }
    }

    /// Encodes already-embedded rows (e.g. masked object embeddings).
    pub fn encode_embedded<T: Scalar>(&self, g: &mut Graph<T>, rows: Encoded<'_>) -> Rows {
        let var = self.stack.forward(g, rows.var, rows.segs, rows.valid);
        Rows {
            var,
            segs: rows.segs.to_vec(),
            valid: rows.valid.to_vec(),
        }
    }
}

/// Object-feature encoder; each row is `proj(feature) + spatial(box)`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub feat: Linear,
    pub spatial: Linear,
    stack: EncoderStack,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_dim: usize,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Self {
        // features are O(1) per entry, so a smaller init keeps row norms comparable
        let std = dims.init_std;
        Self {
            feat: Linear::new(store, &format!("{name}.feat"), feature_dim, dims.d_model, std, rng),
            spatial: Linear::new(store, &format!("{name}.spatial"), 4, dims.d_model, std * 10.0, rng),
            stack: EncoderStack::new(store, name, dims.image_layers, dims, rng),
        }
    }

    /// `features` and `boxes` hold `k_o` rows per example; `valid` flags
    /// detected slots. Padding rows are never attended.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        boxes: Var,
        k_o: usize,
        valid: &[bool],
    ) -> Result<Rows, GvqgError> {
        let (fr, br) = (g.value(features).rows(), g.value(boxes).rows());
        if fr != br || fr != valid.len() || k_o == 0 || fr % k_o != 0 {
            return Err(GvqgError::Shape(format!(
                "feature rows {fr}, box rows {br}, valid flags {}, k_o {k_o}",
                valid.len()
            )));
        }
        if g.value(boxes).cols() != 4 {
            return Err(GvqgError::Shape("boxes must have 4 columns".into()));
        }
        let f = self.feat.forward(g, features);
        let b = self.spatial.forward(g, boxes);
        let x = g.add(f, b);
        let segs = uniform_segs(fr / k_o, k_o);
        let var = self.stack.forward(g, x, &segs, valid);
        Ok(Rows {
            var,
            segs,
            valid: valid.to_vec(),
        })
    }
}

/// Concatenates per-example row windows of several encodings, in order.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, parts: &[Encoded<'_>]) -> Rows {
    let batch = parts[0].segs.len();
    assert!(parts.iter().all(|p| p.segs.len() == batch), "fuse batch mismatch");
    let mut offsets = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        offsets.push(total);
        total += g.value(p.var).rows();
    }
    let vars: Vec<Var> = parts.iter().map(|p| p.var).collect();
    let big = g.concat(&vars);
    let mut idx = Vec::new();
    let mut valid = Vec::new();
    let mut segs = Vec::with_capacity(batch);
    for b in 0..batch {
        let st = idx.len();
        for (p, off) in parts.iter().zip(&offsets) {
            let (ps, pl) = p.segs[b];
            for r in ps..ps + pl {
                idx.push(off + r);
                valid.push(p.valid[r]);
            }
        }
        segs.push((st, idx.len() - st));
    }
    let var = g.gather(big, idx);
    Rows { var, segs, valid }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHead,
    ln2: LayerNorm,
    cross: MultiHead,
    ln3: LayerNorm,
    ff: Mlp,
}

impl DecoderLayer {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, dims: &ModelDims, rng: &mut R) -> Self {
        let d = dims.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHead::new(store, &format!("{name}.self"), d, dims.init_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross: MultiHead::new(store, &format!("{name}.cross"), d, dims.init_std, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, dims.ffn_dim, d, dims.init_std, rng),
        }
    }
}

/// Causal transformer decoder with cross-attention over a fused encoding.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub tok: ParamId,
    pub pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    pub out: Linear,
    heads: usize,
    max_len: usize,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Self {
        let d = dims.d_model;
        Self {
            tok: store.add_normal(format!("{name}.tok"), vocab_size, d, dims.init_std, rng),
            pos: store.add_normal(format!("{name}.pos"), dims.max_len, d, dims.init_std, rng),
            layers: (0..dims.decoder_layers)
                .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), dims, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d),
            out: Linear::new(store, &format!("{name}.out"), d, vocab_size, dims.init_std, rng),
            heads: dims.heads,
            max_len: dims.max_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Next-token logits for every input position; returns the logits var
    /// (one row per input token) and per-example windows.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        memory: Encoded<'_>,
        inputs: &[Vec<usize>],
    ) -> (Var, Vec<(usize, usize)>) {
        assert_eq!(inputs.len(), memory.segs.len(), "decoder batch mismatch");
        let mut tok_idx = Vec::new();
        let mut pos_idx = Vec::new();
        let mut segs = Vec::with_capacity(inputs.len());
        for seq in inputs {
            assert!(seq.len() <= self.max_len, "decoder input longer than max_len");
            segs.push((tok_idx.len(), seq.len()));
            tok_idx.extend_from_slice(seq);
            pos_idx.extend(0..seq.len());
        }
        let tok_table = g.param(self.tok);
        let pos_table = g.param(self.pos);
        let te = g.gather(tok_table, tok_idx);
        let pe = g.gather(pos_table, pos_idx);
        let mut x = g.add(te, pe);
        let n = g.value(x).rows();
        let self_spec = self_attention_spec(self.heads, &segs, &vec![true; n], true);
        let cross_spec = AttentionSpec {
            heads: self.heads,
            causal: false,
            segments: segs
                .iter()
                .zip(memory.segs)
                .map(|(&(qs, ql), &(ks, kl))| Segment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                })
                .collect(),
            key_valid: Some(memory.valid.to_vec()),
        };
        for l in &self.layers {
            let h = l.ln1.forward(g, x);
            let a = l.self_attn.forward(g, h, h, self_spec.clone());
            x = g.add(x, a);
            let h = l.ln2.forward(g, x);
            let c = l.cross.forward(g, h, memory.var, cross_spec.clone());
            x = g.add(x, c);
            let h = l.ln3.forward(g, x);
            let f = l.ff.forward(g, h);
            x = g.add(x, f);
        }
        let h = self.ln_f.forward(g, x);
        (self.out.forward(g, h), segs)
    }
}

/// Special token ids the decoding loops need.
#[derive(Clone, Copy, Debug)]
pub struct Specials {
    pub bos: usize,
    pub eos: usize,
}

/// Teacher-forced mean token NLL. Each target is the question without BOS;
/// EOS is appended as the final prediction target.
pub fn teacher_forced_nll<T: Scalar>(
    g: &mut Graph<T>,
    decoder: &Decoder,
    memory: Encoded<'_>,
    targets: &[Vec<usize>],
    specials: Specials,
) -> Result<(Var, Var), GvqgError> {
    let mut inputs = Vec::with_capacity(targets.len());
    let mut flat_targets = Vec::new();
    for t in targets {
        if t.is_empty() {
            return Err(GvqgError::InvalidInput("empty target question".into()));
        }
        if t.len() + 1 > decoder.max_len() {
            return Err(GvqgError::InvalidInput(format!(
                "target of {} tokens exceeds max_len {}",
                t.len(),
                decoder.max_len()
            )));
        }
        let mut inp = Vec::with_capacity(t.len() + 1);
        inp.push(specials.bos);
        inp.extend_from_slice(t);
        inputs.push(inp);
        flat_targets.extend(t.iter().map(|&x| Some(x)));
        flat_targets.push(Some(specials.eos));
    }
    let (logits, _) = decoder.logits(g, memory, &inputs);
    let loss = g.cross_entropy(logits, flat_targets);
    Ok((loss, logits))
}

/// Frozen memory for decoding loops: the fused encoding's values.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub value: Tensor<T>,
    pub segs: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Memory<T> {
    pub fn from_rows(g: &Graph<T>, rows: &Rows) -> Self {
        Self {
            value: g.value(rows.var).clone(),
            segs: rows.segs.clone(),
            valid: rows.valid.clone(),
        }
    }

    fn subset(&self, keep: &[usize]) -> Memory<T> {
        let d = self.value.cols();
        let mut data = Vec::new();
        let mut segs = Vec::with_capacity(keep.len());
        let mut valid = Vec::new();
        for &b in keep {
            let (st, len) = self.segs[b];
            segs.push((valid.len(), len));
            for r in st..st + len {
                data.extend_from_slice(self.value.row(r));
                valid.push(self.valid[r]);
            }
        }
        Memory {
            value: Tensor::from_vec(valid.len(), d, data).expect("shape"),
            segs,
            valid,
        }
    }
}

/// Token choice rule for [`decode`].
pub enum Sampling<'r, R: Rng> {
    Greedy,
    Temperature(f64, &'r mut R),
}

/// Autoregressive decoding; returns generated ids without BOS/EOS. Stops at
/// EOS or after `max_len` tokens (EOS included in the budget).
pub fn decode<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    decoder: &Decoder,
    memory: &Memory<T>,
    specials: Specials,
    mut sampling: Sampling<'_, R>,
) -> Vec<Vec<usize>> {
    let batch = memory.segs.len();
    let mut seqs: Vec<Vec<usize>> = vec![vec![specials.bos]; batch];
    let mut done = vec![false; batch];
    for _step in 0..decoder.max_len() {
        let active: Vec<usize> = (0..batch).filter(|&b| !done[b]).collect();
        if active.is_empty() {
            break;
        }
        let mem = memory.subset(&active);
        let mut g = Graph::new(store);
        let mv = g.input(mem.value.clone());
        let inputs: Vec<Vec<usize>> = active.iter().map(|&b| seqs[b].clone()).collect();
        let (logits, segs) = decoder.logits(
            &mut g,
            Encoded {
                var: mv,
                segs: &mem.segs,
                valid: &mem.valid,
            },
            &inputs,
        );
        let lv = g.value(logits);
        for (ai, &b) in active.iter().enumerate() {
            let (st, len) = segs[ai];
            let row = lv.row(st + len - 1);
            let next = match &mut sampling {
                Sampling::Greedy => argmax(row),
                Sampling::Temperature(t, rng) => sample_row(row, *t, rng),
            };
            seqs[b].push(next);
            if next == specials.eos || seqs[b].len() > decoder.max_len() {
                done[b] = true;
            }
        }
    }
    seqs.into_iter()
        .map(|s| s.into_iter().skip(1).take_while(|&t| t != specials.eos).collect())
        .collect()
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row<T: Scalar, R: Rng>(row: &[T], temperature: f64, rng: &mut R) -> usize {
    let t = temperature.max(1e-6);
    let mx = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| ((v.to_f64_lossy() - mx) / t).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

/// Builds the image-encoder input tensors for `k_o`-slot detections.
pub fn image_tensors<T: Scalar>(
    features: &[&[Vec<f64>]],
    boxes: &[&[[f64; 4]]],
) -> (Tensor<T>, Tensor<T>) {
    let d_f = features
        .iter()
        .flat_map(|f| f.iter())
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    let mut fdata = Vec::new();
    let mut bdata = Vec::new();
    for (f, b) in features.iter().zip(boxes) {
        for row in f.iter() {
            fdata.extend(row.iter().map(|&v| s::<T>(v)));
            fdata.extend(std::iter::repeat_n(T::zero(), d_f - row.len()));
        }
        for bx in b.iter() {
            bdata.extend(bx.iter().map(|&v| s::<T>(v)));
        }
    }
    let rows = bdata.len() / 4;
    (
        Tensor::from_vec(rows, d_f, fdata).expect("feature rows"),
        Tensor::from_vec(rows, 4, bdata).expect("box rows"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            heads: 2,
            text_layers: 1,
            image_layers: 1,
            decoder_layers: 1,
            ffn_dim: 12,
            head_hidden: 8,
            max_len: 6,
            init_std: 0.3,
        }
    }

    #[test]
    fn text_encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let enc = TextEncoder::new(&mut store, "t", 10, &small_dims(), &mut rng);
        let mut g = Graph::new(&store);
        let a = enc.encode_tokens(&mut g, &[vec![1, 4, 7]]);
        let b = enc.encode_tokens(&mut g, &[vec![7, 1, 4]]);
        let (va, vb) = (g.value(a.var).clone(), g.value(b.var).clone());
        for (ra, rb) in [(0, 1), (1, 2), (2, 0)] {
            for c in 0..8 {
                assert!((va.get(ra, c) - vb.get(rb, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layer_text_encoder_is_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dims = ModelDims { text_layers: 0, ..small_dims() };
        let enc = TextEncoder::new(&mut store, "t", 10, &dims, &mut rng);
        let mut g = Graph::new(&store);
        let out = enc.encode_tokens(&mut g, &[vec![3, 5], vec![]]);
        let table = store.get(enc.embed);
        let v = g.value(out.var);
        assert_eq!(v.rows(), 3);
        assert_eq!(v.row(0), table.row(3));
        assert_eq!(v.row(1), table.row(5));
        assert_eq!(v.row(2), store.get(enc.null_row).row(0));
        assert_eq!(out.segs, vec![(0, 2), (2, 1)]);
    }

    #[test]
    fn image_encoder_shape_errors_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, "i", 5, &small_dims(), &mut rng);
        let mut g = Graph::new(&store);
        let f = g.input(Tensor::zeros(4, 5));
        let b = g.input(Tensor::zeros(3, 4));
        assert!(enc.encode(&mut g, f, b, 2, &[true; 4]).is_err());
        let b = g.input(Tensor::zeros(4, 4));
        let rows = enc.encode(&mut g, f, b, 2, &[true, false, false, false]).unwrap();
        assert_eq!(rows.all_masked(), vec![false, true]);
    }

    #[test]
    fn spatial_embedding_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut store, "i", 3, &small_dims(), &mut rng);
        let feats = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.5, 0.0]).unwrap();
        let boxes = Tensor::from_vec(2, 4, vec![0.1, 0.1, 0.3, 0.4, 0.5, 0.2, 0.7, 0.6]).unwrap();
        let shifted = boxes.map(|v| v + 0.2);
        let run = |bx: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let f = g.input(feats.clone());
            let b = g.input(bx);
            let r = enc.encode(&mut g, f, b, 2, &[true, true]).unwrap();
            g.value(r.var).clone()
        };
        let (a, b) = (run(boxes), run(shifted));
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn fuse_interleaves_examples() {
        let mut g = Graph::<f64>::detached();
        let a = g.input(Tensor::from_vec(3, 1, vec![1., 2., 3.]).unwrap());
        let b = g.input(Tensor::from_vec(2, 1, vec![10., 20.]).unwrap());
        let sa = vec![(0, 2), (2, 1)];
        let sb = vec![(0, 1), (1, 1)];
        let va = vec![true; 3];
        let vb = vec![true, false];
        let fused = fuse(
            &mut g,
            &[
                Encoded { var: a, segs: &sa, valid: &va },
                Encoded { var: b, segs: &sb, valid: &vb },
            ],
        );
        assert_eq!(g.value(fused.var).data(), &[1., 2., 10., 3., 20.]);
        assert_eq!(fused.segs, vec![(0, 3), (3, 2)]);
        assert_eq!(fused.valid, vec![true, true, true, true, false]);
    }

    struct Tiny {
        store: ParamStore<f64>,
        text: TextEncoder,
        image: ImageEncoder,
        dec: Decoder,
    }

    const SP: Specials = Specials { bos: 1, eos: 2 };

    fn tiny(seed: u64) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let dims = small_dims();
        let text = TextEncoder::new(&mut store, "t", 9, &dims, &mut rng);
        let image = ImageEncoder::new(&mut store, "i", 3, &dims, &mut rng);
        let dec = Decoder::new(&mut store, "d", 9, &dims, &mut rng);
        Tiny { store, text, image, dec }
    }

    fn tiny_loss(m: &Tiny, store: &ParamStore<f64>) -> (f64, Vec<(ParamId, Tensor<f64>)>) {
        let mut g = Graph::new(store);
        let t = m.text.encode_tokens(&mut g, &[vec![4, 5], vec![]]);
        let f = g.input(Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let b = g.input(Tensor::from_vec(4, 4, (0..16).map(|i| (i as f64 * 0.11).cos().abs()).collect()).unwrap());
        let im = m.image.encode(&mut g, f, b, 2, &[true, true, true, false]).unwrap();
        let fused = fuse(&mut g, &[t.view(), im.view()]);
        let (loss, _) = teacher_forced_nll(&mut g, &m.dec, fused.view(), &[vec![3, 6], vec![7]], SP).unwrap();
        let grads = g.backward(loss);
        (g.value(loss).item(), grads.into_params())
    }

    #[test]
    fn full_stack_gradients_match_finite_differences() {
        let m = tiny(3);
        let (_, grads) = tiny_loss(&m, &m.store);
        let h = 1e-6;
        let mut checked = 0;
        for (id, grad) in &grads {
            // a few entries per parameter keep the test fast
            for e in [0, grad.len() / 2, grad.len() - 1] {
                let mut plus = m.store.clone();
                plus.get_mut(*id).data_mut()[e] += h;
                let mut minus = m.store.clone();
                minus.get_mut(*id).data_mut()[e] -= h;
                let num = (tiny_loss(&m, &plus).0 - tiny_loss(&m, &minus).0) / (2.0 * h);
                let ana = grad.data()[e];
                let denom = num.abs().max(ana.abs()).max(1e-4);
                assert!(
                    (num - ana).abs() / denom < 1e-4,
                    "{}[{e}]: numeric {num} analytic {ana}",
                    m.store.name(*id)
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut m = tiny(4);
        m.store.get_mut(m.dec.out.w).data_mut().fill(0.0);
        m.store.get_mut(m.dec.out.b).data_mut().fill(0.0);
        let (loss, _) = tiny_loss(&m, &m.store);
        assert!((loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny(5);
        let run = |seq: Vec<usize>| {
            let mut g = Graph::new(&m.store);
            let t = m.text.encode_tokens(&mut g, &[vec![4, 8]]);
            let (logits, _) = m.dec.logits(&mut g, t.view(), &[seq]);
            g.value(logits).clone()
        };
        let a = run(vec![1, 3, 4, 5]);
        let b = run(vec![1, 3, 7, 5]);
        for r in 0..2 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn single_example_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let dims = ModelDims { init_std: 0.1, ..small_dims() };
        let text = TextEncoder::new(&mut store, "t", 9, &dims, &mut rng);
        let dec = Decoder::new(&mut store, "d", 9, &dims, &mut rng);
        let mut adam = crate::Adam::new(crate::AdamConfig { lr: 1e-2, ..Default::default() }, &store);
        let target = vec![5, 3, 8, 4];
        let mut last = f32::INFINITY;
        for _ in 0..200 {
            let grads = {
                let mut g = Graph::new(&store);
                let t = text.encode_tokens(&mut g, &[vec![6]]);
                let (loss, _) = teacher_forced_nll(&mut g, &dec, t.view(), &[target.clone()], SP).unwrap();
                last = g.value(loss).item();
                g.backward(loss).into_params()
            };
            adam.update(&mut store, &grads);
        }
        assert!(last < 0.05, "final loss {last}");
        let mut g = Graph::new(&store);
        let t = text.encode_tokens(&mut g, &[vec![6]]);
        let mem = Memory::from_rows(&g, &t);
        let out = decode::<f32, ChaCha8Rng>(&store, &dec, &mem, SP, Sampling::Greedy);
        assert_eq!(out, vec![target]);
    }

    #[test]
    fn empty_and_overlong_targets_rejected() {
        let m = tiny(7);
        let mut g = Graph::new(&m.store);
        let t = m.text.encode_tokens(&mut g, &[vec![4]]);
        assert!(teacher_forced_nll(&mut g, &m.dec, t.view(), &[vec![]], SP).is_err());
        assert!(teacher_forced_nll(&mut g, &m.dec, t.view(), &[vec![3; 6]], SP).is_err());
    }

    #[test]
    fn decode_respects_length_budget() {
        let m = tiny(8);
        let mut g = Graph::new(&m.store);
        let t = m.text.encode_tokens(&mut g, &[vec![4], vec![5, 6]]);
        let mem = Memory::from_rows(&g, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for out in decode(&m.store, &m.dec, &mem, SP, Sampling::Temperature(1.0, &mut rng)) {
            assert!(out.len() <= small_dims().max_len);
            assert!(!out.contains(&SP.eos));
        }
    }
}
