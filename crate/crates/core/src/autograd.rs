//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a gradient-tracked input.
//!
//! Batches are represented by stacking the rows of all examples into one
//! matrix; per-example structure (attention windows, pooling) is carried by
//! explicit [`Segment`] lists so dense ops run as single GEMMs.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query/key row windows of one attention problem inside stacked matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Configuration of a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Query `i` may attend key `j` only if `j <= i` (same segment offsets).
    pub causal: bool,
    pub segments: Vec<Segment>,
    /// Per key row; `false` rows are never attended.
    pub key_valid: Option<Vec<bool>>,
}

struct AttnCache<T> {
    spec: AttentionSpec,
    /// Softmax weights per (segment, head), each `q_len*k_len`.
    probs: Vec<Vec<T>>,
}

struct KHotCache<T> {
    /// Soft samples per draw, each `rows*cols`.
    softs: Vec<Vec<T>>,
    /// For every element, the draw whose soft value is maximal.
    winner: Vec<usize>,
    tau: T,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    SegmentSum {
        x: Var,
        segs: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: Box<AttnCache<T>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<Option<T>>,
        count: usize,
    },
    KlLogits {
        q: Var,
        p: Var,
        valid: Vec<bool>,
        qp: Vec<T>,
        pp: Vec<T>,
        row_kl: Vec<T>,
    },
    KHot {
        logits: Var,
        cache: Box<KHotCache<T>>,
    },
    WeightedSum(Vec<(Var, T)>),
    Readout {
        x: Var,
        w: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Computation tape. Borrowing a [`ParamStore`] lets parameters enter the
/// graph by id without copying more than once per graph.
pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.is_finite())
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A graph without parameters; only inputs can be tracked.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn input_tracked(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self
            .store
            .expect("graph has no parameter store")
            .get(id)
            .clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("shape");
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), tr)
    }

    /// `a + b` with `b` a `1×n` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vb.cols(), "bias width");
        let mut out = va.clone();
        let n = out.cols();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += *bb;
            }
        }
        debug_assert_eq!(n, vb.cols());
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddBias(a, b), tr)
    }

    /// Scales each row of `a` by the matching entry of the `m×1` column `s`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.cols(), 1);
        assert_eq!(va.rows(), vs.rows(), "mul_col rows");
        let mut out = va.clone();
        for r in 0..out.rows() {
            let f = vs.data()[r];
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let tr = self.tracked(a) || self.tracked(s);
        self.push(out, Op::MulCol(a, s), tr)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let tr = self.tracked(a);
        self.push(out, Op::Scale(a, c), tr)
    }

    /// Same row-major data viewed as `rows×cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = Tensor::from_vec(rows, cols, self.value(a).data().to_vec())
            .expect("reshape preserves element count");
        let tr = self.tracked(a);
        self.push(out, Op::Reshape(a), tr)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let tr = self.tracked(a);
        self.push(out, Op::Relu(a), tr)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        let tr = self.tracked(a);
        self.push(out, Op::Tanh(a), tr)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = s::<T>(1e-5);
        let vx = self.value(x);
        let (m, n) = vx.shape();
        let nf = s::<T>(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            for c in 0..n {
                out.set(r, c, xhat[r * n + c] * g.data()[c] + b.data()[c]);
            }
        }
        let tr = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tr,
        )
    }

    /// Output row `i` is row `idx[i]` of `src` (embedding lookup, reordering).
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let vs = self.value(src);
        let n = vs.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(vs.row(i));
        }
        let out = Tensor::from_vec(idx.len(), n, data).expect("shape");
        let tr = self.tracked(src);
        self.push(out, Op::Gather { src, idx }, tr)
    }

    /// Stacks the rows of all parts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, n, data).expect("shape");
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Concat(parts.to_vec()), tr)
    }

    /// Sums rows over each `(start, len)` window; one output row per window.
    pub fn segment_sum(&mut self, x: Var, segs: Vec<(usize, usize)>) -> Var {
        let vx = self.value(x);
        let mut out = Tensor::zeros(segs.len(), vx.cols());
        for (o, &(st, len)) in segs.iter().enumerate() {
            for r in st..st + len {
                for (acc, v) in out.row_mut(o).iter_mut().zip(vx.row(r)) {
                    *acc += *v;
                }
            }
        }
        let tr = self.tracked(x);
        self.push(out, Op::SegmentSum { x, segs }, tr)
    }

    /// Fused scaled-dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert_eq!(vk.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(vk.rows(), vv.rows());
        assert_eq!(d % spec.heads, 0, "width must divide heads");
        let dh = d / spec.heads;
        let scale = T::one() / s::<T>(dh as f64).sqrt();
        let mut out = Tensor::zeros(vq.rows(), d);
        let mut probs = Vec::with_capacity(spec.segments.len() * spec.heads);
        let mut scores = Vec::new();
        for seg in &spec.segments {
            for h in 0..spec.heads {
                let c0 = h * dh;
                let mut p = vec![T::zero(); seg.q_len * seg.k_len];
                for i in 0..seg.q_len {
                    let qi = &vq.row(seg.q_start + i)[c0..c0 + dh];
                    scores.clear();
                    let mut mx = T::neg_infinity();
                    for j in 0..seg.k_len {
                        if !allowed(&spec, seg, i, j) {
                            scores.push(T::neg_infinity());
                            continue;
                        }
                        let kj = &vk.row(seg.k_start + j)[c0..c0 + dh];
                        let sc = dot(qi, kj) * scale;
                        mx = mx.max(sc);
                        scores.push(sc);
                    }
                    if mx == T::neg_infinity() {
                        continue;
                    }
                    let mut z = T::zero();
                    for j in 0..seg.k_len {
                        let e = if scores[j] == T::neg_infinity() {
                            T::zero()
                        } else {
                            (scores[j] - mx).exp()
                        };
                        p[i * seg.k_len + j] = e;
                        z += e;
                    }
                    let orow = out.row_mut(seg.q_start + i);
                    for j in 0..seg.k_len {
                        let w = p[i * seg.k_len + j] / z;
                        p[i * seg.k_len + j] = w;
                        if w != T::zero() {
                            let vj = &vv.row(seg.k_start + j)[c0..c0 + dh];
                            for (o, x) in orow[c0..c0 + dh].iter_mut().zip(vj) {
                                *o += w * *x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                cache: Box::new(AttnCache { spec, probs }),
            },
            tr,
        )
    }

    /// Mean token-level cross-entropy over rows with `Some` target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let vl = self.value(logits);
        let (m, n) = vl.shape();
        assert_eq!(targets.len(), m);
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..m {
            let row = vl.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..n {
                let e = (row[c] - mx).exp();
                probs[r * n + c] = e;
                z += e;
            }
            for c in 0..n {
                probs[r * n + c] /= z;
            }
            if let Some(t) = targets[r] {
                total += -(row[t] - mx - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / s::<T>(count as f64)
        };
        let tr = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            tr,
        )
    }

    /// Mean binary cross-entropy with logits over entries with `Some` target.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<Option<T>>) -> Var {
        let vl = self.value(logits);
        assert_eq!(targets.len(), vl.len());
        let mut total = T::zero();
        let mut count = 0;
        for (x, t) in vl.data().iter().zip(&targets) {
            if let Some(y) = *t {
                // max(x,0) - x*y + ln(1 + e^-|x|)
                total += x.max(T::zero()) - *x * y + (-x.abs()).exp().ln_1p();
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / s::<T>(count as f64)
        };
        let tr = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets,
                count,
            },
            tr,
        )
    }

    /// Mean over rows of `KL(softmax(q) || softmax(p))`, restricted to
    /// entries flagged in `valid` (row-major, same shape as the logits).
    pub fn kl_logits(&mut self, q: Var, p: Var, valid: Vec<bool>) -> Var {
        let (vq, vp) = (self.value(q), self.value(p));
        assert_eq!(vq.shape(), vp.shape());
        let (m, n) = vq.shape();
        assert_eq!(valid.len(), m * n);
        let qp = masked_softmax_rows(vq, &valid);
        let pp = masked_softmax_rows(vp, &valid);
        let mut row_kl = vec![T::zero(); m];
        for r in 0..m {
            let mut acc = T::zero();
            for c in 0..n {
                let i = r * n + c;
                if valid[i] && qp[i] > T::zero() {
                    acc += qp[i] * (qp[i].ln() - pp[i].ln());
                }
            }
            row_kl[r] = acc;
        }
        let mean = row_kl.iter().copied().sum::<T>() / s::<T>(m.max(1) as f64);
        let tr = self.tracked(q) || self.tracked(p);
        self.push(
            Tensor::scalar(mean),
            Op::KlLogits {
                q,
                p,
                valid,
                qp,
                pp,
                row_kl,
            },
            tr,
        )
    }

    /// Hard k-hot Gumbel-Softmax with straight-through gradients.
    ///
    /// `noise[d]` holds the Gumbel noise of draw `d` (same shape as the
    /// logits). Each draw is a softmax over the valid entries of a row; the
    /// forward value is the element-wise OR of the per-draw one-hot argmaxes
    /// and the backward pass uses the element-wise max of the soft draws.
    pub fn khot_straight_through(
        &mut self,
        logits: Var,
        noise: &[Tensor<T>],
        tau: T,
        valid: &[bool],
    ) -> Var {
        let vl = self.value(logits);
        let (m, n) = vl.shape();
        assert_eq!(valid.len(), m * n);
        let mut out = Tensor::zeros(m, n);
        let mut softs = Vec::with_capacity(noise.len());
        for g in noise {
            assert_eq!(g.shape(), (m, n));
            let perturbed: Vec<T> = vl
                .data()
                .iter()
                .zip(g.data())
                .map(|(l, e)| (*l + *e) / tau)
                .collect();
            let pt = Tensor::from_vec(m, n, perturbed).expect("shape");
            let soft = masked_softmax_rows(&pt, valid);
            for r in 0..m {
                let mut best = None;
                for c in 0..n {
                    let i = r * n + c;
                    if valid[i] && best.is_none_or(|b: usize| soft[i] > soft[r * n + b]) {
                        best = Some(c);
                    }
                }
                if let Some(b) = best {
                    out.set(r, b, T::one());
                }
            }
            softs.push(soft);
        }
        let mut winner = vec![0usize; m * n];
        for (i, w) in winner.iter_mut().enumerate() {
            let mut best = T::neg_infinity();
            for (d, soft) in softs.iter().enumerate() {
                if soft[i] > best {
                    best = soft[i];
                    *w = d;
                }
            }
        }
        let tr = self.tracked(logits);
        self.push(
            out,
            Op::KHot {
                logits,
                cache: Box::new(KHotCache { softs, winner, tau }),
            },
            tr,
        )
    }

    /// `Σ c_i · v_i` over `1×1` values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, c) in terms {
            acc += self.value(v).item() * c;
        }
        let tr = terms.iter().any(|&(v, _)| self.tracked(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), tr)
    }

    /// `Σ x ⊙ w` for a constant weight tensor `w`.
    pub fn readout(&mut self, x: Var, w: Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), w.shape());
        let acc = vx.data().iter().zip(w.data()).map(|(a, b)| *a * *b).sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(acc), Op::Readout { x, w }, tr)
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                params.push((id, g));
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.value(v).shape();
        Tensor::zeros(r, c)
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.shape();
                let n = vb.cols();
                if self.tracked(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    self.accum(grads, *a, da);
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                    self.accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
                }
                if self.tracked(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
                }
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.tracked(*b) {
                    let mut db = self.zeros_like(*b);
                    for r in 0..g.rows() {
                        for (acc, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += *x;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::MulCol(a, sv) => {
                let (va, vs) = (self.value(*a), self.value(*sv));
                if self.tracked(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let f = vs.data()[r];
                        for x in da.row_mut(r) {
                            *x *= f;
                        }
                    }
                    self.accum(grads, *a, da);
                }
                if self.tracked(*sv) {
                    let mut ds = self.zeros_like(*sv);
                    for r in 0..g.rows() {
                        ds.data_mut()[r] = dot(g.row(r), va.row(r));
                    }
                    self.accum(grads, *sv, ds);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|x| x * c));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                let d = g.data().to_vec();
                self.accum(grads, *a, Tensor::from_vec(r, c, d).unwrap());
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(x, y)| if *y > T::zero() { *x } else { T::zero() })
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::Tanh(a) => {
                let out = &self.nodes[idx].value;
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| *x * (T::one() - *y * *y))
                    .collect();
                self.accum(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = g.shape();
                let gv = self.value(*gain);
                if self.tracked(*gain) || self.tracked(*bias) {
                    let mut dg = Tensor::zeros(1, n);
                    let mut db = Tensor::zeros(1, n);
                    for r in 0..m {
                        for c in 0..n {
                            let gi = g.get(r, c);
                            dg.data_mut()[c] += gi * xhat[r * n + c];
                            db.data_mut()[c] += gi;
                        }
                    }
                    self.accum(grads, *gain, dg);
                    self.accum(grads, *bias, db);
                }
                if self.tracked(*x) {
                    let nf = s::<T>(n as f64);
                    let mut dx = Tensor::zeros(m, n);
                    for r in 0..m {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for c in 0..n {
                            let dy = g.get(r, c) * gv.data()[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dy = g.get(r, c) * gv.data()[c];
                            let v = (dy * nf - sum_dy - xhat[r * n + c] * sum_dy_xhat)
                                * rstd[r]
                                / nf;
                            dx.set(r, c, v);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Gather { src, idx: rows } => {
                if self.tracked(*src) {
                    let mut ds = self.zeros_like(*src);
                    for (o, &i) in rows.iter().enumerate() {
                        for (acc, x) in ds.row_mut(i).iter_mut().zip(g.row(o)) {
                            *acc += *x;
                        }
                    }
                    self.accum(grads, *src, ds);
                }
            }
            Op::Concat(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.tracked(p) {
                        let d = g.data()[r0 * c..(r0 + r) * c].to_vec();
                        self.accum(grads, p, Tensor::from_vec(r, c, d).unwrap());
                    }
                    r0 += r;
                }
            }
            Op::SegmentSum { x, segs } => {
                if self.tracked(*x) {
                    let mut dx = self.zeros_like(*x);
                    for (o, &(st, len)) in segs.iter().enumerate() {
                        for r in st..st + len {
                            for (acc, v) in dx.row_mut(r).iter_mut().zip(g.row(o)) {
                                *acc += *v;
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, cache } => {
                self.attention_backward(*q, *k, *v, cache, g, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (m, n) = self.value(*logits).shape();
                let scale = g.item() / s::<T>(*count as f64);
                let mut dl = Tensor::zeros(m, n);
                for r in 0..m {
                    if let Some(t) = targets[r] {
                        for c in 0..n {
                            let mut p = probs[r * n + c];
                            if c == t {
                                p -= T::one();
                            }
                            dl.set(r, c, p * scale);
                        }
                    }
                }
                self.accum(grads, *logits, dl);
            }
            Op::Bce {
                logits,
                targets,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vl = self.value(*logits);
                let scale = g.item() / s::<T>(*count as f64);
                let d = vl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(x, t)| match t {
                        Some(y) => (sigmoid(*x) - *y) * scale,
                        None => T::zero(),
                    })
                    .collect();
                self.accum(grads, *logits, Tensor::from_vec(vl.rows(), vl.cols(), d).unwrap());
            }
            Op::KlLogits {
                q,
                p,
                valid,
                qp,
                pp,
                row_kl,
            } => {
                let (m, n) = self.value(*q).shape();
                let scale = g.item() / s::<T>(m.max(1) as f64);
                let mut dq = Tensor::zeros(m, n);
                let mut dp = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        let i = r * n + c;
                        if !valid[i] {
                            continue;
                        }
                        let lq = if qp[i] > T::zero() { qp[i].ln() } else { T::zero() };
                        dq.set(r, c, scale * qp[i] * (lq - pp[i].ln() - row_kl[r]));
                        dp.set(r, c, scale * (pp[i] - qp[i]));
                    }
                }
                self.accum(grads, *q, dq);
                self.accum(grads, *p, dp);
            }
            Op::KHot { logits, cache } => {
                let (m, n) = g.shape();
                let inv_tau = T::one() / cache.tau;
                let mut dl = Tensor::zeros(m, n);
                for (d, soft) in cache.softs.iter().enumerate() {
                    for r in 0..m {
                        // upstream gradient routed to this draw's soft sample
                        let mut inner = T::zero();
                        for c in 0..n {
                            let i = r * n + c;
                            if cache.winner[i] == d {
                                inner += g.data()[i] * soft[i];
                            }
                        }
                        for c in 0..n {
                            let i = r * n + c;
                            let gy = if cache.winner[i] == d {
                                g.data()[i]
                            } else {
                                T::zero()
                            };
                            let add = inv_tau * soft[i] * (gy - inner);
                            dl.data_mut()[i] += add;
                        }
                    }
                }
                self.accum(grads, *logits, dl);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accum(grads, v, Tensor::scalar(g.item() * c));
                }
            }
            Op::Readout { x, w } => {
                let gi = g.item();
                self.accum(grads, *x, w.map(|v| v * gi));
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cache: &AttnCache<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let spec = &cache.spec;
        let d = vq.cols();
        let dh = d / spec.heads;
        let scale = T::one() / s::<T>(dh as f64).sqrt();
        let mut dq = Tensor::zeros(vq.rows(), d);
        let mut dk = Tensor::zeros(vk.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        let mut pi = 0;
        for seg in &spec.segments {
            for h in 0..spec.heads {
                let c0 = h * dh;
                let p = &cache.probs[pi];
                pi += 1;
                for i in 0..seg.q_len {
                    let go = &g.row(seg.q_start + i)[c0..c0 + dh];
                    dp.clear();
                    let mut rowdot = T::zero();
                    for j in 0..seg.k_len {
                        let w = p[i * seg.k_len + j];
                        if w == T::zero() {
                            dp.push(T::zero());
                            continue;
                        }
                        let vj = &vv.row(seg.k_start + j)[c0..c0 + dh];
                        let dpij = dot(go, vj);
                        dp.push(dpij);
                        rowdot += w * dpij;
                        let dvr = &mut dv.row_mut(seg.k_start + j)[c0..c0 + dh];
                        for (acc, x) in dvr.iter_mut().zip(go) {
                            *acc += w * *x;
                        }
                    }
                    for j in 0..seg.k_len {
                        let w = p[i * seg.k_len + j];
                        if w == T::zero() {
                            continue;
                        }
                        let ds = w * (dp[j] - rowdot) * scale;
                        let kj = &vk.row(seg.k_start + j)[c0..c0 + dh];
                        let qi = &vq.row(seg.q_start + i)[c0..c0 + dh];
                        {
                            let dqr = &mut dq.row_mut(seg.q_start + i)[c0..c0 + dh];
                            for (acc, x) in dqr.iter_mut().zip(kj) {
                                *acc += ds * *x;
                            }
                        }
                        let dkr = &mut dk.row_mut(seg.k_start + j)[c0..c0 + dh];
                        for (acc, x) in dkr.iter_mut().zip(qi) {
                            *acc += ds * *x;
                        }
                    }
                }
            }
        }
        self.accum(grads, q, dq);
        self.accum(grads, k, dk);
        self.accum(grads, v, dv);
    }
}

#[inline]
fn allowed(spec: &AttentionSpec, seg: &Segment, i: usize, j: usize) -> bool {
    if spec.causal && j > i {
        return false;
    }
    match &spec.key_valid {
        Some(kv) => kv[seg.k_start + j],
        None => true,
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row softmax restricted to `valid` entries; invalid entries are 0 and rows
/// without any valid entry are all-zero.
pub fn masked_softmax_rows<T: Scalar>(x: &Tensor<T>, valid: &[bool]) -> Vec<T> {
    let (m, n) = x.shape();
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let mut mx = T::neg_infinity();
        for c in 0..n {
            if valid[r * n + c] {
                mx = mx.max(x.get(r, c));
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut z = T::zero();
        for c in 0..n {
            let i = r * n + c;
            if valid[i] {
                out[i] = (x.get(r, c) - mx).exp();
                z += out[i];
            }
        }
        for c in 0..n {
            out[r * n + c] /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks the gradient of `build` w.r.t. its first input by central
    /// differences.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_tracked(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::detached();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(w, x)| {
                            let mut x = x.clone();
                            if w == which {
                                x.data_mut()[i] += delta;
                            }
                            g.input(x)
                        })
                        .collect();
                    let o = build(&mut g, &vars);
                    g.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs().max(a.abs()),
                    "input {which} elem {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 4, &mut rng);
        check(
            vec![random(5, 3, &mut rng), random(3, 4, &mut rng), random(1, 4, &mut rng)],
            |g, v| {
                let h = g.matmul(v[0], v[1]);
                let h = g.add_bias(h, v[2]);
                let h = g.tanh(h);
                let r = g.relu(h);
                let m = g.mul(h, r);
                let sum = g.add(m, h);
                let p = g.gather(sum, vec![0, 2, 4, 2]);
                let c = g.concat(&[p, sum]);
                let pooled = g.segment_sum(c, vec![(0, 3), (3, 6)]);
                let _ = &w;
                g.readout(pooled, Tensor::from_vec(2, 4, vec![0.3, -0.2, 0.5, 1.0, -1.0, 0.1, 0.7, 0.2]).unwrap())
            },
        );
    }

    #[test]
    fn layer_norm_and_mul_col_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rw = random(4, 6, &mut rng);
        check(
            vec![random(4, 6, &mut rng), random(1, 6, &mut rng), random(1, 6, &mut rng), random(4, 1, &mut rng)],
            move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]);
                let y = g.mul_col(y, v[3]);
                let y = g.scale(y, 1.7);
                g.readout(y, rw.clone())
            },
        );
    }

    #[test]
    fn attention_gradients_with_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rw = random(7, 8, &mut rng);
        let spec = AttentionSpec {
            heads: 2,
            causal: false,
            segments: vec![
                Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 4 },
                Segment { q_start: 3, q_len: 4, k_start: 4, k_len: 2 },
            ],
            key_valid: Some(vec![true, true, false, true, true, true]),
        };
        check(
            vec![random(7, 8, &mut rng), random(6, 8, &mut rng), random(6, 8, &mut rng)],
            move |g, v| {
                let a = g.attention(v[0], v[1], v[2], spec.clone());
                g.readout(a, rw.clone())
            },
        );
    }

    #[test]
    fn causal_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rw = random(5, 4, &mut rng);
        let spec = AttentionSpec {
            heads: 1,
            causal: true,
            segments: vec![
                Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 2 },
                Segment { q_start: 2, q_len: 3, k_start: 2, k_len: 3 },
            ],
            key_valid: None,
        };
        check(
            vec![random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng)],
            move |g, v| {
                let a = g.attention(v[0], v[1], v[2], spec.clone());
                g.readout(a, rw.clone())
            },
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(4, 5, &mut rng)], |g, v| {
            g.cross_entropy(v[0], vec![Some(1), None, Some(4), Some(0)])
        });
        check(vec![random(3, 3, &mut rng)], |g, v| {
            g.bce_with_logits(
                v[0],
                vec![Some(1.0), Some(0.0), None, Some(0.0), Some(1.0), Some(1.0), None, None, Some(0.0)],
            )
        });
        let valid = vec![true, true, false, true, true, true, true, false];
        check(vec![random(2, 4, &mut rng), random(2, 4, &mut rng)], move |g, v| {
            g.kl_logits(v[0], v[1], valid.clone())
        });
    }

    #[test]
    fn weighted_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![random(2, 3, &mut rng)], |g, v| {
            let a = g.cross_entropy(v[0], vec![Some(0), Some(2)]);
            let b = g.bce_with_logits(v[0], vec![Some(1.0); 6]);
            g.weighted_sum(&[(a, 1.0), (b, 0.5)])
        });
    }

    #[test]
    fn fully_masked_query_yields_zero_row() {
        let mut g = Graph::<f64>::detached();
        let q = g.input(Tensor::full(1, 2, 1.0));
        let k = g.input(Tensor::full(2, 2, 1.0));
        let spec = AttentionSpec {
            heads: 1,
            causal: false,
            segments: vec![Segment { q_start: 0, q_len: 1, k_start: 0, k_len: 2 }],
            key_valid: Some(vec![false, false]),
        };
        let o = g.attention(q, k, k, spec);
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }
}
