//! Gumbel-Softmax sampling of discrete object selections, k-hot tiling and
//! categorical KL.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use crate::GvqgError;

/// Floor applied to `p` probabilities inside [`categorical_kl`].
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub hard: bool,
    /// Multiplicative temperature factor applied once per epoch.
    pub anneal: Option<f64>,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            hard: true,
            anneal: None,
        }
    }
}

impl GumbelConfig {
    pub fn new(temperature: f64, hard: bool) -> Result<Self, GvqgError> {
        let cfg = Self {
            temperature,
            hard,
            anneal: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GvqgError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(GvqgError::config("temperature", "must be a finite positive number"));
        }
        if let Some(a) = self.anneal {
            if !(a > 0.0 && a <= 1.0) {
                return Err(GvqgError::config("anneal", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Temperature after `epoch` annealing steps.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        match self.anneal {
            Some(a) => self.temperature * a.powi(epoch as i32),
            None => self.temperature,
        }
    }
}

/// How a guidance mask was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Predicted,
    Gold,
    Random,
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Predicted => "predicted",
            MaskMode::Gold => "gold",
            MaskMode::Random => "random",
        })
    }
}

impl std::str::FromStr for MaskMode {
    type Err = GvqgError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predicted" => Ok(MaskMode::Predicted),
            "gold" => Ok(MaskMode::Gold),
            "random" => Ok(MaskMode::Random),
            other => Err(GvqgError::Parse(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Binary selection over the `k_o` object slots plus its soft companion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceMask {
    pub hard: Vec<u8>,
    pub soft: Vec<f64>,
    pub mode: MaskMode,
}

impl GuidanceMask {
    /// Mask with ones exactly at `indices`.
    pub fn from_indices(k_o: usize, indices: &[usize], mode: MaskMode) -> Result<Self, GvqgError> {
        if indices.is_empty() {
            return Err(GvqgError::InvalidInput("mask needs at least one slot".into()));
        }
        let mut hard = vec![0u8; k_o];
        for &i in indices {
            if i >= k_o {
                return Err(GvqgError::InvalidInput(format!("slot {i} out of range for k_o={k_o}")));
            }
            hard[i] = 1;
        }
        let soft = hard.iter().map(|&h| f64::from(h)).collect();
        Ok(Self { hard, soft, mode })
    }

    pub fn k_o(&self) -> usize {
        self.hard.len()
    }

    pub fn ones(&self) -> usize {
        self.hard.iter().filter(|&&h| h == 1).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter(|(_, &h)| h == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One standard Gumbel(0, 1) draw.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    // open interval so neither log blows up
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn check_logits(logits: &[f64]) -> Result<(), GvqgError> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(GvqgError::InvalidInput("logits must be nonempty and finite".into()));
    }
    Ok(())
}

/// Soft Gumbel-Softmax sample for fixed noise: `softmax((logits + noise) / τ)`.
pub fn soft_sample(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    softmax(&z)
}

/// Index of the largest entry (first on ties).
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax sample: a point on the simplex, or its argmax one-hot in
/// hard mode.
pub fn gumbel_softmax<R: Rng>(logits: &[f64], cfg: &GumbelConfig, rng: &mut R) -> Result<Vec<f64>, GvqgError> {
    cfg.validate()?;
    check_logits(logits)?;
    let noise: Vec<f64> = (0..logits.len()).map(|_| gumbel(rng)).collect();
    let soft = soft_sample(logits, &noise, cfg.temperature);
    if cfg.hard {
        let mut one = vec![0.0; soft.len()];
        one[argmax(&soft)] = 1.0;
        Ok(one)
    } else {
        Ok(soft)
    }
}

/// `k` independent hard draws over the same scores, merged by OR. Only
/// slots flagged in `valid` can be selected.
pub fn sample_k_hot_masked<R: Rng>(
    scores: &[f64],
    valid: &[bool],
    k: usize,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<GuidanceMask, GvqgError> {
    cfg.validate()?;
    check_logits(scores)?;
    if k == 0 {
        return Err(GvqgError::InvalidInput("k must be at least 1".into()));
    }
    if k > scores.len() {
        return Err(GvqgError::InvalidInput(format!("k={k} exceeds k_o={}", scores.len())));
    }
    if valid.len() != scores.len() || !valid.iter().any(|&v| v) {
        return Err(GvqgError::InvalidInput("no selectable slot".into()));
    }
    let n = scores.len();
    let mut hard = vec![0u8; n];
    let mut soft_max = vec![0.0f64; n];
    for _ in 0..k {
        let masked: Vec<f64> = (0..n)
            .map(|i| if valid[i] { scores[i] + gumbel(rng) } else { f64::NEG_INFINITY })
            .collect();
        let soft = softmax(&masked.iter().map(|v| v / cfg.temperature).collect::<Vec<_>>());
        hard[argmax(&soft)] = 1;
        for (m, v) in soft_max.iter_mut().zip(&soft) {
            *m = m.max(*v);
        }
    }
    Ok(GuidanceMask {
        hard,
        soft: soft_max,
        mode: MaskMode::Predicted,
    })
}

pub fn sample_k_hot<R: Rng>(scores: &[f64], k: usize, cfg: &GumbelConfig, rng: &mut R) -> Result<GuidanceMask, GvqgError> {
    sample_k_hot_masked(scores, &vec![true; scores.len()], k, cfg, rng)
}

/// Uniform `min(k, valid)`-subset of the valid slots.
pub fn random_k_subset<R: Rng>(valid: &[bool], k: usize, rng: &mut R) -> Result<GuidanceMask, GvqgError> {
    let slots: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if slots.is_empty() || k == 0 {
        return Err(GvqgError::InvalidInput("no selectable slot".into()));
    }
    let picked: Vec<usize> = index::sample(rng, slots.len(), k.min(slots.len()))
        .into_iter()
        .map(|i| slots[i])
        .collect();
    GuidanceMask::from_indices(valid.len(), &picked, MaskMode::Random)
}

/// Gumbel noise tensors for `k` tiled draws over an `rows × cols` score
/// matrix, in the layout [`Graph::khot_straight_through`] expects.
pub fn draw_noise<T: Scalar, R: Rng>(rows: usize, cols: usize, k: usize, rng: &mut R) -> Vec<Tensor<T>> {
    (0..k)
        .map(|_| {
            let data = (0..rows * cols).map(|_| s::<T>(gumbel(rng))).collect();
            Tensor::from_vec(rows, cols, data).expect("shape")
        })
        .collect()
}

/// Closed-form `Σ q (ln q − ln p)` with `p` floored at [`KL_EPS`].
pub fn categorical_kl(q: &[f64], p: &[f64]) -> Result<f64, GvqgError> {
    if q.len() != p.len() || q.is_empty() {
        return Err(GvqgError::InvalidInput("distributions must have equal nonzero length".into()));
    }
    for (name, d) in [("q", q), ("p", p)] {
        if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(GvqgError::InvalidInput(format!("{name} has negative or non-finite entries")));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(GvqgError::InvalidInput(format!("{name} sums to {total}, not 1")));
        }
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(KL_EPS).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// Comparison of the straight-through gradient against the analytic
/// soft-path gradient for one fixed noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct StraightThroughReport {
    pub estimator: Vec<f64>,
    pub analytic: Vec<f64>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl StraightThroughReport {
    pub fn compare(estimator: Vec<f64>, analytic: Vec<f64>, tolerance: f64) -> Self {
        let max_abs_diff = estimator
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b).abs())
            .fold(if estimator.len() == analytic.len() { 0.0 } else { f64::INFINITY }, f64::max);
        Self {
            passed: max_abs_diff <= tolerance,
            estimator,
            analytic,
            max_abs_diff,
            tolerance,
        }
    }
}

/// Gradient of `Σ w ⊙ hard_sample` w.r.t. the logits through the autodiff
/// straight-through op, checked against `(1/τ) y ⊙ (w − ⟨w, y⟩)` where `y`
/// is the soft sample under the same noise.
pub fn straight_through_grad_check(
    logits: &[f64],
    weights: &[f64],
    noise: &[f64],
    cfg: &GumbelConfig,
) -> Result<StraightThroughReport, GvqgError> {
    cfg.validate()?;
    check_logits(logits)?;
    if !cfg.hard {
        return Err(GvqgError::InvalidInput("straight-through check needs hard mode".into()));
    }
    let n = logits.len();
    if weights.len() != n || noise.len() != n {
        return Err(GvqgError::Shape("logits, weights and noise must match".into()));
    }
    let mut g = Graph::<f64>::detached();
    let l = g.input_tracked(Tensor::row_vector(logits.to_vec()));
    let z = g.khot_straight_through(l, &[Tensor::row_vector(noise.to_vec())], cfg.temperature, &vec![true; n]);
    let out = g.readout(z, Tensor::row_vector(weights.to_vec()));
    let grads = g.backward(out);
    let estimator = grads.of(l).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);

    let y = soft_sample(logits, noise, cfg.temperature);
    let wy: f64 = weights.iter().zip(&y).map(|(a, b)| a * b).sum();
    let analytic = y
        .iter()
        .zip(weights)
        .map(|(yi, wi)| yi * (wi - wy) / cfg.temperature)
        .collect();
    Ok(StraightThroughReport::compare(estimator, analytic, 1e-6))
}
