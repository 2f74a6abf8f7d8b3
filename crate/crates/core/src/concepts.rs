//! Candidate concepts and QA-driven concept filtering.
//!
//! Candidates are the de-duplicated union of detected object labels and the
//! content words of a caption. Filtering scores each candidate by its best
//! cosine similarity to any QA token and keeps the top `k`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::world::ontology::{fnv1a, ONTOLOGY};
use crate::world::CategoryTaxonomy;
use crate::GvqgError;

pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
pub const DEFAULT_SYNONYMS: &str = include_str!("../data/synonyms.txt");

/// Default width of concept embeddings.
pub const EMBED_DIM: usize = 32;

#[derive(Clone, Debug)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, GvqgError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

fn is_content(tok: &str, stop: &Stopwords) -> bool {
    tok.chars().any(char::is_alphanumeric) && !stop.contains(tok)
}

/// Lowercased content tokens, stopwords and punctuation removed, first
/// occurrence order kept, duplicates dropped.
pub fn content_tokens(tokens: &[String], stop: &Stopwords) -> Vec<String> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .map(|t| t.to_lowercase())
        .filter(|t| is_content(t, stop))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Content tokens of a question/answer pair, as fed to the filter.
pub fn qa_tokens(question: &[String], answer: &[String], stop: &Stopwords) -> Vec<String> {
    let joined: Vec<String> = question.iter().chain(answer).cloned().collect();
    content_tokens(&joined, stop)
}

/// Fixed concept embedder: each token maps to a seeded unit vector; a
/// synonym is a small perturbation of its canonical token's vector.
#[derive(Clone, Debug)]
pub struct TokenEmbedder {
    dim: usize,
    synonyms: HashMap<String, String>,
    cache: HashMap<String, Vec<f64>>,
}

impl TokenEmbedder {
    /// Relative size of the per-variant perturbation of a synonym vector.
    const SYNONYM_JITTER: f64 = 0.3;

    pub fn new(dim: usize, synonym_text: &str) -> Self {
        let mut synonyms: HashMap<String, String> = synonym_text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                Some((it.next()?.to_lowercase(), it.next()?.to_lowercase()))
            })
            .collect();
        for l in ONTOLOGY {
            if l.plural != l.label {
                synonyms
                    .entry(l.plural.to_string())
                    .or_insert_with(|| l.label.to_string());
            }
        }
        let mut e = Self {
            dim,
            synonyms,
            cache: HashMap::new(),
        };
        let known: Vec<String> = ONTOLOGY
            .iter()
            .map(|l| l.label.to_string())
            .chain(e.synonyms.keys().cloned())
            .collect();
        for t in known {
            let v = e.compute(&t);
            e.cache.insert(t, v);
        }
        e
    }

    pub fn load(dim: usize, path: &Path) -> Result<Self, GvqgError> {
        Ok(Self::new(dim, &std::fs::read_to_string(path)?))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn synonyms(&self) -> &HashMap<String, String> {
        &self.synonyms
    }

    fn base(&self, token: &str, salt: &str) -> Vec<f64> {
        crate::world::token_vector(token, salt, self.dim)
    }

    fn compute(&self, token: &str) -> Vec<f64> {
        let v = match self.synonyms.get(token) {
            Some(canon) => {
                let b = unit(self.base(canon, "concept"));
                let j = unit(self.base(token, "concept-jitter"));
                b.iter()
                    .zip(&j)
                    .map(|(x, y)| x + Self::SYNONYM_JITTER * y)
                    .collect()
            }
            None => self.base(token, "concept"),
        };
        unit(v)
    }

    /// Unit-norm embedding of `token`.
    pub fn embed(&self, token: &str) -> Vec<f64> {
        match self.cache.get(token) {
            Some(v) => v.clone(),
            None => self.compute(token),
        }
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        let (va, vb) = (self.embed(a), self.embed(b));
        va.iter().zip(&vb).map(|(x, y)| x * y).sum()
    }

    /// Candidate × QA-token cosine matrix.
    pub fn similarity_matrix(&self, rows: &[String], cols: &[String]) -> Vec<Vec<f64>> {
        let cv: Vec<Vec<f64>> = cols.iter().map(|c| self.embed(c)).collect();
        rows.iter()
            .map(|r| {
                let rv = self.embed(r);
                cols.iter()
                    .zip(&cv)
                    .map(|(c, v)| {
                        if c == r {
                            1.0
                        } else {
                            rv.iter().zip(v).map(|(x, y)| x * y).sum()
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

impl Default for TokenEmbedder {
    fn default() -> Self {
        Self::new(EMBED_DIM, DEFAULT_SYNONYMS)
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Object,
    Caption,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub token: String,
    pub provenance: Provenance,
}

/// De-duplicated candidate concepts; object labels come first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub concepts: Vec<Concept>,
    /// Nothing survived; guidance falls back to the category alone.
    pub empty: bool,
}

impl ConceptSet {
    pub fn tokens(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.token.clone()).collect()
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.concepts.iter().any(|c| c.token == tok)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

/// Union of object labels and caption content words, de-duplicated.
pub fn build_candidate_concepts(objects: &[String], caption: &[String], stop: &Stopwords) -> ConceptSet {
    let mut seen = HashSet::new();
    let mut concepts = Vec::new();
    let tagged = objects
        .iter()
        .map(|t| (t, Provenance::Object))
        .chain(caption.iter().map(|t| (t, Provenance::Caption)));
    for (tok, provenance) in tagged {
        let tok = tok.to_lowercase();
        if is_content(&tok, stop) && seen.insert(tok.clone()) {
            concepts.push(Concept {
                token: tok,
                provenance,
            });
        }
    }
    ConceptSet {
        empty: concepts.is_empty(),
        concepts,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Filtered,
    Actor,
    Random,
}

/// Guidance fed to the explicit model: up to `k` concepts and a category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    pub concepts: Vec<String>,
    pub category: Option<String>,
    pub mode: SelectionMode,
}

impl ConceptSelection {
    /// Every concept must come from `candidates`; returns the offenders.
    pub fn check_subset(&self, candidates: &ConceptSet) -> Result<(), Vec<String>> {
        let bad: Vec<String> = self
            .concepts
            .iter()
            .filter(|c| !candidates.contains(c))
            .cloned()
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    pub fn with_category(mut self, category: Option<String>) -> Self {
        self.category = category;
        self
    }
}

/// Scores `items` against `qa` and returns positions of the top `k`, best
/// first; ties are broken by token text then position.
fn top_k_by_similarity(
    items: &[String],
    qa: &[String],
    k: usize,
    embedder: &TokenEmbedder,
) -> Vec<(usize, f64)> {
    let sims = embedder.similarity_matrix(items, qa);
    let mut scored: Vec<(usize, f64)> = sims
        .iter()
        .enumerate()
        .map(|(i, row)| (i, row.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| items[a.0].cmp(&items[b.0]))
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

/// Keeps the `k` candidates most similar to the QA tokens.
pub fn filter_concepts(
    candidates: &ConceptSet,
    qa_tokens: &[String],
    k: usize,
    embedder: &TokenEmbedder,
) -> Result<ConceptSelection, GvqgError> {
    if k == 0 {
        return Err(GvqgError::InvalidInput("k must be at least 1".into()));
    }
    let items = candidates.tokens();
    if items.len() < k {
        log::warn!("only {} candidate concepts for k={k}", items.len());
    }
    let concepts = if qa_tokens.is_empty() {
        let mut all = items;
        all.sort();
        all.truncate(k);
        all
    } else {
        top_k_by_similarity(&items, qa_tokens, k, embedder)
            .into_iter()
            .map(|(i, _)| items[i].clone())
            .collect()
    };
    Ok(ConceptSelection {
        concepts,
        category: None,
        mode: SelectionMode::Filtered,
    })
}

/// Per-candidate filter scores (best cosine against any QA token).
pub fn concept_scores(candidates: &ConceptSet, qa_tokens: &[String], embedder: &TokenEmbedder) -> Vec<(String, f64)> {
    let items = candidates.tokens();
    embedder
        .similarity_matrix(&items, qa_tokens)
        .into_iter()
        .zip(items)
        .map(|(row, t)| (t, row.into_iter().fold(f64::NEG_INFINITY, f64::max)))
        .collect()
}

/// Uniform `min(k, |candidates|)` concepts without replacement plus a
/// uniform category.
pub fn random_selection<R: Rng>(
    candidates: &ConceptSet,
    k: usize,
    categories: &CategoryTaxonomy,
    rng: &mut R,
) -> ConceptSelection {
    let mut items = candidates.tokens();
    items.shuffle(rng);
    items.truncate(k.min(items.len()));
    let category = categories.names()[rng.random_range(0..categories.len())].clone();
    ConceptSelection {
        concepts: items,
        category: Some(category),
        mode: SelectionMode::Random,
    }
}

/// Validates an actor-provided selection against the candidates.
pub fn actor_selection(
    candidates: &ConceptSet,
    concepts: Vec<String>,
    category: Option<String>,
    k_max: usize,
    categories: &CategoryTaxonomy,
) -> Result<ConceptSelection, GvqgError> {
    if concepts.len() > k_max {
        return Err(GvqgError::InvalidInput(format!(
            "{} concepts exceed the limit of {k_max}",
            concepts.len()
        )));
    }
    if let Some(c) = &category {
        if !categories.contains(c) {
            return Err(GvqgError::InvalidInput(format!("unknown category {c}")));
        }
    }
    let sel = ConceptSelection {
        concepts,
        category,
        mode: SelectionMode::Actor,
    };
    sel.check_subset(candidates).map_err(|bad| {
        GvqgError::InvalidInput(format!("concepts not among candidates: {}", bad.join(", ")))
    })?;
    Ok(sel)
}

/// Gold object slots: the `k` detected slots most similar to the QA tokens
/// (captions are not consulted).
pub fn gold_objects_for_implicit(
    detected: &[String],
    qa_tokens: &[String],
    k: usize,
    embedder: &TokenEmbedder,
) -> Vec<usize> {
    if detected.is_empty() || k == 0 {
        return Vec::new();
    }
    if qa_tokens.is_empty() {
        let mut idx: Vec<usize> = (0..detected.len()).collect();
        idx.sort_by(|&a, &b| detected[a].cmp(&detected[b]).then(a.cmp(&b)));
        idx.truncate(k);
        return idx;
    }
    top_k_by_similarity(detected, qa_tokens, k, embedder)
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// Stable per-string seed mixing, exposed for callers deriving rng streams.
pub fn seed_for(base: u64, key: &str) -> u64 {
    base ^ fnv1a(key.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn frisbee_scene_candidates() -> ConceptSet {
        build_candidate_concepts(
            &toks("person dog frisbee grass"),
            &toks("a man throwing a frisbee to a dog"),
            &Stopwords::default(),
        )
    }

    #[test]
    fn stopword_list_size() {
        let n = Stopwords::default().len();
        assert!((110..=140).contains(&n), "{n}");
    }

    #[test]
    fn frisbee_scene_candidate_set() {
        let c = frisbee_scene_candidates();
        let mut got = c.tokens();
        got.sort();
        let mut want = toks("person dog frisbee grass man throwing");
        want.sort();
        assert_eq!(got, want);
        assert_eq!(c.concepts[4].provenance, Provenance::Caption);
    }

    #[test]
    fn frisbee_scene_filtering_picks_dog_and_frisbee() {
        let stop = Stopwords::default();
        let qa = qa_tokens(&toks("what is the labrador about to catch ?"), &toks("frisbee"), &stop);
        assert_eq!(qa, toks("labrador catch frisbee"));
        let sel = filter_concepts(&frisbee_scene_candidates(), &qa, 2, &TokenEmbedder::default()).unwrap();
        let mut got = sel.concepts.clone();
        got.sort();
        assert_eq!(got, toks("dog frisbee"));
        assert_eq!(sel.mode, SelectionMode::Filtered);
    }

    #[test]
    fn set_semantics() {
        let stop = Stopwords::default();
        assert_eq!(build_candidate_concepts(&toks("dog dog"), &[], &stop).tokens(), toks("dog"));
        let c = build_candidate_concepts(&toks("dog cat"), &toks("a the of"), &stop);
        assert_eq!(c.tokens(), toks("dog cat"));
        let e = build_candidate_concepts(&[], &toks("the a"), &stop);
        assert!(e.empty);
    }

    #[test]
    fn embedder_properties() {
        let e = TokenEmbedder::default();
        for t in ["dog", "frisbee", "unseen"] {
            let v = e.embed(t);
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!((e.cosine(t, t) - 1.0).abs() < 1e-12);
        }
        for (variant, canon) in e.synonyms() {
            assert!(e.cosine(variant, canon) >= 0.8, "{variant} {canon}");
        }
    }

    #[test]
    fn exact_match_selects_everything() {
        let stop = Stopwords::default();
        let c = build_candidate_concepts(&toks("dog cat tree"), &[], &stop);
        let e = TokenEmbedder::default();
        let sel = filter_concepts(&c, &toks("dog cat tree"), 3, &e).unwrap();
        assert_eq!(sel.concepts.len(), 3);
        for (_, s) in concept_scores(&c, &toks("dog cat tree"), &e) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_candidate_list_returns_all() {
        let stop = Stopwords::default();
        let c = build_candidate_concepts(&toks("dog"), &[], &stop);
        let sel = filter_concepts(&c, &toks("cat"), 2, &TokenEmbedder::default()).unwrap();
        assert_eq!(sel.concepts, toks("dog"));
        assert!(filter_concepts(&c, &toks("cat"), 0, &TokenEmbedder::default()).is_err());
    }

    /// Brute force: enumerate every k-subset and keep the one with maximal
    /// score sum, preferring lexicographically smaller token lists.
    fn brute_force(cands: &[String], qa: &[String], k: usize, e: &TokenEmbedder) -> Vec<String> {
        let score = |t: &String| {
            let v = e.embed(t);
            qa.iter()
                .map(|q| {
                    if q == t {
                        1.0
                    } else {
                        e.embed(q).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let n = cands.len();
        let mut best: Option<(f64, Vec<String>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k.min(n) {
                continue;
            }
            let mut chosen: Vec<String> =
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| cands[i].clone()).collect();
            chosen.sort();
            let total: f64 = chosen.iter().map(score).sum();
            let better = match &best {
                None => true,
                Some((b, bt)) => total > *b + 1e-12 || ((total - b).abs() <= 1e-12 && chosen < *bt),
            };
            if better {
                best = Some((total, chosen));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn filter_matches_brute_force_oracle() {
        let e = TokenEmbedder::default();
        let stop = Stopwords::default();
        let vocab: Vec<String> = ONTOLOGY.iter().map(|l| l.label.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut pool = vocab.clone();
            pool.shuffle(&mut rng);
            let cands: Vec<String> = pool[..6].to_vec();
            let qa: Vec<String> = pool[3..8].to_vec();
            let set = build_candidate_concepts(&cands, &[], &stop);
            for k in 1..=3 {
                let mut got = filter_concepts(&set, &qa, k, &e).unwrap().concepts;
                got.sort();
                assert_eq!(got, brute_force(&cands, &qa, k, &e));
            }
        }
    }

    #[test]
    fn random_selection_frequencies() {
        let stop = Stopwords::default();
        let c = build_candidate_concepts(&toks("dog cat tree car bus"), &[], &stop);
        let tax = CategoryTaxonomy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let s = random_selection(&c, 2, &tax, &mut rng);
            assert_eq!(s.concepts.len(), 2);
            assert!(s.check_subset(&c).is_ok());
            assert!(tax.contains(s.category.as_deref().unwrap()));
            for t in s.concepts {
                *counts.entry(t).or_default() += 1;
            }
        }
        for t in c.tokens() {
            let f = counts[&t] as f64 / draws as f64;
            assert!((f - 2.0 / 5.0).abs() < 0.02, "{t} {f}");
        }
        let a = random_selection(&c, 2, &tax, &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_selection(&c, 2, &tax, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let one = build_candidate_concepts(&toks("dog"), &[], &stop);
        assert_eq!(random_selection(&one, 2, &tax, &mut rng).concepts.len(), 1);
    }

    #[test]
    fn gold_objects() {
        let e = TokenEmbedder::default();
        let stop = Stopwords::default();
        let det = toks("dog frisbee grass person");
        let qa = qa_tokens(&toks("what is the labrador about to catch ?"), &toks("frisbee"), &stop);
        let mut got = gold_objects_for_implicit(&det, &qa, 2, &e);
        got.sort();
        assert_eq!(got, vec![0, 1]);
        let mut all = gold_objects_for_implicit(&det, &qa, 4, &e);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let again = gold_objects_for_implicit(&det, &toks("zzz"), 2, &e);
        assert_eq!(again, gold_objects_for_implicit(&det, &toks("zzz"), 2, &e));
    }

    #[test]
    fn actor_selection_rejects_fabricated() {
        let c = frisbee_scene_candidates();
        let tax = CategoryTaxonomy::default();
        let err = actor_selection(&c, toks("dog unicorn"), None, 2, &tax).unwrap_err();
        assert!(err.to_string().contains("unicorn"));
        assert!(actor_selection(&c, toks("dog frisbee"), Some("object".into()), 2, &tax).is_ok());
        assert!(actor_selection(&c, toks("dog frisbee man"), None, 2, &tax).is_err());
    }
}
