//! Corpus-level generation metrics (BLEU, ROUGE-L, CIDEr, a lexicon-free
//! METEOR, MSJ) and object-overlap accuracy. Single reference per item.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::GvqgError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub id: String,
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, candidate: Vec<String>, reference: Vec<String>) {
        self.items.push(EvalItem { candidate, reference });
    }

    pub fn from_pairs<S: AsRef<str>>(id: &str, pairs: &[(S, S)]) -> Self {
        let mut c = Self::new(id);
        for (a, b) in pairs {
            c.push(tokenize(a.as_ref()), tokenize(b.as_ref()));
        }
        c
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn nonempty(&self) -> Result<(), GvqgError> {
        if self.items.is_empty() {
            Err(GvqgError::EmptyCorpus)
        } else {
            Ok(())
        }
    }
}

/// Whitespace tokenization.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if n > 0 && toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-n: geometric mean of clipped n-gram precisions of orders
/// 1..=n (uniform weights) times the brevity penalty. No smoothing.
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64, GvqgError> {
    corpus.nonempty()?;
    if !(1..=4).contains(&n) {
        return Err(GvqgError::InvalidInput(format!("BLEU order {n} outside 1..=4")));
    }
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for it in &corpus.items {
            let c = ngram_counts(&it.candidate, order);
            let r = ngram_counts(&it.reference, order);
            for (g, cnt) in &c {
                matched += (*cnt).min(r.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_p += (matched as f64 / total as f64).ln() / n as f64;
    }
    let c_len: usize = corpus.items.iter().map(|it| it.candidate.len()).sum();
    let r_len: usize = corpus.items.iter().map(|it| it.reference.len()).sum();
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight of the ROUGE-L F-measure, as in the common caption
/// evaluation toolkit.
pub const ROUGE_BETA: f64 = 1.2;

fn rouge_l_pair(c: &[String], r: &[String]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean per-item ROUGE-L F-measure.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64, GvqgError> {
    corpus.nonempty()?;
    Ok(corpus
        .items
        .iter()
        .map(|it| rouge_l_pair(&it.candidate, &it.reference))
        .sum::<f64>()
        / corpus.len() as f64)
}

/// CIDEr before the ×10 scaling: TF-IDF n-gram cosine similarity averaged
/// over n = 1..4 and over items. Document frequencies come from the
/// references; no Gaussian length penalty and no count clipping.
pub fn cider_unscaled(corpus: &EvalCorpus) -> Result<f64, GvqgError> {
    if corpus.len() < 2 {
        return Err(GvqgError::InvalidInput("CIDEr needs at least 2 items".into()));
    }
    let log_n = (corpus.len() as f64).ln();
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for it in &corpus.items {
            for g in ngram_counts(&it.reference, n).into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vec = |toks: &[String]| -> BTreeMap<Vec<String>, f64> {
            ngram_counts(toks, n)
                .into_iter()
                .map(|(g, tf)| {
                    let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g.to_vec(), tf as f64 * (log_n - d.ln()))
                })
                .collect()
        };
        for it in &corpus.items {
            let (vc, vr) = (vec(&it.candidate), vec(&it.reference));
            let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc > 0.0 && nr > 0.0 {
                let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                total += dot / (nc * nr);
            }
        }
    }
    Ok(total / (4.0 * corpus.len() as f64))
}

/// CIDEr with the conventional ×10 scaling.
pub fn cider(corpus: &EvalCorpus) -> Result<f64, GvqgError> {
    Ok(10.0 * cider_unscaled(corpus)?)
}

/// Exact-match unigram alignment: each candidate word takes the reference
/// position right after the previous match when it fits, otherwise the
/// first unused matching position. Returns `(matches, chunks)`.
pub fn unigram_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    let mut used = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<usize> = None;
    for (i, w) in c.iter().enumerate() {
        let next = last.map(|j| j + 1).filter(|&j| j < r.len() && !used[j] && &r[j] == w);
        let pick = next.or_else(|| (0..r.len()).find(|&j| !used[j] && &r[j] == w));
        if let Some(j) = pick {
            used[j] = true;
            pairs.push((i, j));
            last = Some(j);
        }
    }
    let mut chunks = 0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if k == 0 || !(pairs[k - 1].0 + 1 == i && pairs[k - 1].1 + 1 == j) {
            chunks += 1;
        }
    }
    (pairs.len(), chunks)
}

/// Per-item METEOR without stemming or synonym modules:
/// `Fmean · (1 − 0.5·(chunks/matches)^3)` with `Fmean = 10PR / (R + 9P)`.
pub fn meteor_lite_pair(c: &[String], r: &[String]) -> f64 {
    let (m, chunks) = unigram_alignment(c, r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Mean per-item [`meteor_lite_pair`].
pub fn meteor_lite(corpus: &EvalCorpus) -> Result<f64, GvqgError> {
    corpus.nonempty()?;
    Ok(corpus
        .items
        .iter()
        .map(|it| meteor_lite_pair(&it.candidate, &it.reference))
        .sum::<f64>()
        / corpus.len() as f64)
}

fn ngram_distribution(corpus: &[Vec<String>], n: usize) -> BTreeMap<&[String], f64> {
    let mut counts: BTreeMap<&[String], f64> = BTreeMap::new();
    let mut total = 0.0;
    for s in corpus {
        if s.len() >= n {
            for w in s.windows(n) {
                *counts.entry(w).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
    }
    for v in counts.values_mut() {
        *v /= total;
    }
    counts
}

/// Jaccard overlap of the normalized order-`n` n-gram frequency vectors of
/// two corpora: `Σ min(p, q) / Σ max(p, q)`.
pub fn ngram_jaccard(a: &[Vec<String>], b: &[Vec<String>], n: usize) -> f64 {
    let (p, q) = (ngram_distribution(a, n), ngram_distribution(b, n));
    if p.is_empty() && q.is_empty() {
        return 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (g, &pv) in &p {
        let qv = q.get(g).copied().unwrap_or(0.0);
        num += pv.min(qv);
        den += pv.max(qv);
    }
    for (g, &qv) in &q {
        if !p.contains_key(g) {
            den += qv;
        }
    }
    num / den
}

/// Multi-set Jaccard: geometric mean of [`ngram_jaccard`] for orders
/// `1..=max_n`.
pub fn msj(generated: &[Vec<String>], reference: &[Vec<String>], max_n: usize) -> Result<f64, GvqgError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(GvqgError::EmptyCorpus);
    }
    if max_n == 0 {
        return Err(GvqgError::InvalidInput("max_n must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let j = ngram_jaccard(generated, reference, n);
        if j == 0.0 {
            return Ok(0.0);
        }
        log_sum += j.ln();
    }
    Ok((log_sum / max_n as f64).exp())
}

/// Mean over items of `|pred ∩ gold| / k`.
pub fn overlap_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> Result<f64, GvqgError> {
    if pred.is_empty() {
        return Err(GvqgError::EmptyCorpus);
    }
    if pred.len() != gold.len() || k == 0 {
        return Err(GvqgError::InvalidInput("prediction/gold length mismatch or k = 0".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let mut p = p.clone();
            p.sort_unstable();
            p.dedup();
            p.iter().filter(|x| g.contains(x)).count() as f64 / k as f64
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// All metrics of one evaluation. Everything except `cider` lies in [0, 1];
/// `cider` carries the ×10 scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: f64,
    pub msj_3: f64,
    pub msj_4: f64,
    pub msj_5: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn compute(corpus: &EvalCorpus, overlap_accuracy: Option<f64>) -> Result<Self, GvqgError> {
        corpus.nonempty()?;
        let gen: Vec<Vec<String>> = corpus.items.iter().map(|it| it.candidate.clone()).collect();
        let refs: Vec<Vec<String>> = corpus.items.iter().map(|it| it.reference.clone()).collect();
        let cider = if corpus.len() >= 2 { cider(corpus)? } else { 0.0 };
        let report = Self {
            items: corpus.len(),
            bleu_1: bleu(corpus, 1)?,
            bleu_2: bleu(corpus, 2)?,
            bleu_3: bleu(corpus, 3)?,
            bleu_4: bleu(corpus, 4)?,
            rouge_l: rouge_l(corpus)?,
            cider,
            meteor: meteor_lite(corpus)?,
            msj_3: msj(&gen, &refs, 3)?,
            msj_4: msj(&gen, &refs, 4)?,
            msj_5: msj(&gen, &refs, 5)?,
            overlap_accuracy,
        };
        debug_assert!(report.all_finite());
        Ok(report)
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    /// `(name, value)` pairs in display order; overlap only when present.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("bleu_1", self.bleu_1),
            ("bleu_2", self.bleu_2),
            ("bleu_3", self.bleu_3),
            ("bleu_4", self.bleu_4),
            ("rouge_l", self.rouge_l),
            ("cider", self.cider),
            ("meteor", self.meteor),
            ("msj_3", self.msj_3),
            ("msj_4", self.msj_4),
            ("msj_5", self.msj_5),
        ];
        if let Some(o) = self.overlap_accuracy {
            v.push(("overlap_accuracy", o));
        }
        v
    }

    /// Plain `key = value` text, each value ×100.
    pub fn to_text(&self) -> String {
        let mut s = format!("items = {}\n", self.items);
        for (k, v) in self.fields() {
            s.push_str(&format!("{k} = {:.2}\n", v * 100.0));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_and_disjoint() {
        let same = EvalCorpus::from_pairs("s", &[("a b c d e", "a b c d e"), ("f g h i", "f g h i"), ("j k l m n", "j k l m n")]);
        assert_eq!(bleu(&same, 4).unwrap(), 1.0);
        assert_eq!(rouge_l(&same).unwrap(), 1.0);
        assert!((cider_unscaled(&same).unwrap() - 1.0).abs() < 1e-12);
        let gen: Vec<_> = same.items.iter().map(|i| i.candidate.clone()).collect();
        assert_eq!(msj(&gen, &gen, 5).unwrap(), 1.0);
        let dis = EvalCorpus::from_pairs("d", &[("a b", "x y"), ("c d", "z w")]);
        assert_eq!(bleu(&dis, 1).unwrap(), 0.0);
        assert_eq!(rouge_l(&dis).unwrap(), 0.0);
        assert_eq!(cider(&dis).unwrap(), 0.0);
        assert_eq!(meteor_lite(&dis).unwrap(), 0.0);
        let (a, b): (Vec<_>, Vec<_>) = dis.items.iter().map(|i| (i.candidate.clone(), i.reference.clone())).unzip();
        assert_eq!(msj(&a, &b, 3).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_errors() {
        let e = EvalCorpus::new("e");
        assert!(bleu(&e, 4).is_err());
        assert!(rouge_l(&e).is_err());
        assert!(meteor_lite(&e).is_err());
        assert!(cider(&EvalCorpus::from_pairs("one", &[("a", "a")])).is_err());
        assert!(msj(&[], &[t("a")], 3).is_err());
        assert!(bleu(&EvalCorpus::from_pairs("x", &[("a", "a")]), 5).is_err());
    }

    #[test]
    fn lcs_matches_brute_force() {
        // exhaustive subsequence enumeration of the shorter sequence
        fn brute(a: &[String], b: &[String]) -> usize {
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
                let mut j = 0;
                for x in b {
                    if j < sub.len() && sub[j] == x {
                        j += 1;
                    }
                }
                if j == sub.len() {
                    best = best.max(sub.len());
                }
            }
            best
        }
        let cases = [("a c d", "a b c d"), ("d c b a", "a b c d"), ("a b a b", "b a b a"), ("x", "a b")];
        for (a, b) in cases {
            assert_eq!(lcs_len(&t(a), &t(b)), brute(&t(a), &t(b)), "{a} / {b}");
        }
        assert_eq!(lcs_len(&t("a b c d"), &t("a c d")), 3);
    }

    #[test]
    fn meteor_closed_forms() {
        // one word matching exactly: P = R = 1, one chunk, one match
        let single = meteor_lite_pair(&t("dog"), &t("dog"));
        assert!((single - 0.5).abs() < 1e-12);
        // identical 4-word sentence: penalty 0.5 * (1/4)^3
        let same = meteor_lite_pair(&t("a b c d"), &t("a b c d"));
        assert!((same - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        // "a b" vs "b a": 2 matches, 2 chunks
        let swapped = meteor_lite_pair(&t("a b"), &t("b a"));
        assert!((swapped - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overlap_accuracy_cases() {
        assert_eq!(overlap_accuracy(&[vec![0, 1]], &[vec![1, 0]], 2).unwrap(), 1.0);
        assert_eq!(overlap_accuracy(&[vec![2, 3]], &[vec![0, 1]], 2).unwrap(), 0.0);
        assert_eq!(overlap_accuracy(&[vec![1], vec![0, 5]], &[vec![1, 2], vec![5, 6]], 2).unwrap(), 0.5);
    }

    #[test]
    fn report_text_scales_by_100() {
        let c = EvalCorpus::from_pairs("c", &[("a b c d", "a b c d"), ("e f g h", "e f g h")]);
        let r = EvalReport::compute(&c, Some(0.5)).unwrap();
        let text = r.to_text();
        assert!(text.contains("bleu_4 = 100.00"));
        assert!(text.contains("overlap_accuracy = 50.00"));
    }

    fn toy() -> EvalCorpus {
        EvalCorpus::from_pairs(
            "toy",
            &[
                ("the cat sat on the mat", "the cat is on the mat"),
                ("a dog runs in the park", "a dog runs in a park"),
                ("red ball", "blue ball"),
            ],
        )
    }

    #[test]
    fn toy_corpus_bleu_by_hand() {
        // clipped matches / candidate n-grams per order, summed over items:
        // 1-grams 5+5+1 / 6+6+2, 2-grams 3+3+0 / 5+5+1,
        // 3-grams 1+2+0 / 4+4+0, 4-grams 0+1+0 / 3+3+0; lengths 14 vs 14
        let p = [11.0 / 14.0, 6.0 / 11.0, 3.0 / 8.0, 1.0 / 6.0];
        for n in 1..=4 {
            let expected = (p[..n].iter().map(|x: &f64| x.ln()).sum::<f64>() / n as f64).exp();
            assert!((bleu(&toy(), n).unwrap() - expected).abs() < 1e-6, "BLEU-{n}");
        }
        assert!((bleu(&toy(), 4).unwrap() - 0.404_553_355_785).abs() < 1e-6);
    }

    #[test]
    fn toy_corpus_rouge_meteor_cider_msj() {
        // LCS 5, 5, 1 with P = R per item, so F = 5/6, 5/6, 1/2
        assert!((rouge_l(&toy()).unwrap() - 13.0 / 18.0).abs() < 1e-6);
        // 5 matches in 2 chunks, 5 in 2, 1 in 1
        let m = |matches: f64, chunks: f64, len: f64| (matches / len) * (1.0 - 0.5 * (chunks / matches).powi(3));
        let expected = (2.0 * m(5.0, 2.0, 6.0) + m(1.0, 1.0, 2.0)) / 3.0;
        assert!((meteor_lite(&toy()).unwrap() - expected).abs() < 1e-6);
        assert!((cider_unscaled(&toy()).unwrap() - 0.377_029_894_760).abs() < 1e-6);
        let gen: Vec<_> = toy().items.iter().map(|i| i.candidate.clone()).collect();
        let refs: Vec<_> = toy().items.iter().map(|i| i.reference.clone()).collect();
        // unigram distributions over 14 tokens each: Σmin = 11/14, Σmax = 17/14
        assert!((ngram_jaccard(&gen, &refs, 1) - 11.0 / 17.0).abs() < 1e-12);
        // bigrams over 11 each: 6 shared, 5 + 5 unshared
        assert!((ngram_jaccard(&gen, &refs, 2) - 6.0 / 16.0).abs() < 1e-12);
        let msj3 = ((11.0f64 / 17.0) * (6.0 / 16.0) * (3.0 / 13.0)).cbrt();
        assert!((msj(&gen, &refs, 3).unwrap() - msj3).abs() < 1e-6);
        assert_eq!(msj(&gen, &refs, 5).unwrap(), 0.0);
        assert_eq!(msj(&gen, &refs, 4).unwrap(), msj(&refs, &gen, 4).unwrap());
    }

    #[test]
    fn cider_downweights_ubiquitous_ngrams() {
        // "what is" occurs in every reference, so its IDF is ln(3/3) = 0
        let c = EvalCorpus::from_pairs(
            "idf",
            &[("what is", "what is red"), ("what is", "what is blue"), ("what is", "what is green")],
        );
        assert!(cider(&c).unwrap().abs() < 1e-12);
        let mut shuffled = toy();
        shuffled.items.reverse();
        assert!((cider(&shuffled).unwrap() - cider(&toy()).unwrap()).abs() < 1e-12);
    }
}
