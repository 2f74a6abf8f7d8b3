//! Closed token vocabulary of the scene world.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::world::ontology::{
    ACTIVITIES, COLORS, COUNT_WORDS, LOCATIONS, ONTOLOGY, SIZES, YES_NO,
};
use crate::world::{CategoryTaxonomy, Template};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Every token the world can produce, in a fixed order, plus the
    /// category names of `taxonomy`.
    pub fn standard(taxonomy: &CategoryTaxonomy) -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        let mut push = |t: &str| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        };
        for l in ONTOLOGY {
            push(l.label);
            push(l.plural);
            if !l.material.is_empty() {
                push(l.material);
            }
        }
        for group in [COLORS, ACTIVITIES, LOCATIONS, SIZES, COUNT_WORDS, YES_NO] {
            for w in group {
                push(w);
            }
        }
        for w in Template::surface_words() {
            push(w);
        }
        for w in ["scene", "with", "and"] {
            push(w);
        }
        for c in taxonomy.names() {
            push(c);
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(self.unk())
    }

    pub fn get(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    /// Decodes ids, stopping at the first EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .filter(|&&i| i != self.bos() && i != self.pad())
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }
}

/// Joins tokens into a display string, attaching `?` to the previous word.
pub fn detokenize(toks: &[String]) -> String {
    let mut out = String::new();
    for t in toks {
        if !out.is_empty() && t != "?" {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}
