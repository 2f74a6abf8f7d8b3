//! Fixed object ontology, colors and the answer-category taxonomy.

use serde::{Deserialize, Serialize};

use crate::GvqgError;

/// Static facts about one object type.
#[derive(Clone, Copy, Debug)]
pub struct LabelInfo {
    pub label: &'static str,
    pub plural: &'static str,
    pub animate: bool,
    /// Answer to "what is the X made of ?" for inanimate labels.
    pub material: &'static str,
    /// Relative chance of being the subject of a question.
    pub salience: f64,
}

const fn animal(label: &'static str, plural: &'static str, salience: f64) -> LabelInfo {
    LabelInfo {
        label,
        plural,
        animate: true,
        material: "",
        salience,
    }
}

const fn thing(
    label: &'static str,
    plural: &'static str,
    material: &'static str,
    salience: f64,
) -> LabelInfo {
    LabelInfo {
        label,
        plural,
        animate: false,
        material,
        salience,
    }
}

pub const ONTOLOGY: &[LabelInfo] = &[
    animal("dog", "dogs", 8.0),
    animal("cat", "cats", 6.0),
    animal("horse", "horses", 4.0),
    animal("cow", "cows", 1.0),
    animal("sheep", "sheep", 0.5),
    animal("bird", "birds", 2.0),
    animal("person", "people", 8.0),
    animal("bear", "bears", 3.0),
    animal("elephant", "elephants", 6.0),
    animal("giraffe", "giraffes", 2.0),
    animal("zebra", "zebras", 1.0),
    animal("duck", "ducks", 0.5),
    thing("frisbee", "frisbees", "plastic", 6.0),
    thing("ball", "balls", "rubber", 4.0),
    thing("tree", "trees", "wood", 0.5),
    thing("car", "cars", "metal", 6.0),
    thing("bus", "buses", "metal", 3.0),
    thing("bike", "bikes", "metal", 2.0),
    thing("boat", "boats", "wood", 2.0),
    thing("kite", "kites", "paper", 4.0),
    thing("umbrella", "umbrellas", "fabric", 1.0),
    thing("chair", "chairs", "wood", 0.5),
    thing("table", "tables", "wood", 0.5),
    thing("bench", "benches", "wood", 0.5),
    thing("bottle", "bottles", "glass", 1.0),
    thing("cup", "cups", "glass", 1.0),
    thing("book", "books", "paper", 1.0),
    thing("clock", "clocks", "metal", 3.0),
    thing("lamp", "lamps", "metal", 0.5),
    thing("sign", "signs", "metal", 1.0),
    thing("fence", "fences", "wood", 0.5),
    thing("house", "houses", "stone", 0.5),
    thing("plate", "plates", "glass", 0.5),
    thing("pizza", "pizzas", "dough", 6.0),
    thing("cake", "cakes", "dough", 4.0),
    thing("apple", "apples", "fruit", 1.0),
    thing("banana", "bananas", "fruit", 1.0),
    thing("phone", "phones", "plastic", 3.0),
    thing("laptop", "laptops", "plastic", 3.0),
    thing("grass", "grass", "plant", 0.5),
];

pub const COLORS: &[&str] = &[
    "red", "blue", "green", "yellow", "white", "black", "brown", "orange",
];

pub const ACTIVITIES: &[&str] = &["running", "sitting", "eating", "sleeping", "standing", "playing"];

pub const LOCATIONS: &[&str] = &["left", "middle", "right"];

pub const SIZES: &[&str] = &["big", "small"];

pub const COUNT_WORDS: &[&str] = &["1", "2", "3", "4"];

pub const YES_NO: &[&str] = &["yes", "no"];

pub fn label_info(label: &str) -> Option<&'static LabelInfo> {
    ONTOLOGY.iter().find(|l| l.label == label)
}

pub fn label_index(label: &str) -> Option<usize> {
    ONTOLOGY.iter().position(|l| l.label == label)
}

/// Deterministic activity of an animate object.
pub fn activity_of(label: &str, color: &str) -> &'static str {
    let h = fnv1a(label.as_bytes()) ^ fnv1a(color.as_bytes()).rotate_left(17);
    ACTIVITIES[(h % ACTIVITIES.len() as u64) as usize]
}

/// 64-bit FNV-1a hash, used for all string-keyed seeding.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub const DEFAULT_CATEGORIES: &[&str] = &[
    "count",
    "color",
    "object",
    "attribute",
    "location",
    "binary",
    "activity",
    "other",
];

/// Ordered answer-category names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTaxonomy {
    names: Vec<String>,
}

impl Default for CategoryTaxonomy {
    fn default() -> Self {
        Self {
            names: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryTaxonomy {
    pub const MAX: usize = 16;

    pub fn new(names: Vec<String>) -> Result<Self, GvqgError> {
        let t = Self { names };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), GvqgError> {
        if self.names.is_empty() || self.names.len() > Self::MAX {
            return Err(GvqgError::config(
                "categories",
                format!("expected 1..={} categories, got {}", Self::MAX, self.names.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.names {
            if !seen.insert(n.as_str()) {
                return Err(GvqgError::config("categories", format!("duplicate category {n}")));
            }
        }
        if !seen.contains("other") {
            return Err(GvqgError::config("categories", "\"other\" must be present"));
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index(name).is_some()
    }
}
