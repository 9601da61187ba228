use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Default 20-class arsenicosis taxonomy with the curated per-class image counts.
const DEFAULT_CLASSES: [(&str, usize); 20] = [
    ("Arsenic", 819),
    ("Actinic Keratosis", 951),
    ("Basal Cell Carcinoma", 1599),
    ("Squamous Cell Carcinoma", 730),
    ("Melanoma", 343),
    ("Nevus", 244),
    ("Seborrheic Keratosis", 321),
    ("Acne Vulgaris", 393),
    ("Seborrheic Dermatitis", 181),
    ("Vitiligo", 205),
    ("Chickenpox", 482),
    ("Cowpox", 330),
    ("Hand Foot and Mouth Disease", 805),
    ("Measles", 366),
    ("Monkeypox", 1699),
    ("Tinea Corporis", 176),
    ("Scabies", 314),
    ("Lichen Planus", 474),
    ("Pityriasis Versicolor", 148),
    ("Normal", 1409),
];

/// Ordered list of class names. The position of a class is its label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected_counts: Option<Vec<usize>>,
}

impl ClassTaxonomy {
    pub fn new<I, S>(classes: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(DatasetError::TooFewClasses(classes.len()));
        }
        let mut seen = HashSet::new();
        for name in &classes {
            if name.trim().is_empty() {
                return Err(DatasetError::InvalidTaxonomy("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::InvalidTaxonomy(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        Ok(Self {
            classes,
            expected_counts: None,
        })
    }

    pub fn with_expected_counts(mut self, counts: Vec<usize>) -> Result<Self, DatasetError> {
        if counts.len() != self.classes.len() {
            return Err(DatasetError::InvalidTaxonomy(format!(
                "{} expected counts for {} classes",
                counts.len(),
                self.classes.len()
            )));
        }
        self.expected_counts = Some(counts);
        Ok(self)
    }

    /// The 20 arsenicosis / dermatology classes, with their curated image counts.
    pub fn arsenicosis_default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|(n, _)| n.to_string()).collect(),
            expected_counts: Some(DEFAULT_CLASSES.iter().map(|(_, c)| *c).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn expected_counts(&self) -> Option<&[usize]> {
        self.expected_counts.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.classes.get(index).map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}
