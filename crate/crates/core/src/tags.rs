//! Object-detector class filtering and text augmentation.
//!
//! The bundled allowlist is a plain-text resource, one class per line, kept
//! verbatim with its source table. Its 97 lines list "Ugandan" twice, so the
//! loaded allowlist holds 96 distinct classes.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize_text, MemeRecord};

/// Raw bundled resource.
pub const BUNDLED_ALLOWLIST: &str = include_str!("../resources/allowlist.txt");

pub const TAG_SEPARATOR: &str = "[TAGS]";

#[derive(Debug, Error, PartialEq)]
pub enum TagError {
    #[error("allowlist is empty")]
    EmptyAllowlist,
    #[error("tags belong to {tags:?} but the record is {record:?}")]
    IdMismatch { record: String, tags: String },
    #[error("tag {0:?} is not in the allowlist")]
    NotAllowed(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagAllowlist {
    classes: Vec<String>,
    by_key: HashMap<String, usize>,
    source_lines: usize,
}

impl TagAllowlist {
    /// Parses one class per line. Blank lines are ignored; later duplicates
    /// (after normalization) are dropped.
    pub fn from_text(text: &str) -> Result<Self, TagError> {
        let mut classes = Vec::new();
        let mut by_key = HashMap::new();
        let mut source_lines = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            source_lines += 1;
            let key = normalize_text(line);
            if let std::collections::hash_map::Entry::Vacant(slot) = by_key.entry(key) {
                slot.insert(classes.len());
                classes.push(line.to_owned());
            }
        }
        if classes.is_empty() {
            return Err(TagError::EmptyAllowlist);
        }
        Ok(TagAllowlist {
            classes,
            by_key,
            source_lines,
        })
    }

    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_ALLOWLIST).expect("bundled allowlist parses")
    }

    /// Distinct classes in first-seen order.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Non-blank lines in the source, duplicates included.
    pub fn source_lines(&self) -> usize {
        self.source_lines
    }

    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.by_key.get(&normalize_text(name)).map(|&i| self.classes[i].as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.canonical(name).is_some()
    }
}

/// Keeps allowlisted names in first-occurrence order, deduplicated, spelled
/// as in the allowlist.
pub fn filter_tags<S: AsRef<str>>(predicted: &[S], allow: &TagAllowlist) -> Vec<String> {
    let mut seen = BTreeSet::new();
    predicted
        .iter()
        .filter_map(|p| allow.canonical(p.as_ref()))
        .filter(|c| seen.insert(*c))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedMeme {
    pub id: String,
    pub tags: Vec<String>,
}

impl TaggedMeme {
    /// Filters raw detector output for one record.
    pub fn from_predictions<S: AsRef<str>>(id: impl Into<String>, predicted: &[S], allow: &TagAllowlist) -> Self {
        TaggedMeme {
            id: id.into(),
            tags: filter_tags(predicted, allow),
        }
    }
}

/// `text [TAGS] tag1 tag2 ...`; the text comes back unchanged when there are no tags.
pub fn augment_text(rec: &MemeRecord, tags: &TaggedMeme) -> Result<String, TagError> {
    if rec.id != tags.id {
        return Err(TagError::IdMismatch {
            record: rec.id.clone(),
            tags: tags.id.clone(),
        });
    }
    if tags.tags.is_empty() {
        return Ok(rec.text.clone());
    }
    let joined = tags.tags.join(" ");
    if rec.text.trim().is_empty() {
        Ok(format!("{TAG_SEPARATOR} {joined}"))
    } else {
        Ok(format!("{} {TAG_SEPARATOR} {joined}", rec.text))
    }
}

/// Line-delimited detector output: `{"id": "...", "classes": ["...", ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagPrediction {
    pub id: String,
    pub classes: Vec<String>,
}

pub fn parse_tag_predictions(text: &str) -> Result<Vec<TagPrediction>, TagError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TagError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    #[test]
    fn bundled_resource_shape() {
        let allow = TagAllowlist::bundled();
        assert_eq!(BUNDLED_ALLOWLIST.lines().count(), 97);
        assert_eq!(allow.source_lines(), 97);
        assert_eq!(allow.classes().len(), 96);
        for name in ["rabbi", "hijab", "revolver", "niqab", "Nigerian", "Muslimah", "amputee", "Yugoslav"] {
            assert!(allow.contains(name), "{name}");
        }
        assert!(!allow.contains("dog"));
        assert!(!allow.contains("car"));
    }

    #[test]
    fn filter_examples() {
        let allow = TagAllowlist::bundled();
        assert_eq!(filter_tags(&["dog", "rabbi", "car", "rabbi"], &allow), vec!["rabbi"]);
        assert!(filter_tags::<&str>(&[], &allow).is_empty());
        assert_eq!(filter_tags(&["hijab", "revolver", "niqab"], &allow), vec!["hijab", "revolver", "niqab"]);
        assert_eq!(filter_tags(&["  NIGERIAN ", "military   soldier"], &allow), vec!["Nigerian", "military soldier"]);
    }

    #[test]
    fn augment_examples() {
        let rec = MemeRecord::new("1", "1.png", "hello", Some(Label::Hateful)).unwrap();
        let none = TaggedMeme { id: "1".into(), tags: vec![] };
        assert_eq!(augment_text(&rec, &none).unwrap(), "hello");
        let one = TaggedMeme { id: "1".into(), tags: vec!["rabbi".into()] };
        assert_eq!(augment_text(&rec, &one).unwrap(), "hello [TAGS] rabbi");
        let blank = MemeRecord::new("2", "2.png", "", None).unwrap();
        let two = TaggedMeme { id: "2".into(), tags: vec!["beard".into(), "monk".into()] };
        assert_eq!(augment_text(&blank, &two).unwrap(), "[TAGS] beard monk");
        assert!(matches!(augment_text(&rec, &two), Err(TagError::IdMismatch { .. })));
    }

    #[test]
    fn parse_predictions() {
        let src = "{\"id\":\"1\",\"classes\":[\"rabbi\",\"dog\"]}\n\n{\"id\":\"2\",\"classes\":[]}\n";
        let p = parse_tag_predictions(src).unwrap();
        assert_eq!(p.len(), 2);
        assert!(matches!(parse_tag_predictions("nope"), Err(TagError::Malformed { line: 1, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filtering_is_idempotent_and_closed(picks in prop::collection::vec(0usize..130, 0..30)) {
                let allow = TagAllowlist::bundled();
                let pool: Vec<String> = allow.classes().iter().cloned()
                    .chain((0..34).map(|i| format!("noise{i}")))
                    .collect();
                let predicted: Vec<&str> = picks.iter().map(|&i| pool[i].as_str()).collect();
                let once = filter_tags(&predicted, &allow);
                prop_assert_eq!(filter_tags(&once, &allow), once.clone());
                prop_assert!(once.iter().all(|t| allow.classes().contains(t)));
            }
        }
    }
}
