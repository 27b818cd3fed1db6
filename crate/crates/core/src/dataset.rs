//! Meme records, line-delimited ingestion, and confounder discovery.
//!
//! A *text confounder* link joins two records with the same normalized text,
//! different images, and opposite labels. An *image confounder* link joins two
//! records with the same image, different normalized text, and opposite labels.
//! Groups are the connected components of the link graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: label {label} outside {{0,1}}")]
    BadLabel { line: usize, label: i64 },
    #[error("record {id:?} is unlabeled; confounder detection needs labels")]
    Unlabeled { id: String },
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// Binary gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NotHateful,
    Hateful,
}

impl Label {
    pub fn from_int(v: i64) -> Option<Label> {
        match v {
            0 => Some(Label::NotHateful),
            1 => Some(Label::Hateful),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::NotHateful => 0,
            Label::Hateful => 1,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::NotHateful => Label::Hateful,
            Label::Hateful => Label::NotHateful,
        }
    }
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemeRecord {
    pub id: String,
    pub image_ref: String,
    pub text: String,
    pub label: Option<Label>,
}

impl MemeRecord {
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        text: impl Into<String>,
        label: Option<Label>,
    ) -> Result<Self, DatasetError> {
        let rec = MemeRecord {
            id: id.into(),
            image_ref: image_ref.into(),
            text: text.into(),
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.id.is_empty() {
            return Err(DatasetError::InvalidRecord {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if self.text.is_empty() && self.image_ref.is_empty() {
            return Err(DatasetError::InvalidRecord {
                id: self.id.clone(),
                reason: "both text and image are empty".into(),
            });
        }
        Ok(())
    }

    pub fn normalized_text(&self) -> String {
        normalize_text(&self.text)
    }
}

/// On-disk layout of one line: `{"id": .., "img": .., "text": .., "label": 0|1}`.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    img: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
}

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Ordered records with an id index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<MemeRecord>,
    id_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn from_records(records: Vec<MemeRecord>) -> Result<Self, DatasetError> {
        let mut id_index = HashMap::with_capacity(records.len());
        for (pos, rec) in records.iter().enumerate() {
            rec.validate()?;
            if let Some(prev) = id_index.insert(rec.id.clone(), pos) {
                return Err(DatasetError::DuplicateId {
                    id: rec.id.clone(),
                    first: prev + 1,
                    second: pos + 1,
                });
            }
        }
        Ok(Dataset { records, id_index })
    }

    pub fn records(&self) -> &[MemeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MemeRecord> {
        self.id_index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    /// Counts of (hateful, not hateful, unlabeled).
    pub fn label_histogram(&self) -> (usize, usize, usize) {
        self.records
            .iter()
            .fold((0, 0, 0), |(h, n, u), r| match r.label {
                Some(Label::Hateful) => (h + 1, n, u),
                Some(Label::NotHateful) => (h, n + 1, u),
                None => (h, n, u + 1),
            })
    }

    /// Concatenates two datasets; ids must stay unique.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DatasetError> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Dataset::from_records(records)
    }

    /// Parses line-delimited records. Blank lines are skipped; line numbers
    /// in errors are 1-based physical lines.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| DatasetError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let label = match raw.label {
                None => None,
                Some(v) => Some(
                    Label::from_int(v).ok_or(DatasetError::BadLabel { line: line_no, label: v })?,
                ),
            };
            if let Some(&first) = seen.get(&raw.id) {
                return Err(DatasetError::DuplicateId {
                    id: raw.id,
                    first,
                    second: line_no,
                });
            }
            let rec = MemeRecord {
                id: raw.id,
                image_ref: raw.img,
                text: raw.text,
                label,
            };
            rec.validate().map_err(|e| DatasetError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
            seen.insert(rec.id.clone(), line_no);
            records.push(rec);
        }
        Dataset::from_records(records)
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.records {
            let raw = RawRecord {
                id: rec.id.clone(),
                img: rec.image_ref.clone(),
                text: rec.text.clone(),
                label: rec.label.map(|l| l.as_u8() as i64),
            };
            serde_json::to_writer(&mut w, &raw)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        self.to_writer(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// Reads a line-delimited dataset file.
pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Dataset::from_reader(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfounderKind {
    TextConfounder,
    ImageConfounder,
}

/// An undirected link; `a_id < b_id` lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfounderLink {
    pub a_id: String,
    pub b_id: String,
    pub kind: ConfounderKind,
}

impl ConfounderLink {
    pub fn new(x: &str, y: &str, kind: ConfounderKind) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        ConfounderLink {
            a_id: a.to_owned(),
            b_id: b.to_owned(),
            kind,
        }
    }
}

/// Confounder links plus their connected components.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfounderGraph {
    links: BTreeSet<ConfounderLink>,
    /// Each group sorted; groups sorted by first member.
    groups: Vec<Vec<String>>,
    #[serde(skip)]
    group_of: HashMap<String, usize>,
}

impl ConfounderGraph {
    pub fn from_links(links: impl IntoIterator<Item = ConfounderLink>) -> Self {
        let links: BTreeSet<ConfounderLink> = links.into_iter().collect();
        let groups = connected_components(&links);
        let group_of = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| g.iter().map(move |id| (id.clone(), gi)))
            .collect();
        ConfounderGraph {
            links,
            groups,
            group_of,
        }
    }

    pub fn links(&self) -> &BTreeSet<ConfounderLink> {
        &self.links
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    /// Index into [`groups`](Self::groups) of the component containing `id`.
    pub fn group_index(&self, id: &str) -> Option<usize> {
        self.group_of.get(id).copied()
    }

    /// Ids that appear in at least one text-confounder link.
    pub fn text_confounder_ids(&self) -> BTreeSet<&str> {
        self.links
            .iter()
            .filter(|l| l.kind == ConfounderKind::TextConfounder)
            .flat_map(|l| [l.a_id.as_str(), l.b_id.as_str()])
            .collect()
    }

    /// Direct text-confounder neighbours of every linked id, each list sorted.
    pub fn text_neighbours(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for l in self
            .links
            .iter()
            .filter(|l| l.kind == ConfounderKind::TextConfounder)
        {
            out.entry(&l.a_id).or_default().push(&l.b_id);
            out.entry(&l.b_id).or_default().push(&l.a_id);
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        #[derive(Deserialize)]
        struct Wire {
            links: Vec<ConfounderLink>,
        }
        let wire: Wire = serde_json::from_str(s)?;
        Ok(ConfounderGraph::from_links(wire.links))
    }
}

fn connected_components(links: &BTreeSet<ConfounderLink>) -> Vec<Vec<String>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for l in links {
        let next = index.len();
        index.entry(&l.a_id).or_insert(next);
        let next = index.len();
        index.entry(&l.b_id).or_insert(next);
    }
    let mut uf = UnionFind::new(index.len());
    for l in links {
        uf.union(index[l.a_id.as_str()], index[l.b_id.as_str()]);
    }
    let mut comps: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, &i) in &index {
        comps.entry(uf.find(i)).or_default().push((*id).to_owned());
    }
    let mut groups: Vec<Vec<String>> = comps.into_values().collect();
    // members were visited in sorted order, so each group is already sorted
    groups.sort();
    groups
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Builds the confounder graph of a fully labeled dataset.
///
/// Records are bucketed by normalized text and by image so only candidate
/// pairs inside a bucket are compared.
pub fn detect_confounders(ds: &Dataset) -> Result<ConfounderGraph, DatasetError> {
    let mut labelled = Vec::with_capacity(ds.len());
    for rec in ds.records() {
        let label = rec.label.ok_or_else(|| DatasetError::Unlabeled { id: rec.id.clone() })?;
        labelled.push((rec, rec.normalized_text(), label));
    }

    let mut by_text: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, (rec, norm, _)) in labelled.iter().enumerate() {
        by_text.entry(norm.as_str()).or_default().push(i);
        by_image.entry(rec.image_ref.as_str()).or_default().push(i);
    }

    let mut links = Vec::new();
    for bucket in by_text.values() {
        for (x, &i) in bucket.iter().enumerate() {
            for &j in &bucket[x + 1..] {
                let (ri, _, li) = &labelled[i];
                let (rj, _, lj) = &labelled[j];
                if li != lj && ri.image_ref != rj.image_ref {
                    links.push(ConfounderLink::new(&ri.id, &rj.id, ConfounderKind::TextConfounder));
                }
            }
        }
    }
    for bucket in by_image.values() {
        for (x, &i) in bucket.iter().enumerate() {
            for &j in &bucket[x + 1..] {
                let (ri, ti, li) = &labelled[i];
                let (rj, tj, lj) = &labelled[j];
                if li != lj && ti != tj {
                    links.push(ConfounderLink::new(&ri.id, &rj.id, ConfounderKind::ImageConfounder));
                }
            }
        }
    }
    Ok(ConfounderGraph::from_links(links))
}
