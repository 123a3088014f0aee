//! Checkpoint records, immutable repository snapshots and their JSONL
//! persistence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::text::{fnv1a64, terms, words};

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    /// Canonical trigger first.
    pub triggers: Vec<String>,
    pub subjects: Vec<String>,
    pub styles: Vec<String>,
    pub description: String,
    pub created_at: DateTime<Utc>,
    pub version: u32,
    pub embedding: Vector,
    pub weight_bytes: u64,
}

/// One JSONL line; the embedding may be omitted and is then computed from
/// the description.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    triggers: Vec<String>,
    #[serde(default)]
    subjects: Vec<String>,
    #[serde(default)]
    styles: Vec<String>,
    #[serde(default)]
    description: String,
    created_at: DateTime<Utc>,
    version: u32,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
    weight_bytes: u64,
}

impl RecordLine {
    fn into_record(self, dim: usize) -> CheckpointRecord {
        let embedding = match self.embedding {
            Some(e) => Vector::new(e),
            None => embed_text(&self.description, dim),
        };
        CheckpointRecord {
            id: self.id,
            triggers: self.triggers,
            subjects: self.subjects,
            styles: self.styles,
            description: self.description,
            created_at: self.created_at,
            version: self.version,
            embedding,
            weight_bytes: self.weight_bytes,
        }
    }
}

impl CheckpointRecord {
    pub fn canonical_trigger(&self) -> &str {
        &self.triggers[0]
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let invalid = |field: &'static str, message: &str| Error::Validation {
            id: self.id.clone(),
            field,
            message: message.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id", "must be non-empty"));
        }
        let Some(canonical) = self.triggers.first() else {
            return Err(invalid("triggers", "at least one trigger is required"));
        };
        if !is_valid_trigger(canonical) {
            return Err(invalid(
                "triggers",
                "canonical trigger must look like <name> or <name-vN>",
            ));
        }
        if self.version < 1 {
            return Err(invalid("version", "must be >= 1"));
        }
        if self.embedding.dim() != dim {
            return Err(invalid(
                "embedding",
                &format!(
                    "dimension {} differs from repository dimension {dim}",
                    self.embedding.dim()
                ),
            ));
        }
        if self.embedding.data().iter().any(|x| !x.is_finite()) {
            return Err(invalid("embedding", "entries must be finite"));
        }
        Ok(())
    }
}

/// `<name>` with no whitespace or nested brackets inside.
pub fn is_valid_trigger(t: &str) -> bool {
    t.len() > 2
        && t.starts_with('<')
        && t.ends_with('>')
        && t[1..t.len() - 1]
            .chars()
            .all(|c| !c.is_whitespace() && c != '<' && c != '>')
}

/// Sparse document used for lexical retrieval: subject terms then style
/// terms, lowercased, order preserved.
pub fn checkpoint_card(record: &CheckpointRecord) -> Vec<String> {
    record
        .subjects
        .iter()
        .chain(&record.styles)
        .flat_map(|s| terms(s))
        .collect()
}

/// Feature-hashed bag of words: each word lands in bucket `h mod dim` with
/// the sign taken from bit 63 of its FNV-1a hash; the sum is L2-normalized.
pub fn embed_text(text: &str, dim: usize) -> Vector {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut acc = vec![0.0; dim];
    for w in words(text) {
        let h = fnv1a64(w.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % dim as u64) as usize] += sign;
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|x| *x /= norm);
    }
    Vector::new(acc)
}

/// An immutable snapshot of checkpoint records keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Repository {
    records: Arc<BTreeMap<String, Arc<CheckpointRecord>>>,
    embedding_dim: usize,
    revision: u64,
}

impl Default for Repository {
    fn default() -> Self {
        Repository::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl Repository {
    pub fn new(embedding_dim: usize) -> Self {
        Repository {
            records: Arc::default(),
            embedding_dim,
            revision: 0,
        }
    }

    pub fn from_records(
        embedding_dim: usize,
        records: impl IntoIterator<Item = CheckpointRecord>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate(embedding_dim)?;
            if map.contains_key(&r.id) {
                return Err(Error::DuplicateId(r.id));
            }
            map.insert(r.id.clone(), Arc::new(r));
        }
        Ok(Repository {
            records: Arc::new(map),
            embedding_dim,
            revision: 0,
        })
    }

    /// Loads a JSONL file. The dimension is taken from the first inline
    /// embedding, falling back to [`DEFAULT_EMBEDDING_DIM`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_dim(path, None)
    }

    pub fn load_with_dim(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, dim)
    }

    pub fn parse_jsonl(text: &str, dim: Option<usize>) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            lines.push((i + 1, parsed));
        }
        let dim = dim
            .or_else(|| {
                lines
                    .iter()
                    .find_map(|(_, l)| l.embedding.as_ref().map(Vec::len))
            })
            .unwrap_or(DEFAULT_EMBEDDING_DIM);
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut map = BTreeMap::new();
        for (line_no, line) in lines {
            if let Some(&first) = seen.get(&line.id) {
                return Err(Error::DuplicateIdLines {
                    id: line.id,
                    first_line: first,
                    second_line: line_no,
                });
            }
            seen.insert(line.id.clone(), line_no);
            let record = line.into_record(dim);
            record.validate(dim)?;
            map.insert(record.id.clone(), Arc::new(record));
        }
        Ok(Repository {
            records: Arc::new(map),
            embedding_dim: dim,
            revision: 0,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r.as_ref())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn get(&self, id: &str) -> Result<&CheckpointRecord> {
        self.records
            .get(id)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Records in ascending id order.
    pub fn records(&self) -> impl Iterator<Item = &CheckpointRecord> {
        self.records.values().map(Arc::as_ref)
    }

    pub fn add(&self, record: CheckpointRecord) -> Result<Repository> {
        if record.embedding.dim() != self.embedding_dim {
            return Err(Error::Dimension {
                expected: self.embedding_dim,
                found: record.embedding.dim(),
            });
        }
        record.validate(self.embedding_dim)?;
        if self.records.contains_key(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        let mut next = self.clone();
        Arc::make_mut(&mut next.records).insert(record.id.clone(), Arc::new(record));
        next.revision += 1;
        Ok(next)
    }

    pub fn remove(&self, id: &str) -> Result<Repository> {
        if !self.records.contains_key(id) {
            return Err(Error::UnknownId(id.to_string()));
        }
        let mut next = self.clone();
        Arc::make_mut(&mut next.records).remove(id);
        next.revision += 1;
        Ok(next)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut subjects = BTreeSet::new();
        let mut styles = BTreeSet::new();
        for r in self.records() {
            subjects.extend(r.subjects.iter().flat_map(|s| terms(s)));
            styles.extend(r.styles.iter().flat_map(|s| terms(s)));
        }
        Vocabulary { subjects, styles }
    }
}

/// Subject and style terms known to a repository.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub subjects: BTreeSet<String>,
    pub styles: BTreeSet<String>,
}

/// A published repository snapshot with its publication number.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub generation: u64,
    pub repo: Arc<Repository>,
}

/// Read-mostly holder of the current snapshot. Readers clone an `Arc` and
/// keep using it regardless of later publications; writers serialize on a
/// single lock.
#[derive(Debug, Default)]
pub struct SharedRepository {
    current: RwLock<Option<Snapshot>>,
    writer: Mutex<u64>,
}

impl SharedRepository {
    pub fn new(repo: Option<Repository>) -> Self {
        let shared = SharedRepository::default();
        if let Some(r) = repo {
            shared.publish(r);
        }
        shared
    }

    pub fn snapshot(&self) -> Option<Snapshot> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    pub fn publish(&self, repo: Repository) -> Snapshot {
        let mut generation = self.writer.lock().expect("writer lock poisoned");
        *generation += 1;
        let snap = Snapshot {
            generation: *generation,
            repo: Arc::new(repo),
        };
        *self.current.write().expect("snapshot lock poisoned") = Some(snap.clone());
        snap
    }

    /// Applies a copy-on-write mutation to the current snapshot (or an empty
    /// repository) and publishes the result.
    pub fn update(&self, f: impl FnOnce(&Repository) -> Result<Repository>) -> Result<Snapshot> {
        let mut generation = self.writer.lock().expect("writer lock poisoned");
        let base = self
            .snapshot()
            .map(|s| s.repo)
            .unwrap_or_else(|| Arc::new(Repository::default()));
        let next = f(&base)?;
        *generation += 1;
        let snap = Snapshot {
            generation: *generation,
            repo: Arc::new(next),
        };
        *self.current.write().expect("snapshot lock poisoned") = Some(snap.clone());
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn record(id: &str, subjects: &[&str], styles: &[&str]) -> CheckpointRecord {
        let description = format!("{} {}", styles.join(" "), subjects.join(" "));
        CheckpointRecord {
            id: id.to_string(),
            triggers: vec![format!("<{id}>")],
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
            styles: styles.iter().map(|s| s.to_string()).collect(),
            embedding: embed_text(&description, 16),
            description,
            created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            version: 1,
            weight_bytes: 4 << 30,
        }
    }

    #[test]
    fn card_examples() {
        assert_eq!(
            checkpoint_card(&record("a", &["bear"], &["realistic"])),
            vec!["bear", "realistic"]
        );
        assert!(checkpoint_card(&record("b", &[], &[])).is_empty());
        assert_eq!(
            checkpoint_card(&record("c", &["Toy", "bear"], &[])),
            vec!["toy", "bear"]
        );
    }

    #[test]
    fn embedding_properties() {
        let a = embed_text("realistic bear", 64);
        assert_eq!(a, embed_text("realistic bear", 64));
        assert_eq!(a, embed_text("bear realistic", 64));
        assert_eq!(a, embed_text("Bear, REALISTIC!", 64));
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!(embed_text("", 64).is_zero());
        assert!(embed_text("--- !!", 8).is_zero());
    }

    #[test]
    fn embedding_bucket_and_sign() {
        let h = fnv1a64(b"bear");
        let v = embed_text("bear", 8);
        let bucket = (h % 8) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        assert_eq!(v.data()[bucket], sign);
        assert_eq!(v.data().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn trigger_pattern() {
        assert!(is_valid_trigger("<bear-v4>"));
        assert!(is_valid_trigger("<sks>"));
        assert!(!is_valid_trigger("bear"));
        assert!(!is_valid_trigger("<>"));
        assert!(!is_valid_trigger("<bear v4>"));
    }

    #[test]
    fn add_remove_get() {
        let repo = Repository::new(16);
        let r = record("bear-v1", &["bear"], &["realistic"]);
        let next = repo.add(r.clone()).unwrap();
        assert_eq!(next.get("bear-v1").unwrap(), &r);
        assert_eq!(next.revision(), 1);
        assert!(repo.is_empty(), "old snapshot untouched");
        assert!(matches!(next.add(r.clone()), Err(Error::DuplicateId(_))));
        assert!(matches!(next.remove("nope"), Err(Error::UnknownId(_))));
        let mut wrong = record("x", &["cat"], &[]);
        wrong.embedding = Vector::zeros(3);
        assert!(matches!(
            next.add(wrong),
            Err(Error::Dimension {
                expected: 16,
                found: 3
            })
        ));
        let gone = next.remove("bear-v1").unwrap();
        assert_eq!(gone.revision(), 2);
        assert!(gone.is_empty());
        assert_eq!(next.len(), 1);
    }

    #[test]
    fn jsonl_errors() {
        assert!(Repository::parse_jsonl("", None).unwrap().is_empty());
        let line = |id: &str| {
            format!(
                r#"{{"id":"{id}","triggers":["<{id}>"],"subjects":["bear"],"styles":[],"description":"bear","created_at":"2024-01-01T00:00:00Z","version":1,"weight_bytes":10}}"#
            )
        };
        let text = [
            line("a"),
            line("b"),
            line("c"),
            line("d"),
            line("e"),
            line("f"),
            line("c"),
        ]
        .join("\n");
        match Repository::parse_jsonl(&text, None) {
            Err(Error::DuplicateIdLines {
                id,
                first_line,
                second_line,
            }) => {
                assert_eq!((id.as_str(), first_line, second_line), ("c", 3, 7));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = format!("{}\n{{\"id\": 3}}", line("a"));
        assert!(matches!(
            Repository::parse_jsonl(&bad, None),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_trigger = line("a").replace("\"<a>\"", "\"a\"");
        match Repository::parse_jsonl(&bad_trigger, None) {
            Err(Error::Validation { id, field, .. }) => {
                assert_eq!((id.as_str(), field), ("a", "triggers"))
            }
            other => panic!("unexpected {other:?}"),
        }
        let repo = Repository::parse_jsonl(&line("z"), None).unwrap();
        assert_eq!(repo.embedding_dim(), DEFAULT_EMBEDDING_DIM);
        assert_eq!(
            repo.get("z").unwrap().embedding,
            embed_text("bear", DEFAULT_EMBEDDING_DIM)
        );
    }

    #[test]
    fn save_load_round_trip() {
        let repo = Repository::from_records(
            16,
            [
                record("a", &["bear"], &["realistic"]),
                record("b", &["toy", "bear"], &["stuffed-toy"]),
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("repo.jsonl");
        repo.save(&path).unwrap();
        assert_eq!(Repository::load(&path).unwrap(), repo);
    }

    #[test]
    fn shared_snapshots_are_isolated() {
        let shared = SharedRepository::new(None);
        assert!(shared.snapshot().is_none());
        let s1 = shared.publish(Repository::new(16));
        let s2 = shared
            .update(|r| r.add(record("a", &["bear"], &[])))
            .unwrap();
        assert!(s1.repo.is_empty());
        assert_eq!(s2.repo.len(), 1);
        assert!(s2.generation > s1.generation);
        assert!(shared.update(|r| r.remove("missing")).is_err());
        assert_eq!(shared.snapshot().unwrap().generation, s2.generation);
    }
}
