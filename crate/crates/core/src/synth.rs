//! Seeded generators for a synthetic checkpoint repository, the
//! Repo-Prompts benchmark built on top of it, and personalized attention
//! fixtures.
//!
//! Ambiguous and no-match queries are constructed as follows:
//!
//! * style-ambiguous: a subject-only query over a pool holding two records
//!   of that subject in different styles,
//! * subject-ambiguous: a style + version query over a pool holding two
//!   records of different subjects sharing that style and version,
//! * recency-ambiguous: a subject + style query without temporal cue over a
//!   pool holding two versions of the same subject and style,
//! * no-match: a query whose subject is outside the repository vocabulary.
//!
//! Every ambiguous pool is padded with distractors that cannot tie with the
//! ambiguous pair.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBundle;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::registry::{embed_text, CheckpointRecord, Repository, DEFAULT_EMBEDDING_DIM};

pub const CATEGORIES: [&str; 20] = [
    "dog", "cat", "person", "bear", "horse", "car", "toy", "watch", "bag", "chair", "house",
    "building", "bridge", "flower", "tree", "mountain", "painting", "drawing", "logo", "shoe",
];

/// Style tags; none shares a word with a category name.
pub const STYLES: [&str; 10] = [
    "realistic",
    "anime",
    "watercolor",
    "plush",
    "cartoon",
    "impressionist",
    "sketch",
    "cyberpunk",
    "claymation",
    "minimalist",
];

/// Subjects that never occur in a generated repository.
pub const OUT_OF_VOCABULARY_SUBJECTS: [&str; 25] = [
    "dragon",
    "robot",
    "spaceship",
    "guitar",
    "castle",
    "unicorn",
    "submarine",
    "violin",
    "lighthouse",
    "octopus",
    "volcano",
    "penguin",
    "tractor",
    "helicopter",
    "cactus",
    "giraffe",
    "piano",
    "teapot",
    "windmill",
    "dinosaur",
    "lantern",
    "kayak",
    "parrot",
    "telescope",
    "snowman",
];

const SCENES: [&str; 12] = [
    "on forest grass",
    "at the beach",
    "in a snowy field",
    "under neon lights",
    "on a wooden table",
    "in the rain",
    "at sunset",
    "beside a lake",
    "in a city street",
    "in a quiet garden",
    "under a starry sky",
    "on a sofa",
];

pub const DEFAULT_SEED: u64 = 7;

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepoSpec {
    pub categories: usize,
    pub versions: u32,
    pub seed: u64,
}

impl Default for RepoSpec {
    fn default() -> Self {
        RepoSpec {
            categories: CATEGORIES.len(),
            versions: 50,
            seed: DEFAULT_SEED,
        }
    }
}

/// Generates `categories × versions` records. Styles are balanced within a
/// category and shuffled by the seed; version `v` is created `v - 1` days
/// after the epoch.
pub fn generate_repository(spec: &RepoSpec) -> Result<Repository> {
    if spec.categories == 0 || spec.categories > CATEGORIES.len() {
        return Err(Error::Generation(format!(
            "categories must be in 1..={}, got {}",
            CATEGORIES.len(),
            spec.categories
        )));
    }
    if spec.versions == 0 {
        return Err(Error::Generation("versions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.categories * spec.versions as usize);
    for subject in &CATEGORIES[..spec.categories] {
        let mut styles: Vec<&str> = (0..spec.versions as usize)
            .map(|i| STYLES[i % STYLES.len()])
            .collect();
        styles.shuffle(&mut rng);
        for (v, style) in (1..=spec.versions).zip(styles) {
            let id = format!("{subject}-v{v}");
            let description = format!("a {style} {subject}");
            let jitter: f64 = rng.random_range(-0.05..0.05);
            records.push(CheckpointRecord {
                triggers: vec![format!("<{id}>")],
                subjects: vec![subject.to_string()],
                styles: vec![style.to_string()],
                embedding: embed_text(&description, DEFAULT_EMBEDDING_DIM),
                description,
                created_at: epoch() + Duration::days(i64::from(v) - 1),
                version: v,
                weight_bytes: ((4u64 << 30) as f64 * (1.0 + jitter)).round() as u64,
                id,
            });
        }
    }
    Repository::from_records(DEFAULT_EMBEDDING_DIM, records)
}

/// Either an explicit list of checkpoint ids or the whole repository.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CandidatePool {
    All,
    Ids(Vec<String>),
}

impl Serialize for CandidatePool {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CandidatePool::All => s.serialize_str("ALL"),
            CandidatePool::Ids(ids) => ids.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for CandidatePool {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Ids(Vec<String>),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "ALL" => Ok(CandidatePool::All),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!(
                "candidate_pool must be \"ALL\" or a list of ids, got {t:?}"
            ))),
            Raw::Ids(ids) => Ok(CandidatePool::Ids(ids)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub checkpoint_id: Option<String>,
    pub requires_clarification: bool,
    pub no_match: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Single,
    Ambiguous,
    NoMatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoPromptInstance {
    pub instance_id: String,
    pub query: String,
    pub candidate_pool: CandidatePool,
    pub ground_truth: GroundTruth,
}

impl RepoPromptInstance {
    pub fn split(&self) -> Split {
        if self.ground_truth.no_match {
            Split::NoMatch
        } else if self.ground_truth.requires_clarification {
            Split::Ambiguous
        } else {
            Split::Single
        }
    }

    /// Checks the ground-truth schema and that every referenced id exists.
    pub fn validate(&self, repo: &Repository) -> Result<()> {
        let gt = &self.ground_truth;
        let bad = |message: &str| Error::Validation {
            id: self.instance_id.clone(),
            field: "ground_truth",
            message: message.to_string(),
        };
        match (&gt.checkpoint_id, gt.no_match, gt.requires_clarification) {
            (Some(_), true, _) => return Err(bad("checkpoint_id and no_match are exclusive")),
            (None, false, _) => return Err(bad("either checkpoint_id or no_match must be set")),
            (None, true, true) => {
                return Err(bad("no-match instances cannot require clarification"))
            }
            _ => {}
        }
        if let Some(id) = &gt.checkpoint_id {
            if !repo.contains(id) {
                return Err(bad(&format!("unknown checkpoint {id}")));
            }
        }
        if let CandidatePool::Ids(ids) = &self.candidate_pool {
            if let Some(missing) = ids.iter().find(|id| !repo.contains(id)) {
                return Err(Error::Validation {
                    id: self.instance_id.clone(),
                    field: "candidate_pool",
                    message: format!("unknown checkpoint {missing}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub single: usize,
    pub ambiguous: usize,
    pub no_match: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            single: 350,
            ambiguous: 100,
            no_match: 50,
            pool_size: 10,
            seed: DEFAULT_SEED,
        }
    }
}

struct Facts<'a> {
    by_subject_style: BTreeMap<(&'a str, &'a str), Vec<&'a CheckpointRecord>>,
    by_style_version: BTreeMap<(&'a str, u32), Vec<&'a CheckpointRecord>>,
    by_subject: BTreeMap<&'a str, Vec<&'a CheckpointRecord>>,
    records: Vec<&'a CheckpointRecord>,
}

fn first(items: &[String]) -> &str {
    items.first().map(String::as_str).unwrap_or("")
}

impl<'a> Facts<'a> {
    fn new(repo: &'a Repository) -> Self {
        let mut f = Facts {
            by_subject_style: BTreeMap::new(),
            by_style_version: BTreeMap::new(),
            by_subject: BTreeMap::new(),
            records: repo.records().collect(),
        };
        for r in &f.records {
            let (subject, style) = (first(&r.subjects), first(&r.styles));
            f.by_subject_style
                .entry((subject, style))
                .or_default()
                .push(r);
            f.by_style_version
                .entry((style, r.version))
                .or_default()
                .push(r);
            f.by_subject.entry(subject).or_default().push(r);
        }
        f
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty by construction")
}

/// Pads `pair` up to `size` with records chosen by `allowed`, then shuffles.
fn pool_with_distractors(
    rng: &mut ChaCha8Rng,
    facts: &Facts<'_>,
    pair: &[&CheckpointRecord],
    size: usize,
    allowed: impl Fn(&CheckpointRecord) -> bool,
) -> Vec<String> {
    let taken: BTreeSet<&str> = pair.iter().map(|r| r.id.as_str()).collect();
    let eligible: Vec<&CheckpointRecord> = facts
        .records
        .iter()
        .copied()
        .filter(|r| !taken.contains(r.id.as_str()) && allowed(r))
        .collect();
    let want = size.saturating_sub(pair.len()).min(eligible.len());
    let mut ids: Vec<String> = pair.iter().map(|r| r.id.clone()).collect();
    ids.extend(eligible.choose_multiple(rng, want).map(|r| r.id.clone()));
    ids.shuffle(rng);
    ids
}

fn too_small(what: &str) -> Error {
    Error::Generation(format!(
        "repository too small for {what}: need at least 2 categories sharing a style at one version, \
         and one category with 2 styles and 2 versions of one style (e.g. --categories 2 --versions 20)"
    ))
}

/// Generates the benchmark: single-match, then ambiguous, then no-match
/// instances, with ids `q0001...`.
pub fn generate_prompts(repo: &Repository, spec: &PromptSpec) -> Result<Vec<RepoPromptInstance>> {
    if repo.is_empty() {
        return Err(Error::Generation("repository is empty".into()));
    }
    let facts = Facts::new(repo);
    let vocab = repo.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.single + spec.ambiguous + spec.no_match);
    let mut next_id = {
        let mut n = 0usize;
        move || {
            n += 1;
            format!("q{n:04}")
        }
    };

    for i in 0..spec.single {
        let target = *pick(&mut rng, &facts.records);
        let (subject, style) = (first(&target.subjects), first(&target.styles));
        let scene = pick(&mut rng, &SCENES);
        let group = &facts.by_subject_style[&(subject, style)];
        let (query, gt) = match i % 4 {
            0 | 1 => {
                let q = if rng.random_bool(0.5) {
                    format!("{style} {subject} v{} {scene}", target.version)
                } else {
                    format!("my {style} {subject}, version {}, {scene}", target.version)
                };
                (q, target)
            }
            2 => {
                let newest = group.iter().max_by_key(|r| r.created_at).unwrap();
                let templates = [
                    format!("my most {style}, recently created {subject} {scene}"),
                    format!("the latest {style} {subject} {scene}"),
                    format!("my newest {style} {subject} {scene}"),
                ];
                (pick(&mut rng, &templates).clone(), *newest)
            }
            _ => {
                let oldest = group.iter().min_by_key(|r| r.created_at).unwrap();
                let templates = [
                    format!("the oldest {style} {subject} {scene}"),
                    format!("my first {style} {subject} {scene}"),
                ];
                (pick(&mut rng, &templates).clone(), *oldest)
            }
        };
        out.push(RepoPromptInstance {
            instance_id: next_id(),
            query,
            candidate_pool: CandidatePool::All,
            ground_truth: GroundTruth {
                checkpoint_id: Some(gt.id.clone()),
                requires_clarification: false,
                no_match: false,
            },
        });
    }

    let style_pairs: Vec<(&str, &str, &str)> = facts
        .by_subject
        .iter()
        .flat_map(|(subject, recs)| {
            let styles: BTreeSet<&str> = recs.iter().map(|r| first(&r.styles)).collect();
            let styles: Vec<&str> = styles.into_iter().collect();
            let mut pairs = Vec::new();
            for (a, sa) in styles.iter().enumerate() {
                for sb in &styles[a + 1..] {
                    pairs.push((*subject, *sa, *sb));
                }
            }
            pairs
        })
        .collect();
    let subject_groups: Vec<&Vec<&CheckpointRecord>> = facts
        .by_style_version
        .values()
        .filter(|g| g.len() >= 2)
        .collect();
    let recency_groups: Vec<&Vec<&CheckpointRecord>> = facts
        .by_subject_style
        .values()
        .filter(|g| g.len() >= 2)
        .collect();
    if spec.ambiguous > 0 {
        if style_pairs.is_empty() {
            return Err(too_small("style-ambiguous queries"));
        }
        if subject_groups.is_empty() {
            return Err(too_small("subject-ambiguous queries"));
        }
        if recency_groups.is_empty() {
            return Err(too_small("recency-ambiguous queries"));
        }
    }

    for i in 0..spec.ambiguous {
        let scene = pick(&mut rng, &SCENES);
        let (query, pair, pool): (String, Vec<&CheckpointRecord>, Vec<String>) = match i % 3 {
            0 => {
                let &(subject, sa, sb) = pick(&mut rng, &style_pairs);
                let group_a = &facts.by_subject_style[&(subject, sa)];
                let group_b = &facts.by_subject_style[&(subject, sb)];
                let pair = vec![*pick(&mut rng, group_a), *pick(&mut rng, group_b)];
                let pool = pool_with_distractors(&mut rng, &facts, &pair, spec.pool_size, |r| {
                    first(&r.subjects) != subject
                });
                let q = if rng.random_bool(0.5) {
                    format!("my {subject} {scene}")
                } else {
                    format!("a picture of my {subject} {scene}")
                };
                (q, pair, pool)
            }
            1 => {
                let group = *pick(&mut rng, &subject_groups);
                let pair: Vec<&CheckpointRecord> =
                    group.choose_multiple(&mut rng, 2).copied().collect();
                let (style, version) = (first(&pair[0].styles).to_string(), pair[0].version);
                let pool = pool_with_distractors(&mut rng, &facts, &pair, spec.pool_size, |r| {
                    first(&r.styles) != style && r.version != version
                });
                (format!("my {style} v{version} {scene}"), pair, pool)
            }
            _ => {
                let group = *pick(&mut rng, &recency_groups);
                let pair: Vec<&CheckpointRecord> =
                    group.choose_multiple(&mut rng, 2).copied().collect();
                let subject = first(&pair[0].subjects).to_string();
                let style = first(&pair[0].styles).to_string();
                let pool = pool_with_distractors(&mut rng, &facts, &pair, spec.pool_size, |r| {
                    first(&r.subjects) != subject
                });
                (format!("my {style} {subject} {scene}"), pair, pool)
            }
        };
        let gt = *pick(&mut rng, &pair);
        out.push(RepoPromptInstance {
            instance_id: next_id(),
            query,
            candidate_pool: CandidatePool::Ids(pool),
            ground_truth: GroundTruth {
                checkpoint_id: Some(gt.id.clone()),
                requires_clarification: true,
                no_match: false,
            },
        });
    }

    let oov: Vec<&str> = OUT_OF_VOCABULARY_SUBJECTS
        .iter()
        .copied()
        .filter(|s| !vocab.subjects.contains(*s) && !vocab.styles.contains(*s))
        .collect();
    for _ in 0..spec.no_match {
        let subject = pick(&mut rng, &oov);
        let scene = pick(&mut rng, &SCENES);
        let query = if rng.random_bool(0.5) {
            format!("my {subject} {scene}")
        } else {
            format!("a {subject} {scene}")
        };
        out.push(RepoPromptInstance {
            instance_id: next_id(),
            query,
            candidate_pool: CandidatePool::All,
            ground_truth: GroundTruth {
                checkpoint_id: None,
                requires_clarification: false,
                no_match: true,
            },
        });
    }
    Ok(out)
}

pub fn prompts_to_json(instances: &[RepoPromptInstance]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(instances)?;
    s.push('\n');
    Ok(s)
}

/// Parses a prompts file, naming the offending instance on schema errors.
pub fn prompts_from_json(text: &str, repo: &Repository) -> Result<Vec<RepoPromptInstance>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(raw.len());
    let mut seen = BTreeSet::new();
    for (i, value) in raw.into_iter().enumerate() {
        let label = value
            .get("instance_id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("#{i}"), str::to_string);
        let inst: RepoPromptInstance =
            serde_json::from_value(value).map_err(|e| Error::Validation {
                id: label.clone(),
                field: "instance",
                message: e.to_string(),
            })?;
        if !seen.insert(inst.instance_id.clone()) {
            return Err(Error::DuplicateId(inst.instance_id));
        }
        inst.validate(repo)?;
        out.push(inst);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// attention fixtures

const FIXTURE_TOKENS: [&str; 10] = [
    "a",
    "photo",
    "of",
    "my",
    "<bear-v4>",
    "on",
    "forest",
    "grass",
    "at",
    "dawn",
];

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("finite gaussian samples")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A bundle shaped like a personalized prompt: ordinary tokens have small
/// keys and values, the trigger span has a key aligned with the queries
/// (so it draws attention) and a large value along its own direction.
pub fn personalized_bundle(
    seed: u64,
    queries: usize,
    tokens: usize,
    dim: usize,
    span: &[usize],
) -> Result<AttentionBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_dir = unit_vector(&mut rng, dim);
    let value_dir = unit_vector(&mut rng, dim);
    let mut q = gaussian_matrix(&mut rng, queries, dim, 0.4).data().to_vec();
    for row in q.chunks_mut(dim) {
        row.iter_mut()
            .zip(&query_dir)
            .for_each(|(x, u)| *x += 2.0 * u);
    }
    let mut k = gaussian_matrix(&mut rng, tokens, dim, 0.5).data().to_vec();
    let mut v = gaussian_matrix(&mut rng, tokens, dim, 0.5).data().to_vec();
    for &t in span {
        if t >= tokens {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: tokens,
            });
        }
        for c in 0..dim {
            k[t * dim + c] += 1.5 * query_dir[c];
            v[t * dim + c] += 6.0 * value_dir[c];
        }
    }
    AttentionBundle::new(
        Matrix::new(queries, dim, q)?,
        Matrix::new(tokens, dim, k)?,
        Matrix::new(tokens, dim, v)?,
        span.to_vec(),
    )
}

/// The shipped single-bundle fixture: ten tokens, trigger `<bear-v4>` at
/// position 4, sixteen queries, d = 16.
pub fn personalized_fixture() -> AttentionBundle {
    personalized_bundle(20240101, 16, FIXTURE_TOKENS.len(), 16, &[4])
        .and_then(|b| b.with_tokens(FIXTURE_TOKENS.iter().map(|t| t.to_string()).collect()))
        .expect("fixture parameters are valid")
}

/// A corpus of personalized bundles with varying shapes and trigger spans
/// of one to three sub-tokens.
pub fn fixture_corpus(seed: u64, count: usize) -> Vec<AttentionBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let tokens = rng.random_range(6..=16);
            let dim = rng.random_range(8..=16);
            let queries = rng.random_range(4..=16);
            let len = rng.random_range(1..=3);
            let start = rng.random_range(0..=tokens - len);
            let span: Vec<usize> = (start..start + len).collect();
            personalized_bundle(rng.random(), queries, tokens, dim, &span)
                .expect("span inside token range")
        })
        .collect()
}

pub const FIXTURE_CORPUS_SEED: u64 = 4242;
pub const FIXTURE_CORPUS_SIZE: usize = 50;
