//! Intent parsing, candidate reranking, clarification and trigger rewriting.
//!
//! Scoring only ever sees [`UserIntent`]; the serving half of an
//! [`IntentRecord`] is carried alongside for the caller and has no path
//! into candidate order.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::cosine;
use crate::quantizers::QuantSpec;
use crate::registry::{embed_text, CheckpointRecord, Repository, Vocabulary};
use crate::retrieval::{by_score_then_id, CandidateSet, RRF_KAPPA};
use crate::text::{is_term_char, terms};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecencyCue {
    #[default]
    None,
    RecentlyCreated,
    Oldest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionCue {
    Latest,
    Explicit(u32),
}

/// What the user asked for. This is the only input candidate scoring reads.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserIntent {
    pub subject_terms: Vec<String>,
    pub style_terms: Vec<String>,
    pub recency_cue: RecencyCue,
    pub version_cue: Option<VersionCue>,
}

impl UserIntent {
    pub fn has_temporal_cue(&self) -> bool {
        self.recency_cue != RecencyCue::None || self.version_cue.is_some()
    }
}

/// How a selected checkpoint should be served.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemContext {
    pub quant_preset: QuantSpec,
    pub memory_budget_bytes: u64,
}

impl Default for SystemContext {
    fn default() -> Self {
        SystemContext {
            quant_preset: QuantSpec::default(),
            memory_budget_bytes: 8 << 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRecord {
    #[serde(flatten)]
    pub user: UserIntent,
    pub system_context: SystemContext,
}

const RECENT_PHRASES: &[&[&str]] = &[
    &["recently", "created"],
    &["latest"],
    &["newest"],
    &["most", "recent"],
];
const OLDEST_PHRASES: &[&[&str]] = &[&["oldest"], &["first"], &["earliest"]];

fn contains_phrase(tokens: &[String], phrase: &[&str]) -> bool {
    tokens
        .windows(phrase.len())
        .any(|w| w.iter().zip(phrase).all(|(a, b)| a == b))
}

fn parse_version_token(tok: &str) -> Option<u32> {
    let digits = tok.strip_prefix('v')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&n| n >= 1)
}

/// Extracts the user-intent fields from a prompt and copies the system
/// context from `defaults`.
pub fn parse_intent(prompt: &str, vocab: &Vocabulary, defaults: &SystemContext) -> IntentRecord {
    let tokens = terms(prompt);
    let mut used = vec![false; tokens.len()];
    let mut styles: Vec<String> = Vec::new();
    let mut subjects: Vec<String> = Vec::new();
    let push = |list: &mut Vec<String>, t: &str| {
        if !list.iter().any(|x| x == t) {
            list.push(t.to_string());
        }
    };

    // two-word spellings of hyphenated style tags ("stuffed toy") first
    for i in 0..tokens.len().saturating_sub(1) {
        let joined = format!("{}-{}", tokens[i], tokens[i + 1]);
        if !used[i] && !used[i + 1] && vocab.styles.contains(&joined) {
            push(&mut styles, &joined);
            used[i] = true;
            used[i + 1] = true;
        }
    }
    for (i, t) in tokens.iter().enumerate() {
        if used[i] {
            continue;
        }
        if vocab.styles.contains(t) {
            push(&mut styles, t);
            used[i] = true;
        } else if vocab.subjects.contains(t) {
            push(&mut subjects, t);
            used[i] = true;
        }
    }

    let recency_cue = if RECENT_PHRASES.iter().any(|p| contains_phrase(&tokens, p)) {
        RecencyCue::RecentlyCreated
    } else if OLDEST_PHRASES.iter().any(|p| contains_phrase(&tokens, p)) {
        RecencyCue::Oldest
    } else {
        RecencyCue::None
    };

    let mut version_cue = tokens
        .iter()
        .find_map(|t| parse_version_token(t))
        .map(VersionCue::Explicit);
    if version_cue.is_none() {
        version_cue = tokens.windows(2).find_map(|w| {
            (w[0] == "version")
                .then(|| w[1].parse::<u32>().ok().filter(|&n| n >= 1))
                .flatten()
                .map(VersionCue::Explicit)
        });
    }
    if version_cue.is_none() && contains_phrase(&tokens, &["latest", "version"]) {
        version_cue = Some(VersionCue::Latest);
    }

    IntentRecord {
        user: UserIntent {
            subject_terms: subjects,
            style_terms: styles,
            recency_cue,
            version_cue,
        },
        system_context: *defaults,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub subject: f64,
    pub style: f64,
    pub description: f64,
    pub recency: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        RerankWeights {
            subject: 0.35,
            style: 0.25,
            description: 0.25,
            recency: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub subject_match: f64,
    pub style_match: f64,
    pub description_sim: f64,
    pub recency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub checkpoint_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<ScoreComponents>,
}

fn lower_set(items: &[String]) -> BTreeSet<String> {
    items.iter().flat_map(|s| terms(s)).collect()
}

/// Jaccard overlap; two empty sets score 0.
fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Position of each timestamp in ascending order scaled to [0, 1]; equal
/// timestamps share their average rank. A single candidate gets 1.
fn normalized_time_ranks(times: &[DateTime<Utc>]) -> Vec<f64> {
    let n = times.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| times[i]);
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && times[order[end + 1]] == times[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0;
        for &i in &order[start..=end] {
            ranks[i] = avg / (n - 1) as f64;
        }
        start = end + 1;
    }
    ranks
}

fn sort_scored(scored: &mut [ScoredCandidate]) {
    scored
        .sort_by(|a, b| by_score_then_id((a.score, &a.checkpoint_id), (b.score, &b.checkpoint_id)));
}

/// Rule-based rerank of a candidate set, sorted by descending score with
/// ascending id as tiebreak.
pub fn rerank(
    candidates: &CandidateSet,
    intent: &UserIntent,
    repo: &Repository,
    weights: &RerankWeights,
) -> Result<Vec<ScoredCandidate>> {
    let records: Vec<&CheckpointRecord> = candidates
        .candidates
        .iter()
        .map(|c| repo.get(&c.checkpoint_id))
        .collect::<Result<_>>()?;
    let want_subjects: BTreeSet<String> = intent.subject_terms.iter().cloned().collect();
    let want_styles: BTreeSet<String> = intent.style_terms.iter().cloned().collect();
    let intent_text = intent
        .subject_terms
        .iter()
        .chain(&intent.style_terms)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ");
    let intent_vec = embed_text(&intent_text, repo.embedding_dim());
    let times: Vec<DateTime<Utc>> = records.iter().map(|r| r.created_at).collect();
    let ranks = normalized_time_ranks(&times);

    let mut scored: Vec<ScoredCandidate> = records
        .iter()
        .zip(ranks)
        .map(|(r, rank)| {
            let recency = match (intent.version_cue, intent.recency_cue) {
                (Some(VersionCue::Explicit(n)), _) => f64::from(u8::from(r.version == n)),
                (Some(VersionCue::Latest), _) | (None, RecencyCue::RecentlyCreated) => rank,
                (None, RecencyCue::Oldest) => 1.0 - rank,
                (None, RecencyCue::None) => 0.5,
            };
            let c = ScoreComponents {
                subject_match: jaccard(&want_subjects, &lower_set(&r.subjects)),
                style_match: jaccard(&want_styles, &lower_set(&r.styles)),
                description_sim: cosine(&intent_vec, &r.embedding).unwrap_or(0.0).max(0.0),
                recency,
            };
            let score = weights.subject * c.subject_match
                + weights.style * c.style_match
                + weights.description * c.description_sim
                + weights.recency * c.recency;
            ScoredCandidate {
                checkpoint_id: r.id.clone(),
                score,
                components: Some(c),
            }
        })
        .collect();
    sort_scored(&mut scored);
    Ok(scored)
}

/// Keeps the fused retrieval order, scaling RRF scores by their maximum
/// possible value `2 / (kappa + 1)` so they are comparable to thresholds.
pub fn retrieval_order(candidates: &CandidateSet) -> Vec<ScoredCandidate> {
    let top = 2.0 / (RRF_KAPPA + 1.0);
    candidates
        .candidates
        .iter()
        .map(|c| ScoredCandidate {
            checkpoint_id: c.checkpoint_id.clone(),
            score: (c.rrf_score / top).min(1.0),
            components: None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Below this top score nothing matches.
    pub no_match: f64,
    /// Top-1 leads closer than this count as tied.
    pub margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            no_match: 0.30,
            margin: 0.10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Subject,
    Style,
    Recency,
}

impl Attribute {
    pub const PRIORITY: [Attribute; 3] = [Attribute::Subject, Attribute::Style, Attribute::Recency];
}

pub const MOST_RECENT_OPTION: &str = "the most recent one";
pub const EARLIER_OPTION: &str = "an earlier one";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub attribute: Attribute,
    pub text: String,
    pub options: Vec<String>,
    /// Candidate ids behind each option, aligned with `options`. Kept
    /// server-side; never serialised to users.
    #[serde(skip)]
    pub candidate_partition: Vec<Vec<String>>,
}

impl ClarificationQuestion {
    pub fn partition_of(&self, option: &str) -> Option<&[String]> {
        self.options
            .iter()
            .position(|o| o == option)
            .map(|i| self.candidate_partition[i].as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Selected(String),
    Clarify(ClarificationQuestion),
    NoMatch,
}

fn humanize(tag: &str) -> String {
    tag.replace(['-', '_'], " ")
}

/// (grouping key, option label) of a record for one attribute.
fn attribute_key(attr: Attribute, r: &CheckpointRecord) -> (String, String) {
    let joined = |items: &[String]| {
        let set = lower_set(items);
        let key = set.iter().cloned().collect::<Vec<_>>().join("+");
        let label = set
            .iter()
            .map(|s| humanize(s))
            .collect::<Vec<_>>()
            .join(" and ");
        (key, label)
    };
    match attr {
        Attribute::Subject => joined(&r.subjects),
        Attribute::Style => {
            let (k, l) = joined(&r.styles);
            if k.is_empty() {
                (k, "no particular style".to_string())
            } else {
                (k, l)
            }
        }
        Attribute::Recency => unreachable!("recency groups are positional"),
    }
}

fn build_question(
    attr: Attribute,
    tied: &[&ScoredCandidate],
    repo: &Repository,
) -> Result<Option<ClarificationQuestion>> {
    let mut groups: Vec<(String, String, Vec<String>)> = Vec::new();
    match attr {
        Attribute::Recency => {
            let newest = tied
                .iter()
                .map(|c| repo.get(&c.checkpoint_id).map(|r| r.created_at))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max();
            let (mut recent, mut earlier) = (Vec::new(), Vec::new());
            for c in tied {
                let r = repo.get(&c.checkpoint_id)?;
                if Some(r.created_at) == newest {
                    recent.push(c.checkpoint_id.clone());
                } else {
                    earlier.push(c.checkpoint_id.clone());
                }
            }
            if earlier.is_empty() {
                return Ok(None);
            }
            groups.push((String::new(), MOST_RECENT_OPTION.to_string(), recent));
            groups.push((String::new(), EARLIER_OPTION.to_string(), earlier));
        }
        _ => {
            // tied is sorted best-first, so groups come out in order of
            // their best member
            for c in tied {
                let (key, label) = attribute_key(attr, repo.get(&c.checkpoint_id)?);
                match groups.iter_mut().find(|g| g.0 == key) {
                    Some(g) => g.2.push(c.checkpoint_id.clone()),
                    None => groups.push((key, label, vec![c.checkpoint_id.clone()])),
                }
            }
            if groups.len() < 2 {
                return Ok(None);
            }
            groups.truncate(4);
        }
    }
    let options: Vec<String> = groups.iter().map(|g| g.1.clone()).collect();
    let listed = match options.as_slice() {
        [a, b] => format!("{a} or {b}"),
        [init @ .., last] => format!("{}, or {last}", init.join(", ")),
        [] => String::new(),
    };
    let text = match attr {
        Attribute::Subject => format!("Which subject do you mean: {listed}?"),
        Attribute::Style => format!("Which style do you want: {listed}?"),
        Attribute::Recency => format!("Do you want {listed}?"),
    };
    Ok(Some(ClarificationQuestion {
        attribute: attr,
        text,
        options,
        candidate_partition: groups.into_iter().map(|g| g.2).collect(),
    }))
}

/// Classifies a sorted scored list as selected, needing clarification, or
/// matching nothing.
///
/// A clarification is raised when the lead of the top candidate is below
/// the margin and the candidates within the margin differ on an attribute
/// that has not been asked yet (subject, then style, then recency; recency
/// only when the intent carries no temporal cue).
pub fn decide(
    scored: &[ScoredCandidate],
    intent: &UserIntent,
    asked: &[Attribute],
    repo: &Repository,
    thresholds: &Thresholds,
) -> Result<Decision> {
    let Some(top) = scored.first() else {
        return Ok(Decision::NoMatch);
    };
    if top.score < thresholds.no_match {
        return Ok(Decision::NoMatch);
    }
    let contested = scored
        .get(1)
        .is_some_and(|second| top.score - second.score < thresholds.margin);
    if contested {
        let tied: Vec<&ScoredCandidate> = scored
            .iter()
            .filter(|c| top.score - c.score < thresholds.margin)
            .collect();
        for attr in Attribute::PRIORITY {
            if asked.contains(&attr) || (attr == Attribute::Recency && intent.has_temporal_cue()) {
                continue;
            }
            if let Some(q) = build_question(attr, &tied, repo)? {
                return Ok(Decision::Clarify(q));
            }
        }
    }
    Ok(Decision::Selected(top.checkpoint_id.clone()))
}

/// Replaces every whole-word occurrence of the record's subjects with its
/// canonical trigger; prefixes the trigger when no subject word occurs.
pub fn rewrite_prompt(prompt: &str, record: &CheckpointRecord) -> String {
    let trigger = record.canonical_trigger();
    let subjects: BTreeSet<String> = record.subjects.iter().map(|s| s.to_lowercase()).collect();
    let mut out = String::with_capacity(prompt.len() + trigger.len());
    let mut replaced = false;
    let mut has_trigger = false;
    let mut word = String::new();
    let mut flush = |word: &mut String, out: &mut String| {
        if word.is_empty() {
            return;
        }
        let lower = word.to_lowercase();
        if subjects.contains(&lower) {
            out.push_str(trigger);
            replaced = true;
        } else {
            has_trigger |= lower == trigger.to_lowercase();
            out.push_str(word);
        }
        word.clear();
    };
    for ch in prompt.chars() {
        if is_term_char(ch) {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    if replaced || has_trigger {
        out
    } else {
        format!("{trigger} :: {prompt}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStatus {
    Selected,
    NeedsClarification,
    #[default]
    NoMatch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub status: SelectionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<ClarificationQuestion>,
    pub scores: Vec<ScoredCandidate>,
    /// Why the external reranker was bypassed, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker_fallback: Option<String>,
}

// ---------------------------------------------------------------------------
// external reranker

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCandidate {
    pub id: String,
    pub description: String,
    pub created_at: DateTime<Utc>,
    pub version: u32,
    pub subjects: Vec<String>,
    pub styles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalRerankRequest {
    pub query: String,
    pub intent: UserIntent,
    pub candidates: Vec<ExternalCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalRerankResponse {
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
}

/// Transport to an external reranking service.
pub trait RerankClient: Send + Sync {
    fn rerank(
        &self,
        request: &ExternalRerankRequest,
    ) -> std::result::Result<ExternalRerankResponse, String>;
}

fn validate_response(
    request: &ExternalRerankRequest,
    resp: &ExternalRerankResponse,
) -> std::result::Result<(), String> {
    let expected: BTreeSet<&str> = request.candidates.iter().map(|c| c.id.as_str()).collect();
    let got: BTreeSet<&str> = resp.ranking.iter().map(String::as_str).collect();
    if resp.ranking.len() != request.candidates.len() || got != expected {
        return Err("ranking is not a permutation of the candidate ids".into());
    }
    if resp.scores.len() != resp.ranking.len() {
        return Err(format!(
            "{} scores for {} ranked ids",
            resp.scores.len(),
            resp.ranking.len()
        ));
    }
    if let Some(bad) = resp
        .scores
        .iter()
        .find(|s| !s.is_finite() || !(0.0..=1.0).contains(*s))
    {
        return Err(format!("score {bad} outside [0, 1]"));
    }
    Ok(())
}

pub fn external_request(
    prompt: &str,
    candidates: &CandidateSet,
    intent: &UserIntent,
    repo: &Repository,
) -> Result<ExternalRerankRequest> {
    let candidates = candidates
        .candidates
        .iter()
        .map(|c| {
            let r = repo.get(&c.checkpoint_id)?;
            Ok(ExternalCandidate {
                id: r.id.clone(),
                description: r.description.clone(),
                created_at: r.created_at,
                version: r.version,
                subjects: r.subjects.clone(),
                styles: r.styles.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExternalRerankRequest {
        query: prompt.to_string(),
        intent: intent.clone(),
        candidates,
    })
}

/// Result of a rerank pass: the scored order plus the reason a fallback to
/// the rule-based scorer happened, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Reranked {
    pub scored: Vec<ScoredCandidate>,
    pub fallback: Option<String>,
}

/// Reranks through `client`, keeping its order verbatim. Transport errors
/// and malformed payloads fall back to the rule-based scorer.
pub fn external_rerank(
    prompt: &str,
    candidates: &CandidateSet,
    intent: &UserIntent,
    repo: &Repository,
    client: &dyn RerankClient,
    weights: &RerankWeights,
) -> Result<Reranked> {
    let request = external_request(prompt, candidates, intent, repo)?;
    let failure = match client.rerank(&request) {
        Ok(resp) => match validate_response(&request, &resp) {
            Ok(()) => {
                let scored = resp
                    .ranking
                    .into_iter()
                    .zip(resp.scores)
                    .map(|(id, score)| ScoredCandidate {
                        checkpoint_id: id,
                        score,
                        components: None,
                    })
                    .collect();
                return Ok(Reranked {
                    scored,
                    fallback: None,
                });
            }
            Err(e) => format!("invalid reranker payload: {e}"),
        },
        Err(e) => format!("reranker transport error: {e}"),
    };
    Ok(Reranked {
        scored: rerank(candidates, intent, repo, weights)?,
        fallback: Some(failure),
    })
}

/// Scripted clients for tests and offline runs.
#[derive(Clone, Debug)]
pub enum MockRerankClient {
    /// Returns the rule-based order and scores.
    EchoRuleBased(RerankWeights),
    /// Returns the rule-based order reversed, scores descending.
    Reversed(RerankWeights),
    /// Returns a fixed payload regardless of input.
    Fixed(ExternalRerankResponse),
    /// Always fails at the transport level.
    Failing(String),
}

impl MockRerankClient {
    fn rule_based(request: &ExternalRerankRequest, weights: &RerankWeights) -> Vec<(String, f64)> {
        let dim = crate::registry::DEFAULT_EMBEDDING_DIM;
        let repo = Repository::from_records(
            dim,
            request.candidates.iter().map(|c| CheckpointRecord {
                id: c.id.clone(),
                triggers: vec!["<mock>".into()],
                subjects: c.subjects.clone(),
                styles: c.styles.clone(),
                description: c.description.clone(),
                created_at: c.created_at,
                version: c.version,
                embedding: embed_text(&c.description, dim),
                weight_bytes: 0,
            }),
        )
        .expect("candidate ids are unique");
        let set = CandidateSet {
            query: request.query.clone(),
            candidates: request
                .candidates
                .iter()
                .map(|c| crate::retrieval::RankedCandidate {
                    checkpoint_id: c.id.clone(),
                    dense_rank: 1,
                    sparse_rank: 1,
                    dense_score: 0.0,
                    sparse_score: 0.0,
                    rrf_score: 0.0,
                })
                .collect(),
        };
        rerank(&set, &request.intent, &repo, weights)
            .expect("ids come from the request")
            .into_iter()
            .map(|s| (s.checkpoint_id, s.score))
            .collect()
    }
}

impl RerankClient for MockRerankClient {
    fn rerank(
        &self,
        request: &ExternalRerankRequest,
    ) -> std::result::Result<ExternalRerankResponse, String> {
        match self {
            MockRerankClient::EchoRuleBased(w) => {
                let (ranking, scores) = Self::rule_based(request, w).into_iter().unzip();
                Ok(ExternalRerankResponse { ranking, scores })
            }
            MockRerankClient::Reversed(w) => {
                let ordered = Self::rule_based(request, w);
                let mut scores: Vec<f64> = ordered.iter().map(|x| x.1).collect();
                let ranking = ordered.into_iter().rev().map(|x| x.0).collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                Ok(ExternalRerankResponse { ranking, scores })
            }
            MockRerankClient::Fixed(resp) => Ok(resp.clone()),
            MockRerankClient::Failing(msg) => Err(msg.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// the select / clarify loop

/// Which scorer orders the retrieved candidates.
#[derive(Clone, Copy)]
pub enum RerankerChoice<'a> {
    RuleBased,
    /// Fused retrieval order kept as-is (reasoning disabled).
    RetrievalOrder,
    External(&'a dyn RerankClient),
}

impl std::fmt::Debug for RerankerChoice<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RerankerChoice::RuleBased => "RuleBased",
            RerankerChoice::RetrievalOrder => "RetrievalOrder",
            RerankerChoice::External(_) => "External",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub top_k: usize,
    pub weights: RerankWeights,
    pub thresholds: Thresholds,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            top_k: crate::retrieval::DEFAULT_TOP_K,
            weights: RerankWeights::default(),
            thresholds: Thresholds::default(),
        }
    }
}

/// Everything needed to continue a selection across clarification turns.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState {
    pub prompt: String,
    pub intent: IntentRecord,
    pub candidates: CandidateSet,
    pub asked: Vec<Attribute>,
    pub pending: Option<ClarificationQuestion>,
}

impl SelectionState {
    pub fn new(prompt: &str, intent: IntentRecord, candidates: CandidateSet) -> Self {
        SelectionState {
            prompt: prompt.to_string(),
            intent,
            candidates,
            asked: Vec::new(),
            pending: None,
        }
    }

    /// Parses the prompt and retrieves candidates from `repo` (or from the
    /// given pool of ids).
    pub fn start(
        prompt: &str,
        repo: &Repository,
        pool: Option<&[String]>,
        defaults: &SystemContext,
        config: &SelectionConfig,
    ) -> Result<Self> {
        let intent = parse_intent(prompt, &repo.vocabulary(), defaults);
        let index = match pool {
            Some(ids) => crate::retrieval::RetrievalIndex::over_pool(repo, ids)?,
            None => crate::retrieval::RetrievalIndex::over_repository(repo),
        };
        let candidates = index.retrieve(prompt, config.top_k);
        Ok(SelectionState::new(prompt, intent, candidates))
    }

    /// Reranks the current candidates under the current intent and decides.
    /// A clarification becomes the pending question.
    pub fn evaluate(
        &mut self,
        repo: &Repository,
        config: &SelectionConfig,
        reranker: RerankerChoice<'_>,
    ) -> Result<SelectionOutcome> {
        let user = &self.intent.user;
        let reranked = match reranker {
            RerankerChoice::RuleBased => Reranked {
                scored: rerank(&self.candidates, user, repo, &config.weights)?,
                fallback: None,
            },
            RerankerChoice::RetrievalOrder => Reranked {
                scored: retrieval_order(&self.candidates),
                fallback: None,
            },
            RerankerChoice::External(client) => external_rerank(
                &self.prompt,
                &self.candidates,
                user,
                repo,
                client,
                &config.weights,
            )?,
        };
        let decision = decide(
            &reranked.scored,
            user,
            &self.asked,
            repo,
            &config.thresholds,
        )?;
        let mut outcome = SelectionOutcome {
            scores: reranked.scored,
            reranker_fallback: reranked.fallback,
            ..SelectionOutcome::default()
        };
        self.pending = None;
        match decision {
            Decision::Selected(id) => {
                let record = repo.get(&id)?;
                outcome.status = SelectionStatus::Selected;
                outcome.rewritten_prompt = Some(rewrite_prompt(&self.prompt, record));
                outcome.selected_id = Some(id);
            }
            Decision::Clarify(q) => {
                outcome.status = SelectionStatus::NeedsClarification;
                self.pending = Some(q.clone());
                outcome.question = Some(q);
            }
            Decision::NoMatch => outcome.status = SelectionStatus::NoMatch,
        }
        Ok(outcome)
    }

    /// Folds the chosen option into the intent record and re-evaluates the
    /// same candidate set. The answered attribute is never asked again.
    pub fn apply_answer(
        &mut self,
        option: &str,
        repo: &Repository,
        config: &SelectionConfig,
        reranker: RerankerChoice<'_>,
    ) -> Result<SelectionOutcome> {
        let question = self.pending.as_ref().ok_or(Error::NoPendingQuestion)?;
        let Some(members) = question.partition_of(option) else {
            return Err(Error::UnknownOption {
                option: option.to_string(),
                valid: question.options.clone(),
            });
        };
        let exemplar = repo.get(&members[0])?;
        let attr = question.attribute;
        let user = &mut self.intent.user;
        match attr {
            Attribute::Subject => {
                user.subject_terms = lower_set(&exemplar.subjects).into_iter().collect()
            }
            Attribute::Style => {
                user.style_terms = lower_set(&exemplar.styles).into_iter().collect()
            }
            Attribute::Recency => {
                user.version_cue = None;
                user.recency_cue = if option == MOST_RECENT_OPTION {
                    RecencyCue::RecentlyCreated
                } else {
                    RecencyCue::Oldest
                };
            }
        }
        self.asked.push(attr);
        self.evaluate(repo, config, reranker)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedCandidate;
    use chrono::{Duration, TimeZone};

    fn rec(
        id: &str,
        subjects: &[&str],
        styles: &[&str],
        day: i64,
        version: u32,
    ) -> CheckpointRecord {
        let description = format!("a {} {}", styles.join(" "), subjects.join(" "));
        CheckpointRecord {
            id: id.into(),
            triggers: vec![format!("<{id}>")],
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
            styles: styles.iter().map(|s| s.to_string()).collect(),
            embedding: embed_text(&description, 64),
            description,
            created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::days(day),
            version,
            weight_bytes: 4 << 30,
        }
    }

    fn set(ids: &[&str]) -> CandidateSet {
        CandidateSet {
            query: String::new(),
            candidates: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedCandidate {
                    checkpoint_id: id.to_string(),
                    dense_rank: i + 1,
                    sparse_rank: i + 1,
                    dense_score: 0.0,
                    sparse_score: 0.0,
                    rrf_score: 2.0 / (60.0 + (i + 1) as f64),
                })
                .collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary {
            subjects: ["bear", "cat", "toy", "dog"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            styles: ["realistic", "stuffed-toy", "anime"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    #[test]
    fn parse_running_example() {
        let i = parse_intent(
            "my most realistic, recently created bear on forest grass",
            &vocab(),
            &SystemContext::default(),
        );
        assert_eq!(i.user.subject_terms, vec!["bear"]);
        assert_eq!(i.user.style_terms, vec!["realistic"]);
        assert_eq!(i.user.recency_cue, RecencyCue::RecentlyCreated);
        assert_eq!(i.user.version_cue, None);
        assert_eq!(i.system_context, SystemContext::default());
    }

    #[test]
    fn parse_edge_cases() {
        let empty = parse_intent("a photo", &vocab(), &SystemContext::default());
        assert_eq!(empty.user, UserIntent::default());
        let v = parse_intent("cat v12 drawing", &vocab(), &SystemContext::default());
        assert_eq!(v.user.subject_terms, vec!["cat"]);
        assert_eq!(v.user.version_cue, Some(VersionCue::Explicit(12)));
        let v = parse_intent("the dog, version 7", &vocab(), &SystemContext::default());
        assert_eq!(v.user.version_cue, Some(VersionCue::Explicit(7)));
        let latest = parse_intent(
            "latest version of my cat",
            &vocab(),
            &SystemContext::default(),
        );
        assert_eq!(latest.user.version_cue, Some(VersionCue::Latest));
        assert_eq!(latest.user.recency_cue, RecencyCue::RecentlyCreated);
        let old = parse_intent("the first anime dog", &vocab(), &SystemContext::default());
        assert_eq!(old.user.recency_cue, RecencyCue::Oldest);
        let toy = parse_intent("a stuffed toy bear", &vocab(), &SystemContext::default());
        assert_eq!(toy.user.style_terms, vec!["stuffed-toy"]);
        assert_eq!(
            toy.user.subject_terms,
            vec!["bear"],
            "toy consumed by the style phrase"
        );
    }

    #[test]
    fn rerank_single_candidate() {
        let repo =
            Repository::from_records(64, [rec("a", &["bear"], &["realistic"], 0, 1)]).unwrap();
        let intent = UserIntent {
            subject_terms: vec!["bear".into()],
            ..UserIntent::default()
        };
        let s = rerank(&set(&["a"]), &intent, &repo, &RerankWeights::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].score > 0.35);
    }

    #[test]
    fn rerank_prefers_newer_under_recency_cue() {
        let repo = Repository::from_records(
            64,
            [
                rec("old", &["bear"], &["realistic"], 0, 1),
                rec("new", &["bear"], &["realistic"], 5, 2),
            ],
        )
        .unwrap();
        let intent = UserIntent {
            subject_terms: vec!["bear".into()],
            recency_cue: RecencyCue::RecentlyCreated,
            ..UserIntent::default()
        };
        let s = rerank(
            &set(&["old", "new"]),
            &intent,
            &repo,
            &RerankWeights::default(),
        )
        .unwrap();
        assert_eq!(s[0].checkpoint_id, "new");
        assert!((s[0].score - s[1].score - 0.15).abs() < 1e-12);
    }

    #[test]
    fn subject_outweighs_style() {
        let repo = Repository::from_records(
            64,
            [
                rec("subj", &["bear"], &["anime"], 0, 1),
                rec("styl", &["cat"], &["realistic"], 0, 1),
            ],
        )
        .unwrap();
        let intent = UserIntent {
            subject_terms: vec!["bear".into()],
            style_terms: vec!["realistic".into()],
            ..UserIntent::default()
        };
        let s = rerank(
            &set(&["styl", "subj"]),
            &intent,
            &repo,
            &RerankWeights::default(),
        )
        .unwrap();
        assert_eq!(s[0].checkpoint_id, "subj");
    }

    #[test]
    fn time_ranks_average_ties() {
        let t = |d| Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::days(d);
        assert_eq!(
            normalized_time_ranks(&[t(2), t(0), t(2)]),
            vec![0.75, 0.0, 0.75]
        );
        assert_eq!(normalized_time_ranks(&[t(0)]), vec![1.0]);
    }

    fn sc(id: &str, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            checkpoint_id: id.into(),
            score,
            components: None,
        }
    }

    fn bears() -> Repository {
        Repository::from_records(
            64,
            [
                rec("teddy", &["bear"], &["stuffed-toy"], 3, 3),
                rec("grizzly", &["bear"], &["realistic"], 4, 4),
                rec("cat", &["cat"], &["anime"], 1, 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn decide_basic_cases() {
        let repo = bears();
        let intent = UserIntent::default();
        let t = Thresholds::default();
        assert_eq!(
            decide(&[], &intent, &[], &repo, &t).unwrap(),
            Decision::NoMatch
        );
        assert_eq!(
            decide(&[sc("teddy", 0.9), sc("cat", 0.4)], &intent, &[], &repo, &t).unwrap(),
            Decision::Selected("teddy".into())
        );
        assert_eq!(
            decide(&[sc("teddy", 0.2)], &intent, &[], &repo, &t).unwrap(),
            Decision::NoMatch
        );
    }

    #[test]
    fn decide_asks_about_style_for_the_bears() {
        let repo = bears();
        let scored = [sc("grizzly", 0.62), sc("teddy", 0.60), sc("cat", 0.1)];
        match decide(
            &scored,
            &UserIntent::default(),
            &[],
            &repo,
            &Thresholds::default(),
        )
        .unwrap()
        {
            Decision::Clarify(q) => {
                assert_eq!(q.attribute, Attribute::Style);
                assert_eq!(q.options, vec!["realistic", "stuffed toy"]);
                assert_eq!(q.candidate_partition, vec![vec!["grizzly"], vec!["teddy"]]);
            }
            other => panic!("expected clarification, got {other:?}"),
        }
    }

    #[test]
    fn clarify_loop_resolves_the_bears() {
        let repo = bears();
        let config = SelectionConfig::default();
        let mut state = SelectionState::start(
            "my bear on forest grass",
            &repo,
            None,
            &SystemContext::default(),
            &config,
        )
        .unwrap();
        let first = state
            .evaluate(&repo, &config, RerankerChoice::RuleBased)
            .unwrap();
        assert_eq!(first.status, SelectionStatus::NeedsClarification);
        let q = first.question.unwrap();
        assert_eq!(q.attribute, Attribute::Style);
        assert!(q.options.contains(&"stuffed toy".to_string()));

        let err = state
            .clone()
            .apply_answer("purple", &repo, &config, RerankerChoice::RuleBased);
        assert!(matches!(err, Err(Error::UnknownOption { .. })));

        let done = state
            .apply_answer("realistic", &repo, &config, RerankerChoice::RuleBased)
            .unwrap();
        assert_eq!(done.status, SelectionStatus::Selected);
        assert_eq!(done.selected_id.as_deref(), Some("grizzly"));
        assert_eq!(
            done.rewritten_prompt.as_deref(),
            Some("my <grizzly> on forest grass")
        );
        assert!(matches!(
            state.apply_answer("realistic", &repo, &config, RerankerChoice::RuleBased),
            Err(Error::NoPendingQuestion)
        ));
    }

    #[test]
    fn repeated_attribute_is_not_asked_again() {
        let repo = bears();
        let scored = [sc("grizzly", 0.62), sc("teddy", 0.60)];
        let d = decide(
            &scored,
            &UserIntent::default(),
            &[Attribute::Style],
            &repo,
            &Thresholds::default(),
        )
        .unwrap();
        // style already asked; recency still differs
        match d {
            Decision::Clarify(q) => assert_eq!(q.attribute, Attribute::Recency),
            other => panic!("{other:?}"),
        }
        let d = decide(
            &scored,
            &UserIntent::default(),
            &[Attribute::Style, Attribute::Recency],
            &repo,
            &Thresholds::default(),
        )
        .unwrap();
        assert_eq!(d, Decision::Selected("grizzly".into()));
    }

    #[test]
    fn rewrite_examples() {
        let mut r = rec("bear-v4", &["bear"], &["realistic"], 0, 4);
        r.triggers = vec!["<bear-v4>".into()];
        assert_eq!(
            rewrite_prompt(
                "my most realistic, recently created bear on forest grass",
                &r
            ),
            "my most realistic, recently created <bear-v4> on forest grass"
        );
        assert_eq!(
            rewrite_prompt("a picture at dawn", &r),
            "<bear-v4> :: a picture at dawn"
        );
        assert_eq!(
            rewrite_prompt("Bear and bear cub near bears", &r),
            "<bear-v4> and <bear-v4> cub near bears"
        );
        let once = rewrite_prompt("a bear", &r);
        assert_eq!(rewrite_prompt(&once, &r), once);
        let fallback = rewrite_prompt("a sunset", &r);
        assert_eq!(rewrite_prompt(&fallback, &r), fallback);
    }

    #[test]
    fn external_reranker_paths() {
        let repo = bears();
        let cands = set(&["teddy", "grizzly", "cat"]);
        let intent = UserIntent {
            subject_terms: vec!["bear".into()],
            style_terms: vec!["realistic".into()],
            ..UserIntent::default()
        };
        let w = RerankWeights::default();
        let rule = rerank(&cands, &intent, &repo, &w).unwrap();

        let echo = external_rerank(
            "q",
            &cands,
            &intent,
            &repo,
            &MockRerankClient::EchoRuleBased(w),
            &w,
        )
        .unwrap();
        assert!(echo.fallback.is_none());
        assert_eq!(
            echo.scored
                .iter()
                .map(|s| &s.checkpoint_id)
                .collect::<Vec<_>>(),
            rule.iter().map(|s| &s.checkpoint_id).collect::<Vec<_>>()
        );

        let bad = MockRerankClient::Fixed(ExternalRerankResponse {
            ranking: vec!["teddy".into(), "teddy".into(), "cat".into()],
            scores: vec![0.9, 0.8, 0.1],
        });
        let fb = external_rerank("q", &cands, &intent, &repo, &bad, &w).unwrap();
        assert!(fb.fallback.as_deref().unwrap().contains("permutation"));
        assert_eq!(fb.scored, rule);

        let down = MockRerankClient::Failing("connection refused".into());
        let fb = external_rerank("q", &cands, &intent, &repo, &down, &w).unwrap();
        assert!(fb.fallback.unwrap().contains("transport"));

        let rev = external_rerank(
            "q",
            &cands,
            &intent,
            &repo,
            &MockRerankClient::Reversed(w),
            &w,
        )
        .unwrap();
        assert_eq!(
            rev.scored[0].checkpoint_id,
            rule.last().unwrap().checkpoint_id
        );
    }

    #[test]
    fn system_context_does_not_move_scores() {
        let repo = bears();
        let config = SelectionConfig::default();
        let a = SystemContext::default();
        let b = SystemContext {
            quant_preset: "W4A4".parse().unwrap(),
            memory_budget_bytes: 1,
        };
        let run = |ctx: &SystemContext| {
            let mut s =
                SelectionState::start("a realistic bear", &repo, None, ctx, &config).unwrap();
            s.evaluate(&repo, &config, RerankerChoice::RuleBased)
                .unwrap()
        };
        assert_eq!(run(&a), run(&b));
    }
}
