//! Hybrid candidate retrieval: Okapi BM25 over checkpoint cards, cosine over
//! description embeddings, fused by reciprocal rank.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Vector};
use crate::par::Execution;
use crate::registry::{checkpoint_card, embed_text, CheckpointRecord, Repository};
use crate::text::terms;

pub const RRF_KAPPA: f64 = 60.0;
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Document frequencies and length statistics over a card corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub avg_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_cards<'a>(cards: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut stats = CorpusStats::default();
        let mut total = 0usize;
        for card in cards {
            stats.num_docs += 1;
            total += card.len();
            let unique: BTreeSet<&String> = card.iter().collect();
            for t in unique {
                *stats.doc_freq.entry(t.clone()).or_default() += 1;
            }
        }
        if stats.num_docs > 0 {
            stats.avg_len = total as f64 / stats.num_docs as f64;
        }
        stats
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of a card against the distinct query terms.
pub fn bm25_score(
    query: &[String],
    card: &[String],
    stats: &CorpusStats,
    params: Bm25Params,
) -> f64 {
    let len_norm = if stats.avg_len > 0.0 {
        card.len() as f64 / stats.avg_len
    } else {
        1.0
    };
    let distinct: BTreeSet<&String> = query.iter().collect();
    distinct
        .into_iter()
        .map(|term| {
            let tf = card.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                return 0.0;
            }
            let denom = tf + params.k1 * (1.0 - params.b + params.b * len_norm);
            stats.idf(term) * tf * (params.k1 + 1.0) / denom
        })
        .sum()
}

pub fn dense_score(query: &str, record: &CheckpointRecord) -> f64 {
    let q = embed_text(query, record.embedding.dim());
    cosine(&q, &record.embedding).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub checkpoint_id: String,
    pub dense_rank: usize,
    pub sparse_rank: usize,
    pub dense_score: f64,
    pub sparse_score: f64,
    pub rrf_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: String,
    pub candidates: Vec<RankedCandidate>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<&str> {
        self.candidates
            .iter()
            .map(|c| c.checkpoint_id.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

pub fn rrf_term(rank: usize, kappa: f64) -> f64 {
    1.0 / (kappa + rank as f64)
}

/// Score-descending order with ascending id as the tiebreak.
pub(crate) fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Ranks ids by score (1-based), ties broken by ascending id.
pub fn rank_by_score(scored: &[(String, f64)]) -> Vec<String> {
    let mut v: Vec<&(String, f64)> = scored.iter().collect();
    v.sort_by(|a, b| by_score_then_id((a.1, &a.0), (b.1, &b.0)));
    v.into_iter().map(|(id, _)| id.clone()).collect()
}

/// Fuses two rankings (best first) into `(id, score)` pairs sorted by
/// descending fused score, ties by ascending id.
pub fn rrf_fuse(dense: &[String], sparse: &[String], kappa: f64) -> Result<Vec<(String, f64)>> {
    let sparse_pos: HashMap<&str, usize> = sparse
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i + 1))
        .collect();
    if dense.len() != sparse.len() || sparse_pos.len() != sparse.len() {
        return Err(Error::IdSetMismatch);
    }
    let mut fused = Vec::with_capacity(dense.len());
    for (i, id) in dense.iter().enumerate() {
        let s = *sparse_pos.get(id.as_str()).ok_or(Error::IdSetMismatch)?;
        fused.push((id.clone(), rrf_term(i + 1, kappa) + rrf_term(s, kappa)));
    }
    fused.sort_by(|a, b| by_score_then_id((a.1, &a.0), (b.1, &b.0)));
    Ok(fused)
}

/// A retrieval index over a fixed pool of records from one snapshot.
pub struct RetrievalIndex<'a> {
    records: Vec<&'a CheckpointRecord>,
    cards: Vec<Vec<String>>,
    stats: CorpusStats,
    params: Bm25Params,
    kappa: f64,
}

impl<'a> RetrievalIndex<'a> {
    pub fn new(records: Vec<&'a CheckpointRecord>) -> Self {
        let cards: Vec<Vec<String>> = records.iter().map(|r| checkpoint_card(r)).collect();
        let stats = CorpusStats::from_cards(cards.iter().map(Vec::as_slice));
        RetrievalIndex {
            records,
            cards,
            stats,
            params: Bm25Params::default(),
            kappa: RRF_KAPPA,
        }
    }

    pub fn over_repository(repo: &'a Repository) -> Self {
        RetrievalIndex::new(repo.records().collect())
    }

    /// Index over a subset of a repository; unknown ids are an error.
    pub fn over_pool(repo: &'a Repository, ids: &[String]) -> Result<Self> {
        let mut records = Vec::with_capacity(ids.len());
        for id in ids {
            records.push(repo.get(id)?);
        }
        Ok(RetrievalIndex::new(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn retrieve(&self, query: &str, k: usize) -> CandidateSet {
        self.retrieve_with(query, k, Execution::default())
    }

    pub fn retrieve_with(&self, query: &str, k: usize, exec: Execution) -> CandidateSet {
        if self.records.is_empty() {
            return CandidateSet {
                query: query.to_string(),
                candidates: Vec::new(),
            };
        }
        let q_terms = terms(query);
        let dim = self.records[0].embedding.dim();
        let q_vec: Vector = embed_text(query, dim);
        let scores: Vec<(f64, f64)> = exec.map_range(self.records.len(), |i| {
            let dense = cosine(&q_vec, &self.records[i].embedding).unwrap_or(0.0);
            let sparse = bm25_score(&q_terms, &self.cards[i], &self.stats, self.params);
            (dense, sparse)
        });

        let ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        let ranks = |pick: fn(&(f64, f64)) -> f64| {
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.sort_by(|&a, &b| {
                by_score_then_id((pick(&scores[a]), ids[a]), (pick(&scores[b]), ids[b]))
            });
            let mut rank = vec![0usize; ids.len()];
            for (pos, i) in order.into_iter().enumerate() {
                rank[i] = pos + 1;
            }
            rank
        };
        let dense_rank = ranks(|s| s.0);
        let sparse_rank = ranks(|s| s.1);

        let mut candidates: Vec<RankedCandidate> = (0..ids.len())
            .map(|i| RankedCandidate {
                checkpoint_id: ids[i].to_string(),
                dense_rank: dense_rank[i],
                sparse_rank: sparse_rank[i],
                dense_score: scores[i].0,
                sparse_score: scores[i].1,
                rrf_score: rrf_term(dense_rank[i], self.kappa)
                    + rrf_term(sparse_rank[i], self.kappa),
            })
            .collect();
        candidates.sort_by(|a, b| {
            by_score_then_id(
                (a.rrf_score, &a.checkpoint_id),
                (b.rrf_score, &b.checkpoint_id),
            )
        });
        candidates.truncate(k.min(ids.len()));
        CandidateSet {
            query: query.to_string(),
            candidates,
        }
    }
}

/// Retrieves the top-`k` candidates for `query` over the whole repository.
pub fn retrieve(query: &str, repo: &Repository, k: usize) -> CandidateSet {
    RetrievalIndex::over_repository(repo).retrieve(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::CheckpointRecord;
    use chrono::{TimeZone, Utc};

    fn rec(id: &str, subjects: &[&str], styles: &[&str], description: &str) -> CheckpointRecord {
        CheckpointRecord {
            id: id.into(),
            triggers: vec![format!("<{id}>")],
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
            styles: styles.iter().map(|s| s.to_string()).collect(),
            description: description.into(),
            created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
            version: 1,
            embedding: embed_text(description, 32),
            weight_bytes: 0,
        }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bm25_no_overlap_is_zero() {
        let cards = [s(&["bear", "realistic"])];
        let stats = CorpusStats::from_cards(cards.iter().map(Vec::as_slice));
        assert_eq!(
            bm25_score(&s(&["cat"]), &cards[0], &stats, Bm25Params::default()),
            0.0
        );
    }

    #[test]
    fn bm25_single_doc_hand_value() {
        let cards = [s(&["bear", "realistic"])];
        let stats = CorpusStats::from_cards(cards.iter().map(Vec::as_slice));
        // N=1, df=1: idf = ln(0.5/1.5 + 1); tf=1 and |d| = avgdl, so the tf
        // factor is (k1+1)/(1+k1) = 1
        let expected = (0.5f64 / 1.5 + 1.0).ln();
        let got = bm25_score(&s(&["bear"]), &cards[0], &stats, Bm25Params::default());
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn bm25_ubiquitous_term_has_small_positive_idf() {
        let cards = [
            s(&["bear"]),
            s(&["bear", "anime"]),
            s(&["bear", "realistic"]),
        ];
        let stats = CorpusStats::from_cards(cards.iter().map(Vec::as_slice));
        let idf = stats.idf("bear");
        assert!((idf - (1.0 + 0.5 / 3.5f64).ln()).abs() < 1e-15);
        assert!(idf > 0.0);
    }

    #[test]
    fn dense_examples() {
        let r = rec("a", &["bear"], &[], "a realistic brown bear");
        assert!((dense_score("a realistic brown bear", &r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rrf_hand_values() {
        let dense = s(&["a", "b", "c"]);
        let sparse = s(&["b", "c", "a"]);
        let fused = rrf_fuse(&dense, &sparse, RRF_KAPPA).unwrap();
        let a = fused.iter().find(|(id, _)| id == "a").unwrap().1;
        assert!((a - (1.0 / 61.0 + 1.0 / 63.0)).abs() < 1e-12);
        assert!((a - 0.03226646).abs() < 1e-8);

        let same = rrf_fuse(&dense, &dense, RRF_KAPPA).unwrap();
        assert_eq!(same.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), dense);

        assert!(rrf_fuse(&dense, &s(&["a", "b", "d"]), RRF_KAPPA).is_err());
        assert!(rrf_fuse(&dense, &s(&["a", "b"]), RRF_KAPPA).is_err());
    }

    #[test]
    fn consistent_item_beats_polarised_item() {
        // 10-item pool: x is 1st dense and last sparse, y is 2nd in both
        let others: Vec<String> = (0..8).map(|i| format!("i{i}")).collect();
        let mut dense = s(&["x", "y"]);
        dense.extend(others.iter().cloned());
        let mut sparse = vec![others[0].clone(), "y".to_string()];
        sparse.extend(others[1..].iter().cloned());
        sparse.push("x".to_string());
        let fused = rrf_fuse(&dense, &sparse, RRF_KAPPA).unwrap();
        let score = |id: &str| fused.iter().find(|(i, _)| i == id).unwrap().1;
        assert!((score("x") - (1.0 / 61.0 + 1.0 / 70.0)).abs() < 1e-15);
        assert!((score("y") - 2.0 / 62.0).abs() < 1e-15);
        assert!(score("y") > score("x"));
    }

    #[test]
    fn retrieve_small_cases() {
        let repo = Repository::from_records(
            32,
            [rec("solo", &["bear"], &["realistic"], "realistic bear")],
        )
        .unwrap();
        let set = retrieve("bear", &repo, 10);
        assert_eq!(set.len(), 1);
        let c = &set.candidates[0];
        assert_eq!((c.dense_rank, c.sparse_rank), (1, 1));
        assert!((c.rrf_score - 2.0 / 61.0).abs() < 1e-15);

        let empty = Repository::new(32);
        assert!(retrieve("bear", &empty, 10).is_empty());

        let repo = Repository::from_records(
            32,
            [
                rec("a", &["bear"], &["realistic"], "realistic bear"),
                rec("b", &["cat"], &["anime"], "anime cat"),
                rec("c", &["bear"], &["anime"], "anime bear"),
            ],
        )
        .unwrap();
        let all = retrieve("anime bear", &repo, 10);
        assert_eq!(all.len(), 3);
        assert_eq!(all.candidates[0].checkpoint_id, "c");
        let top2 = retrieve("anime bear", &repo, 2);
        assert_eq!(top2.candidates[..], all.candidates[..2]);
    }

    #[test]
    fn pool_rejects_unknown_ids() {
        let repo = Repository::from_records(32, [rec("a", &["bear"], &[], "bear")]).unwrap();
        assert!(RetrievalIndex::over_pool(&repo, &s(&["a", "zz"])).is_err());
    }
}
