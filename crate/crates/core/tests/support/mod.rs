//! Generators and brute-force oracles shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use chrono::{Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trigserve::attention::AttentionBundle;
use trigserve::numerics::{cosine, Matrix};
use trigserve::registry::{checkpoint_card, embed_text, CheckpointRecord, Repository};
use trigserve::retrieval::{bm25_score, Bm25Params, CorpusStats, RRF_KAPPA};

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Bundle with N, T, d in 1..=16 and a random (possibly empty) trigger set.
pub fn random_bundle(seed: u64) -> AttentionBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=16);
    let t = rng.random_range(1..=16);
    let d = rng.random_range(1..=16);
    let triggers: Vec<usize> = (0..t).filter(|_| rng.random_bool(0.25)).collect();
    AttentionBundle::new(
        random_matrix(&mut rng, n, d, 2.0),
        random_matrix(&mut rng, t, d, 2.0),
        random_matrix(&mut rng, t, d, 2.0),
        triggers,
    )
    .unwrap()
}

const SUBJECTS: [&str; 6] = ["bear", "cat", "dog", "car", "tree", "shoe"];
const STYLES: [&str; 5] = ["realistic", "anime", "plush", "sketch", "watercolor"];
const FILLER: [&str; 6] = ["my", "on", "grass", "brown", "small", "old"];

/// A repository of at most 20 records with overlapping subjects/styles and
/// a query drawn from the same vocabulary.
pub fn random_pool(seed: u64) -> (Repository, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=20);
    let records: Vec<CheckpointRecord> = (0..n)
        .map(|i| {
            let subject = *SUBJECTS.choose(&mut rng).unwrap();
            let style = *STYLES.choose(&mut rng).unwrap();
            let extra = *FILLER.choose(&mut rng).unwrap();
            let description = format!("a {extra} {style} {subject}");
            CheckpointRecord {
                id: format!("r{i:02}"),
                triggers: vec![format!("<r{i:02}>")],
                subjects: vec![subject.into()],
                styles: if rng.random_bool(0.8) {
                    vec![style.into()]
                } else {
                    vec![]
                },
                embedding: embed_text(&description, 32),
                description,
                created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
                    + Duration::days(i as i64),
                version: 1,
                weight_bytes: 1,
            }
        })
        .collect();
    let words: Vec<&str> = SUBJECTS
        .iter()
        .chain(&STYLES)
        .chain(&FILLER)
        .copied()
        .collect();
    let len = rng.random_range(1..=5);
    let query = (0..len)
        .map(|_| *words.choose(&mut rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ");
    (Repository::from_records(32, records).unwrap(), query)
}

/// Scores every record independently, ranks each list with an explicit
/// comparison sort, fuses and truncates. Returns (id, rrf score).
pub fn brute_force_retrieve(repo: &Repository, query: &str, k: usize) -> Vec<(String, f64)> {
    let records: Vec<&CheckpointRecord> = repo.records().collect();
    let cards: Vec<Vec<String>> = records.iter().map(|r| checkpoint_card(r)).collect();
    let stats = CorpusStats::from_cards(cards.iter().map(Vec::as_slice));
    let q_terms = trigserve::text::terms(query);
    let q_vec = embed_text(query, repo.embedding_dim());

    let dense: Vec<f64> = records
        .iter()
        .map(|r| cosine(&q_vec, &r.embedding).unwrap())
        .collect();
    let sparse: Vec<f64> = cards
        .iter()
        .map(|c| bm25_score(&q_terms, c, &stats, Bm25Params::default()))
        .collect();
    let rank_of = |scores: &[f64], i: usize| -> usize {
        // 1 + number of records strictly ahead of i
        1 + (0..records.len())
            .filter(|&j| {
                scores[j] > scores[i] || (scores[j] == scores[i] && records[j].id < records[i].id)
            })
            .count()
    };
    let mut fused: Vec<(String, f64)> = (0..records.len())
        .map(|i| {
            let s = 1.0 / (RRF_KAPPA + rank_of(&dense, i) as f64)
                + 1.0 / (RRF_KAPPA + rank_of(&sparse, i) as f64);
            (records[i].id.clone(), s)
        })
        .collect();
    fused.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    fused.truncate(k);
    fused
}
