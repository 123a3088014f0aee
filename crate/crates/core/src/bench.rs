//! Benchmark harness: runs the selection pipeline over Repo-Prompts
//! instances with a scripted user that answers from ground truth.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par::Execution;
use crate::registry::{Repository, Vocabulary};
use crate::retrieval::{rrf_term, CandidateSet, RankedCandidate, RetrievalIndex, RRF_KAPPA};
use crate::selection::{
    parse_intent, Attribute, ClarificationQuestion, RerankerChoice, SelectionConfig,
    SelectionState, SelectionStatus, SystemContext,
};
use crate::synth::{CandidatePool, RepoPromptInstance, Split};
use crate::text::fnv1a64;

/// Clarification rounds allowed per instance.
pub const MAX_ROUNDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub retrieval_on: bool,
    pub reasoning_on: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            retrieval_on: true,
            reasoning_on: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BenchConfig {
    pub ablation: AblationConfig,
    pub selection: SelectionConfig,
    /// Seeds candidate sampling when retrieval is off.
    pub seed: u64,
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance_id: String,
    pub split: Split,
    pub ground_truth_id: Option<String>,
    pub first_status: SelectionStatus,
    pub final_status: SelectionStatus,
    pub selected_id: Option<String>,
    /// User messages: the prompt plus one per answer.
    pub turns: usize,
    pub asked: Vec<Attribute>,
}

impl InstanceResult {
    pub fn asked_first(&self) -> bool {
        self.first_status == SelectionStatus::NeedsClarification
    }

    pub fn correct(&self) -> bool {
        match self.split {
            Split::NoMatch => self.final_status == SelectionStatus::NoMatch,
            _ => {
                self.final_status == SelectionStatus::Selected
                    && self.selected_id == self.ground_truth_id
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub single: usize,
    pub ambiguous: usize,
    pub no_match: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: SplitCounts,
    /// Rates are `None` when their denominator is zero.
    pub top1_accuracy_single: Option<f64>,
    pub clarification_precision: Option<f64>,
    pub clarification_recall: Option<f64>,
    pub no_match_accuracy: Option<f64>,
    /// Ambiguous instances ending on the intended checkpoint.
    pub ambiguous_resolution_accuracy: Option<f64>,
    pub mean_turns: Option<f64>,
    pub ablation_config: AblationConfig,
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

impl BenchReport {
    /// Recomputes every rate from a per-instance log.
    pub fn from_log(log: &[InstanceResult], ablation: AblationConfig) -> Self {
        let of = |s: Split| log.iter().filter(move |r| r.split == s);
        let n = SplitCounts {
            total: log.len(),
            single: of(Split::Single).count(),
            ambiguous: of(Split::Ambiguous).count(),
            no_match: of(Split::NoMatch).count(),
        };
        let asked = log.iter().filter(|r| r.asked_first()).count();
        let asked_ambiguous = of(Split::Ambiguous).filter(|r| r.asked_first()).count();
        BenchReport {
            top1_accuracy_single: rate(of(Split::Single).filter(|r| r.correct()).count(), n.single),
            clarification_precision: rate(asked_ambiguous, asked),
            clarification_recall: rate(asked_ambiguous, n.ambiguous),
            no_match_accuracy: rate(
                of(Split::NoMatch).filter(|r| r.correct()).count(),
                n.no_match,
            ),
            ambiguous_resolution_accuracy: rate(
                of(Split::Ambiguous).filter(|r| r.correct()).count(),
                n.ambiguous,
            ),
            mean_turns: (n.total > 0)
                .then(|| log.iter().map(|r| r.turns).sum::<usize>() as f64 / n.total as f64),
            n,
            ablation_config: ablation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub report: BenchReport,
    pub log: Vec<InstanceResult>,
}

/// The option a user who wants `target` would pick: the one whose
/// partition holds it, else the first.
pub fn oracle_answer<'q>(question: &'q ClarificationQuestion, target: Option<&str>) -> &'q str {
    target
        .and_then(|t| {
            question
                .candidate_partition
                .iter()
                .position(|ids| ids.iter().any(|id| id == t))
        })
        .map_or(&question.options[0], |i| &question.options[i])
}

fn pool_ids(repo: &Repository, pool: &CandidatePool) -> Vec<String> {
    match pool {
        CandidatePool::All => repo.records().map(|r| r.id.clone()).collect(),
        CandidatePool::Ids(ids) => ids.clone(),
    }
}

/// `k` ids drawn from the pool, in draw order, scored as if both
/// retrievers had ranked them that way.
fn sampled_candidates(query: &str, ids: &[String], k: usize, seed: u64) -> CandidateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = ids
        .choose_multiple(&mut rng, k.min(ids.len()))
        .enumerate()
        .map(|(i, id)| RankedCandidate {
            checkpoint_id: id.clone(),
            dense_rank: i + 1,
            sparse_rank: i + 1,
            dense_score: 0.0,
            sparse_score: 0.0,
            rrf_score: 2.0 * rrf_term(i + 1, RRF_KAPPA),
        })
        .collect();
    CandidateSet {
        query: query.to_string(),
        candidates,
    }
}

fn run_instance(
    inst: &RepoPromptInstance,
    repo: &Repository,
    full_index: &RetrievalIndex<'_>,
    vocab: &Vocabulary,
    config: &BenchConfig,
) -> Result<InstanceResult> {
    let sel = &config.selection;
    let candidates = if config.ablation.retrieval_on {
        match &inst.candidate_pool {
            CandidatePool::All => {
                full_index.retrieve_with(&inst.query, sel.top_k, Execution::Sequential)
            }
            CandidatePool::Ids(ids) => RetrievalIndex::over_pool(repo, ids)?.retrieve_with(
                &inst.query,
                sel.top_k,
                Execution::Sequential,
            ),
        }
    } else {
        let seed = config.seed ^ fnv1a64(inst.instance_id.as_bytes());
        sampled_candidates(
            &inst.query,
            &pool_ids(repo, &inst.candidate_pool),
            sel.top_k,
            seed,
        )
    };
    let intent = parse_intent(&inst.query, vocab, &SystemContext::default());
    let mut state = SelectionState::new(&inst.query, intent, candidates);
    let reranker = if config.ablation.reasoning_on {
        RerankerChoice::RuleBased
    } else {
        RerankerChoice::RetrievalOrder
    };

    let mut outcome = state.evaluate(repo, sel, reranker)?;
    let first_status = outcome.status;
    let mut turns = 1;
    while outcome.status == SelectionStatus::NeedsClarification && turns <= MAX_ROUNDS {
        let question = outcome
            .question
            .as_ref()
            .expect("clarification carries a question");
        let answer =
            oracle_answer(question, inst.ground_truth.checkpoint_id.as_deref()).to_string();
        outcome = state.apply_answer(&answer, repo, sel, reranker)?;
        turns += 1;
    }
    Ok(InstanceResult {
        instance_id: inst.instance_id.clone(),
        split: inst.split(),
        ground_truth_id: inst.ground_truth.checkpoint_id.clone(),
        first_status,
        final_status: outcome.status,
        selected_id: outcome.selected_id,
        turns,
        asked: state.asked,
    })
}

/// Runs every instance (in parallel when configured) and reduces the log in
/// instance order.
pub fn run_bench(
    repo: &Repository,
    instances: &[RepoPromptInstance],
    config: &BenchConfig,
) -> Result<BenchOutput> {
    let full_index = RetrievalIndex::over_repository(repo);
    let vocab = repo.vocabulary();
    let log = config
        .execution
        .map(instances, |inst| {
            run_instance(inst, repo, &full_index, &vocab, config)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchOutput {
        report: BenchReport::from_log(&log, config.ablation),
        log,
    })
}

/// Share of ambiguous instances whose first turn asks for clarification.
pub fn ambiguity_self_check(
    repo: &Repository,
    instances: &[RepoPromptInstance],
) -> Result<Option<f64>> {
    let ambiguous: Vec<RepoPromptInstance> = instances
        .iter()
        .filter(|i| i.split() == Split::Ambiguous)
        .cloned()
        .collect();
    let out = run_bench(repo, &ambiguous, &BenchConfig::default())?;
    Ok(out.report.clarification_recall)
}
