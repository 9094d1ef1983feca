//! Ranking evaluation: per-query true ranks over a shared candidate list and
//! the MR / scaled MRR / Recall@k / Precision@k aggregates.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, QuerySet};
use crate::model::{rank_by_score, Model, ModelError};
use crate::taxonomy::{CandidatePosition, ConceptId, Endpoint, Taxonomy};
use crate::tensor::Tensor;

/// Scaled MRR contribution of one rank.
pub const MRR_CONVENTION: &str = "1/ceil(rank/10)";
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query {0} has no ground-truth position in the candidate set")]
    QueryHasNoGroundTruth(ConceptId),
    #[error("no rankings to aggregate")]
    EmptyInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Completion,
    Expansion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: ConceptId,
    pub ranked_positions: Vec<(CandidatePosition, f64)>,
    /// 1-based, sorted ascending.
    pub true_ranks: Vec<usize>,
}

/// Compact per-query result: true ranks and the head of the ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: ConceptId,
    pub true_ranks: Vec<usize>,
    pub top: Vec<(CandidatePosition, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub mrr_convention: String,
    pub mr: f64,
    pub mrr_scaled: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub prec_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_true_positions: usize,
    pub n_candidates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_query_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    pub allow_pseudo_parent: bool,
    /// Length of the ranking head kept per query.
    pub top_n: usize,
    /// Record wall-clock time per query (off for byte-stable reports).
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Completion,
            ks: DEFAULT_KS.to_vec(),
            allow_pseudo_parent: false,
            top_n: 20,
            timing: false,
        }
    }
}

/// 1-based ranks of `truth` within `positions` ordered by descending score,
/// ties broken by position order.
pub fn true_ranks(scores: &[f64], truth_idx: &[usize]) -> Vec<usize> {
    let mut ranks: Vec<usize> = truth_idx
        .iter()
        .map(|&t| {
            let st = scores[t];
            1 + scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > st || (s == st && j < t))
                .count()
        })
        .collect();
    ranks.sort_unstable();
    ranks
}

fn check_nonempty(rankings: &[Vec<usize>]) -> Result<(), EvalError> {
    if rankings.is_empty() || rankings.iter().any(Vec::is_empty) {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Macro average: mean over queries of each query's mean true rank.
pub fn mean_rank(rankings: &[Vec<usize>]) -> Result<f64, EvalError> {
    check_nonempty(rankings)?;
    let per_query: f64 = rankings
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64 / r.len() as f64)
        .sum();
    Ok(per_query / rankings.len() as f64)
}

/// Mean over all true positions of `1 / ceil(rank / 10)`.
pub fn mrr_scaled(rankings: &[Vec<usize>]) -> Result<f64, EvalError> {
    check_nonempty(rankings)?;
    let (sum, n) = rankings.iter().flatten().fold((0.0, 0usize), |(s, n), &r| {
        (s + 1.0 / r.div_ceil(10) as f64, n + 1)
    });
    Ok(sum / n as f64)
}

/// Recall@k and Precision@k for every `k`.
pub fn recall_precision_at_k(
    rankings: &[Vec<usize>],
    ks: &[usize],
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>), EvalError> {
    check_nonempty(rankings)?;
    let total: usize = rankings.iter().map(Vec::len).sum();
    let mut recall = BTreeMap::new();
    let mut prec = BTreeMap::new();
    for &k in ks {
        let hits = rankings.iter().flatten().filter(|&&r| r <= k).count();
        recall.insert(k, hits as f64 / total as f64);
        prec.insert(k, hits as f64 / (rankings.len() * k) as f64);
    }
    Ok((recall, prec))
}

/// Aggregates per-query true ranks into a report.
pub fn aggregate(
    rankings: &[Vec<usize>],
    ks: &[usize],
    mode: EvalMode,
    n_candidates: usize,
) -> Result<MetricsReport, EvalError> {
    let (recall_at, prec_at) = recall_precision_at_k(rankings, ks)?;
    Ok(MetricsReport {
        mode,
        mrr_convention: MRR_CONVENTION.into(),
        mr: mean_rank(rankings)?,
        mrr_scaled: mrr_scaled(rankings)?,
        recall_at,
        prec_at,
        n_queries: rankings.len(),
        n_true_positions: rankings.iter().map(Vec::len).sum(),
        n_candidates,
        avg_query_seconds: None,
    })
}

/// Candidate list for a mode, enumerated once per run.
pub fn candidates_for(
    tax: &Taxonomy,
    mode: EvalMode,
    allow_pseudo_parent: bool,
) -> Vec<CandidatePosition> {
    match mode {
        EvalMode::Completion => tax.enumerate_candidates(allow_pseudo_parent),
        EvalMode::Expansion => tax.expansion_candidates(),
    }
}

/// Ground truth of `query` as seen in `mode`: expansion keeps only the
/// leaf-attachment position under each true parent.
pub fn truth_for(mode: EvalMode, truth: &[CandidatePosition]) -> Vec<CandidatePosition> {
    match mode {
        EvalMode::Completion => truth.to_vec(),
        EvalMode::Expansion => {
            let mut parents: Vec<ConceptId> =
                truth.iter().filter_map(|p| p.parent.concept()).collect();
            parents.sort_unstable();
            parents.dedup();
            parents.into_iter().map(CandidatePosition::leaf).collect()
        }
    }
}

/// Shared candidate list with a position → index map.
pub struct CandidateIndex {
    pub positions: Vec<CandidatePosition>,
    index: HashMap<CandidatePosition, usize>,
}

impl CandidateIndex {
    pub fn new(positions: Vec<CandidatePosition>) -> Self {
        let index = positions.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        CandidateIndex { positions, index }
    }

    pub fn get(&self, p: &CandidatePosition) -> Option<usize> {
        self.index.get(p).copied()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Ranks the candidates for one query. With `exclude_self`, positions
/// touching the query concept are removed first (re-querying a concept that
/// is still in the taxonomy).
pub fn rank_query(
    model: &Model,
    table: &Tensor,
    cands: &CandidateIndex,
    query: ConceptId,
    truth: &[CandidatePosition],
    exclude_self: bool,
) -> Result<QueryRanking, EvalError> {
    let (positions, scores, truth_idx) =
        score_query(model, table, cands, query, truth, exclude_self)?;
    let ranks = true_ranks(&scores, &truth_idx);
    Ok(QueryRanking {
        query,
        ranked_positions: rank_by_score(&positions, &scores),
        true_ranks: ranks,
    })
}

#[allow(clippy::type_complexity)]
fn score_query(
    model: &Model,
    table: &Tensor,
    cands: &CandidateIndex,
    query: ConceptId,
    truth: &[CandidatePosition],
    exclude_self: bool,
) -> Result<(Vec<CandidatePosition>, Vec<f64>, Vec<usize>), EvalError> {
    let (positions, truth_idx) = if exclude_self {
        let positions: Vec<CandidatePosition> = cands
            .positions
            .iter()
            .copied()
            .filter(|p| !p.involves(query))
            .collect();
        let local: HashMap<CandidatePosition, usize> =
            positions.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let idx: Vec<usize> = truth.iter().filter_map(|t| local.get(t).copied()).collect();
        (positions, idx)
    } else {
        (
            cands.positions.clone(),
            truth.iter().filter_map(|t| cands.get(t)).collect(),
        )
    };
    if truth_idx.len() < truth.len() {
        log::warn!(
            "query {query}: {} true positions outside the candidate set",
            truth.len() - truth_idx.len()
        );
    }
    if truth_idx.is_empty() {
        return Err(EvalError::QueryHasNoGroundTruth(query));
    }
    let scores = model.score_positions(table, query, &positions)?;
    Ok((positions, scores, truth_idx))
}

fn run(
    model: &Model,
    table: &Tensor,
    cands: &CandidateIndex,
    items: &[(ConceptId, Vec<CandidatePosition>)],
    exclude_self: bool,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<QueryResult>), EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let start = Instant::now();
    let results: Vec<QueryResult> = items
        .par_iter()
        .map(|(q, truth)| {
            let (positions, scores, truth_idx) =
                score_query(model, table, cands, *q, truth, exclude_self)?;
            let true_ranks = true_ranks(&scores, &truth_idx);
            let mut top = rank_by_score(&positions, &scores);
            top.truncate(opts.top_n);
            Ok(QueryResult {
                query: *q,
                true_ranks,
                top,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let ranks: Vec<Vec<usize>> = results.iter().map(|r| r.true_ranks.clone()).collect();
    let mut report = aggregate(&ranks, &opts.ks, opts.mode, cands.len())?;
    if opts.timing {
        report.avg_query_seconds = Some(elapsed / items.len() as f64);
    }
    Ok((report, results))
}

/// Evaluates `model` on the held-out queries of `split`.
pub fn evaluate(
    model: &Model,
    table: &Tensor,
    split: &DatasetSplit,
    which: QuerySet,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<QueryResult>), EvalError> {
    let cands = CandidateIndex::new(candidates_for(
        &split.seed_taxonomy,
        opts.mode,
        opts.allow_pseudo_parent,
    ));
    evaluate_with(model, table, split, which, opts, &cands)
}

/// As [`evaluate`], reusing a prebuilt candidate index.
pub fn evaluate_with(
    model: &Model,
    table: &Tensor,
    split: &DatasetSplit,
    which: QuerySet,
    opts: &EvalOptions,
    cands: &CandidateIndex,
) -> Result<(MetricsReport, Vec<QueryResult>), EvalError> {
    let items: Vec<(ConceptId, Vec<CandidatePosition>)> = split
        .queries(which)
        .iter()
        .map(|q| {
            let truth = split.ground_truth.get(q).map(Vec::as_slice).unwrap_or(&[]);
            (*q, truth_for(opts.mode, truth))
        })
        .collect();
    run(model, table, cands, &items, false, opts)
}

/// Re-queries concepts that are part of `tax` against the rest of it: the
/// candidate set excludes positions touching the query and the truth is the
/// query's own placement.
pub fn evaluate_memorized(
    model: &Model,
    table: &Tensor,
    tax: &Taxonomy,
    queries: &[ConceptId],
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<QueryResult>), EvalError> {
    let cands = CandidateIndex::new(candidates_for(tax, opts.mode, opts.allow_pseudo_parent));
    let items: Vec<(ConceptId, Vec<CandidatePosition>)> = queries
        .iter()
        .map(|&q| {
            let truth = tax
                .true_positions(q, opts.allow_pseudo_parent)
                .unwrap_or_default();
            (q, truth_for(opts.mode, &truth))
        })
        .collect();
    run(model, table, &cands, &items, true, opts)
}

/// Surface form of a position endpoint.
pub fn endpoint_label(e: Endpoint, terms: &[String]) -> String {
    match e {
        Endpoint::Concept(c) => terms
            .get(c.index())
            .cloned()
            .unwrap_or_else(|| c.to_string()),
        Endpoint::Pseudo(_) => e.to_string(),
    }
}
