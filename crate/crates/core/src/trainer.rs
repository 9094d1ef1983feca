//! Self-supervised training: instances are sampled from the seed taxonomy
//! itself and the scorer is fit with the joint BCE loss under Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, QuerySet};
use crate::eval::{self, CandidateIndex, EvalError, EvalOptions, MetricsReport};
use crate::model::{Labels, LossParts, Model, ModelError};
use crate::params::AdamConfig;
use crate::rng;
use crate::scheduler::{LrSchedulerState, PlateauConfig, PlateauMode};
use crate::tape::Tape;
use crate::taxonomy::{CandidatePosition, ConceptId, Endpoint, PseudoSentinel, Taxonomy};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("query {0} has no valid negative candidates")]
    InsufficientCandidates(ConceptId),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub n_negatives: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip, off when `None`.
    pub clip_norm: Option<f64>,
    pub update_embeddings: bool,
    pub allow_pseudo_parent: bool,
    pub plateau: PlateauConfig,
    pub adam: AdamConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 128,
            n_negatives: 31,
            lr: 0.001,
            max_epochs: 200,
            early_stop_patience: 30,
            seed: 0,
            clip_norm: None,
            update_embeddings: false,
            allow_pseudo_parent: false,
            plateau: PlateauConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidHyper(m.into()));
        if self.batch_size == 0 || self.n_negatives == 0 {
            return bad("batch_size and n_negatives must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) || self.plateau.min_lr <= 0.0 {
            return bad("plateau factor must lie in (0, 1) and min_lr must be positive");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPosition {
    pub position: CandidatePosition,
    pub y: bool,
    pub y_parent: bool,
    pub y_child: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub query: ConceptId,
    /// The positive first, then the negatives.
    pub positions: Vec<LabeledPosition>,
}

/// Draws training instances from a taxonomy.
pub struct Sampler<'t> {
    tax: &'t Taxonomy,
    candidates: Vec<CandidatePosition>,
    n_negatives: usize,
}

impl<'t> Sampler<'t> {
    pub fn new(tax: &'t Taxonomy, n_negatives: usize, allow_pseudo_parent: bool) -> Self {
        Sampler {
            tax,
            candidates: tax.enumerate_candidates(allow_pseudo_parent),
            n_negatives,
        }
    }

    /// Queries usable for self-supervision: every node with a parent.
    pub fn queries(&self) -> Vec<ConceptId> {
        self.tax
            .nodes()
            .iter()
            .copied()
            .filter(|&n| !self.tax.is_root(n))
            .collect()
    }

    pub fn label(&self, query: ConceptId, position: CandidatePosition) -> LabeledPosition {
        let y_parent = self.tax.parent_matches(query, position.parent);
        let y_child = self.tax.child_matches(query, position.child);
        LabeledPosition {
            position,
            y: y_parent && y_child,
            y_parent,
            y_child,
        }
    }

    fn is_valid_negative(&self, query: ConceptId, p: &CandidatePosition) -> bool {
        !p.involves(query)
            && !(self.tax.parent_matches(query, p.parent) && self.tax.child_matches(query, p.child))
    }

    /// One positive (random parent, random child or pseudo child) and
    /// `n_negatives` distinct non-positive candidates. Candidates touching the
    /// query concept itself are never used as negatives.
    pub fn sample<R: Rng>(
        &self,
        query: ConceptId,
        r: &mut R,
    ) -> Result<TrainingInstance, TrainError> {
        let parents = self
            .tax
            .parents(query)
            .map_err(|_| TrainError::InsufficientCandidates(query))?;
        let children = self
            .tax
            .children(query)
            .map_err(|_| TrainError::InsufficientCandidates(query))?;
        let Some(&p) = parents.choose(r) else {
            return Err(TrainError::InsufficientCandidates(query));
        };
        let child = match children.choose(r) {
            Some(&c) => Endpoint::Concept(c),
            None => Endpoint::Pseudo(PseudoSentinel::PseudoChild),
        };
        let positive = CandidatePosition {
            parent: Endpoint::Concept(p),
            child,
        };
        let mut positions = Vec::with_capacity(self.n_negatives + 1);
        positions.push(self.label(query, positive));

        let n = self.candidates.len();
        let mut chosen: Vec<usize> = Vec::with_capacity(self.n_negatives);
        let max_tries = 20 * self.n_negatives + 100;
        let mut tries = 0;
        while chosen.len() < self.n_negatives && tries < max_tries {
            tries += 1;
            let i = r.gen_range(0..n);
            if !chosen.contains(&i) && self.is_valid_negative(query, &self.candidates[i]) {
                chosen.push(i);
            }
        }
        if chosen.len() < self.n_negatives {
            let mut pool: Vec<usize> = (0..n)
                .filter(|i| {
                    !chosen.contains(i) && self.is_valid_negative(query, &self.candidates[*i])
                })
                .collect();
            pool.shuffle(r);
            let need = self.n_negatives - chosen.len();
            let take = need.min(pool.len());
            chosen.extend(pool.drain(..take));
            if chosen.len() < self.n_negatives {
                if chosen.is_empty() {
                    return Err(TrainError::InsufficientCandidates(query));
                }
                log::warn!(
                    "query {query}: only {} valid negatives, sampling with replacement",
                    chosen.len()
                );
                let distinct = chosen.clone();
                while chosen.len() < self.n_negatives {
                    chosen.push(*distinct.choose(r).expect("non-empty"));
                }
            }
        }
        positions.extend(
            chosen
                .into_iter()
                .map(|i| self.label(query, self.candidates[i])),
        );
        Ok(TrainingInstance { query, positions })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
    pub improved: bool,
}

/// Closing log line: validation metrics of the restored best parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub final_record: FinalRecord,
    pub scheduler: LrSchedulerState,
}

fn instance_rows(batch: &[TrainingInstance]) -> (Vec<(ConceptId, CandidatePosition)>, Labels) {
    let mut rows = Vec::new();
    let mut labels = Labels::default();
    let f = |b: bool| if b { 1.0 } else { 0.0 };
    for inst in batch {
        for lp in &inst.positions {
            rows.push((inst.query, lp.position));
            labels.y.push(f(lp.y));
            labels.y_parent.push(f(lp.y_parent));
            labels.y_child.push(f(lp.y_child));
        }
    }
    (rows, labels)
}

/// Computes the batch loss and adds its gradients into the parameter store.
pub fn accumulate_batch(
    model: &mut Model,
    table: &Tensor,
    batch: &[TrainingInstance],
) -> Result<LossParts, TrainError> {
    let (rows, labels) = instance_rows(batch);
    let (parts, grads) = {
        let mut tape = Tape::new(&model.store);
        let out = model.forward(&mut tape, table, &rows)?;
        let (loss, parts) = model.loss(&mut tape, &out, &labels)?;
        (parts, tape.backward(loss).map_err(ModelError::from)?)
    };
    grads.accumulate_into(&mut model.store);
    Ok(parts)
}

/// Loss of `batch` without touching gradients.
pub fn batch_loss(
    model: &Model,
    table: &Tensor,
    batch: &[TrainingInstance],
) -> Result<LossParts, TrainError> {
    let (rows, labels) = instance_rows(batch);
    let mut tape = Tape::new(&model.store);
    let out = model.forward(&mut tape, table, &rows)?;
    Ok(model.loss(&mut tape, &out, &labels)?.1)
}

/// Instances of one epoch, in the epoch's shuffled query order.
pub fn epoch_instances(
    sampler: &Sampler<'_>,
    queries: &[ConceptId],
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainingInstance>, TrainError> {
    let mut order = queries.to_vec();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
    order
        .iter()
        .map(|&q| {
            sampler.sample(
                q,
                &mut rng::stream(seed, "sample", &[epoch as u64, q.0 as u64]),
            )
        })
        .collect()
}

/// Trains `model` on the seed taxonomy of `split`, selecting the epoch with
/// the best validation scaled MRR (training loss when there are no
/// validation queries).
pub fn train(
    model: Model,
    table: &Tensor,
    split: &DatasetSplit,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, TrainError> {
    train_with(model, table, split, hyper, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    mut model: Model,
    table: &Tensor,
    split: &DatasetSplit,
    hyper: &TrainHyper,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    if !model.spec.trainable() {
        return Err(ModelError::NotTrainable(crate::model::BaselineKind::ClosestPosition).into());
    }
    if hyper.update_embeddings {
        model.attach_embeddings(table);
    }
    let tax = &split.seed_taxonomy;
    let sampler = Sampler::new(tax, hyper.n_negatives, hyper.allow_pseudo_parent);
    let queries = sampler.queries();
    let eval_opts = EvalOptions {
        allow_pseudo_parent: hyper.allow_pseudo_parent,
        ..EvalOptions::default()
    };
    let has_val = !split.val_queries.is_empty();
    let cands = has_val.then(|| {
        CandidateIndex::new(eval::candidates_for(
            tax,
            eval_opts.mode,
            eval_opts.allow_pseudo_parent,
        ))
    });
    let mode = if has_val {
        PlateauMode::Max
    } else {
        PlateauMode::Min
    };
    let mut sched = LrSchedulerState::new(hyper.lr, hyper.plateau);
    let mut log = Vec::new();
    let mut best: Option<(usize, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 0..hyper.max_epochs {
        if queries.is_empty() {
            break;
        }
        let instances = epoch_instances(&sampler, &queries, hyper.seed, epoch)?;
        let mut sum = LossParts::default();
        for batch in instances.chunks(hyper.batch_size) {
            let parts = accumulate_batch(&mut model, table, batch)?;
            if let Some(c) = hyper.clip_norm {
                model.store.clip_grad_norm(c);
            }
            model.store.adam_step(sched.current_lr, hyper.adam);
            let w = batch.len() as f64;
            sum.total += w * parts.total;
            sum.primal += w * parts.primal;
            for j in 0..3 {
                sum.aux[j] += w * parts.aux[j];
            }
        }
        let n = instances.len() as f64;
        let loss = LossParts {
            total: sum.total / n,
            primal: sum.primal / n,
            aux: sum.aux.map(|a| a / n),
        };
        let val = match &cands {
            Some(c) => {
                Some(eval::evaluate_with(&model, table, split, QuerySet::Val, &eval_opts, c)?.0)
            }
            None => None,
        };
        let monitored = val.as_ref().map_or(loss.total, |v| v.mrr_scaled);
        let lr = sched.current_lr;
        let before = sched.best_metric;
        sched.step(monitored, mode);
        let improved = sched.best_metric != before;
        if improved {
            best = Some((epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss,
            lr,
            val,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {lr:e}{}",
            rec.loss.total,
            rec.val
                .as_ref()
                .map_or(String::new(), |v| format!(" val mrr {:.4}", v.mrr_scaled))
        );
        on_epoch(&rec);
        log.push(rec);
        if since_best >= hyper.early_stop_patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }

    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((_, m)) = best {
        model = m;
    }
    let val = match &cands {
        Some(c) if !log.is_empty() => {
            Some(eval::evaluate_with(&model, table, split, QuerySet::Val, &eval_opts, c)?.0)
        }
        _ => None,
    };
    let final_record = FinalRecord {
        best_epoch,
        epochs_run: log.len(),
        val,
    };
    Ok(TrainOutcome {
        model,
        log,
        final_record,
        scheduler: sched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::PositionClass;

    fn tax() -> Taxonomy {
        let e = |p: u32, c: u32| (ConceptId(p), ConceptId(c));
        Taxonomy::new(
            7,
            vec![e(0, 1), e(0, 2), e(1, 3), e(1, 4), e(2, 5), e(5, 6)],
        )
        .unwrap()
    }

    #[test]
    fn leaf_query_positive_is_pseudo_child() {
        let t = tax();
        let s = Sampler::new(&t, 5, false);
        let inst = s
            .sample(ConceptId(3), &mut rng::stream(0, "t", &[]))
            .unwrap();
        let pos = inst.positions[0];
        assert_eq!(pos.position, CandidatePosition::leaf(ConceptId(1)));
        assert!(pos.y && pos.y_parent && pos.y_child);
        assert_eq!(inst.positions.len(), 6);
    }

    #[test]
    fn labels_match_classifier() {
        let t = tax();
        let s = Sampler::new(&t, 8, false);
        for q in s.queries() {
            for k in 0..20 {
                let inst = s
                    .sample(q, &mut rng::stream(1, "t", &[q.0 as u64, k]))
                    .unwrap();
                for (i, lp) in inst.positions.iter().enumerate() {
                    assert_eq!(lp.y, lp.y_parent && lp.y_child);
                    let class = t.classify_position(q, &lp.position).unwrap();
                    assert_eq!(class == PositionClass::Positive, lp.y);
                    assert_eq!(
                        class == PositionClass::PartialNegative,
                        lp.y_parent != lp.y_child
                    );
                    assert_eq!(i == 0, lp.y);
                    assert!(i == 0 || !lp.position.involves(q));
                }
            }
        }
    }

    #[test]
    fn partial_negative_labels() {
        let t = tax();
        let s = Sampler::new(&t, 1, false);
        let lp = s.label(
            ConceptId(1),
            CandidatePosition::new(ConceptId(0), ConceptId(5)),
        );
        assert_eq!((lp.y, lp.y_parent, lp.y_child), (false, true, false));
    }

    #[test]
    fn roots_are_not_queries() {
        let t = tax();
        let s = Sampler::new(&t, 1, false);
        assert!(!s.queries().contains(&ConceptId(0)));
        assert_eq!(s.queries().len(), 6);
    }
}
