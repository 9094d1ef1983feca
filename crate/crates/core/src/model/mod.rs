//! Scoring models: the triplet matching network and the comparison baselines.
//!
//! Every learnable model is a forward graph over three row batches of
//! features (query, parent end, child end) that yields one raw score per row.
//! Pseudo endpoints read from a learned two-row table (`pseudo`): row 0 is the
//! pseudo child, row 1 the pseudo parent.

mod baselines;
mod ntn;
mod tmn;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::rng;
use crate::tape::{RowRef, Tape, TapeError, Var};
use crate::taxonomy::{CandidatePosition, ConceptId, Endpoint, PseudoSentinel};
use crate::tensor::{ShapeError, Tensor};

pub use baselines::{closest_position_score, cosine, BaselineKind};
pub use ntn::NtnBlock;
pub use tmn::{
    gate_embeddings, score_triplet, TmnConfig, TripletScores, GATE_CHILD, GATE_PARENT, PRIMAL_U,
    SCORER_PREFIX,
};

pub const PSEUDO: &str = "pseudo";
pub const EMBEDDINGS: &str = "embeddings";

/// Rows per forward pass when scoring candidate lists.
pub const SCORE_CHUNK: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{0} is rule-based and has no trainable parameters")]
    NotTrainable(BaselineKind),
    #[error("empty candidate set")]
    EmptyCandidateSet,
    #[error("feature dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl From<ShapeError> for ModelError {
    fn from(e: ShapeError) -> Self {
        ModelError::Tape(e.into())
    }
}

/// Architecture of a scorer, stored with its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Tmn(TmnConfig),
    Baseline {
        kind: BaselineKind,
        dim: usize,
        k: usize,
    },
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Tmn(c) => c.dim,
            ModelSpec::Baseline { dim, .. } => *dim,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelSpec::Tmn(_) => "tmn".into(),
            ModelSpec::Baseline { kind, .. } => kind.to_string(),
        }
    }

    pub fn trainable(&self) -> bool {
        !matches!(
            self,
            ModelSpec::Baseline {
                kind: BaselineKind::ClosestPosition,
                ..
            }
        )
    }
}

/// Supervision for a batch of rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labels {
    pub y: Vec<f64>,
    pub y_parent: Vec<f64>,
    pub y_child: Vec<f64>,
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub primal: Var,
    /// Auxiliary scores of the enabled scorers (TMN only).
    pub aux: [Option<Var>; 3],
    pub hidden: [Option<Var>; 3],
}

/// Per-term loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub primal: f64,
    pub aux: [f64; 3],
}

/// A scorer together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl Model {
    /// Fresh parameters for `spec`, deterministic in `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut store = ParamStore::new();
        match &spec {
            ModelSpec::Tmn(cfg) => tmn::init(&mut store, cfg, seed),
            ModelSpec::Baseline { kind, dim, k } => {
                baselines::init(&mut store, *kind, *dim, *k, seed)
            }
        }
        if spec.trainable() {
            store.insert(PSEUDO, Tensor::zeros(&[2, spec.dim()]));
        }
        Model { spec, store }
    }

    /// Makes the feature table itself a learnable parameter.
    pub fn attach_embeddings(&mut self, table: &Tensor) {
        if self.store.id(EMBEDDINGS).is_none() {
            self.store.insert(EMBEDDINGS, table.clone());
        }
    }

    pub fn updates_embeddings(&self) -> bool {
        self.store.id(EMBEDDINGS).is_some()
    }

    /// Records the forward graph for `rows` of (query, position) pairs.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        table: &'a Tensor,
        rows: &[(ConceptId, CandidatePosition)],
    ) -> Result<Forward, ModelError> {
        forward_on(&self.spec, &self.store, tape, table, rows)
    }

    /// Joint loss: primal BCE plus the λ-weighted auxiliary BCE terms.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        out: &Forward,
        labels: &Labels,
    ) -> Result<(Var, LossParts), ModelError> {
        joint_loss(&self.spec, tape, out, labels)
    }

    /// Raw primal scores for `positions` against `query`.
    pub fn score_positions(
        &self,
        table: &Tensor,
        query: ConceptId,
        positions: &[CandidatePosition],
    ) -> Result<Vec<f64>, ModelError> {
        if positions.is_empty() {
            return Err(ModelError::EmptyCandidateSet);
        }
        if !self.spec.trainable() {
            return baselines::closest_position_batch(table, query, positions);
        }
        let mut out = Vec::with_capacity(positions.len());
        for chunk in positions.chunks(SCORE_CHUNK) {
            let rows: Vec<_> = chunk.iter().map(|&p| (query, p)).collect();
            let mut tape = Tape::new(&self.store);
            let f = self.forward(&mut tape, table, &rows)?;
            out.extend_from_slice(tape.value(f.primal).data());
        }
        Ok(out)
    }

    /// Scores every (query, position) row in one pass, without chunking.
    pub fn score_rows(
        &self,
        table: &Tensor,
        rows: &[(ConceptId, CandidatePosition)],
    ) -> Result<Vec<f64>, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyCandidateSet);
        }
        if !self.spec.trainable() {
            return rows
                .iter()
                .map(|&(q, p)| baselines::closest_position_batch(table, q, &[p]).map(|v| v[0]))
                .collect();
        }
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, table, rows)?;
        Ok(tape.value(f.primal).data().to_vec())
    }
}

/// Forward graph of `spec` over `store`, which must be the tape's store.
pub fn forward_on<'a>(
    spec: &ModelSpec,
    store: &ParamStore,
    tape: &mut Tape<'a>,
    table: &'a Tensor,
    rows: &[(ConceptId, CandidatePosition)],
) -> Result<Forward, ModelError> {
    if !spec.trainable() {
        return Err(ModelError::NotTrainable(BaselineKind::ClosestPosition));
    }
    let (xq, xp, xc) = inputs(spec, store, tape, table, rows)?;
    match spec {
        ModelSpec::Tmn(cfg) => tmn::forward(tape, store, cfg, xq, xp, xc),
        ModelSpec::Baseline { kind, .. } => {
            let primal = baselines::forward(tape, store, *kind, xq, xp, xc)?;
            Ok(Forward {
                primal,
                aux: [None; 3],
                hidden: [None; 3],
            })
        }
    }
}

fn inputs<'a>(
    spec: &ModelSpec,
    store: &ParamStore,
    tape: &mut Tape<'a>,
    table: &'a Tensor,
    rows: &[(ConceptId, CandidatePosition)],
) -> Result<(Var, Var, Var), ModelError> {
    let table = match store.id(EMBEDDINGS) {
        Some(id) => tape.param(id),
        None => tape.borrowed(table),
    };
    let dim = tape.value(table).cols();
    if dim != spec.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: spec.dim(),
            found: dim,
        });
    }
    let extra = match store.id(PSEUDO) {
        Some(id) => tape.param(id),
        None => tape.constant(Tensor::zeros(&[2, dim])),
    };
    let q = rows.iter().map(|(q, _)| RowRef::Table(q.index())).collect();
    let p = rows
        .iter()
        .map(|(_, pos)| endpoint_row(pos.parent))
        .collect();
    let c = rows
        .iter()
        .map(|(_, pos)| endpoint_row(pos.child))
        .collect();
    let xq = tape.lookup(table, Some(extra), q)?;
    let xp = tape.lookup(table, Some(extra), p)?;
    let xc = tape.lookup(table, Some(extra), c)?;
    Ok((xq, xp, xc))
}

/// `L_p + Σ λ_j L_j` over the enabled auxiliary scorers with λ_j > 0.
pub fn joint_loss(
    spec: &ModelSpec,
    tape: &mut Tape<'_>,
    out: &Forward,
    labels: &Labels,
) -> Result<(Var, LossParts), ModelError> {
    let lp = tape.bce_with_logits(out.primal, labels.y.clone())?;
    let mut parts = LossParts {
        primal: tape.value(lp).item(),
        ..Default::default()
    };
    let mut terms = vec![(lp, 1.0)];
    if let ModelSpec::Tmn(cfg) = spec {
        let targets = [&labels.y_parent, &labels.y_child, &labels.y];
        for j in 0..3 {
            if let (Some(s), true) = (out.aux[j], cfg.lambdas[j] > 0.0) {
                let l = tape.bce_with_logits(s, targets[j].clone())?;
                parts.aux[j] = tape.value(l).item();
                terms.push((l, cfg.lambdas[j]));
            }
        }
    }
    let total = tape.weighted_sum(&terms)?;
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

pub(crate) fn endpoint_row(e: Endpoint) -> RowRef {
    match e {
        Endpoint::Concept(c) => RowRef::Table(c.index()),
        Endpoint::Pseudo(PseudoSentinel::PseudoChild) => RowRef::Extra(0),
        Endpoint::Pseudo(PseudoSentinel::PseudoParent) => RowRef::Extra(1),
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)), keyed by parameter name.
pub(crate) fn glorot(
    seed: u64,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut r = rng::stream(seed, name, &[]);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| dist.sample(&mut r)).collect(),
    )
    .expect("sized")
}

/// Ranks `positions` by descending score; ties keep the input order.
pub fn rank_by_score(
    positions: &[CandidatePosition],
    scores: &[f64],
) -> Vec<(CandidatePosition, f64)> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| (positions[i], scores[i]))
        .collect()
}

/// Scores and ranks candidates for one query.
pub fn rank_candidates(
    model: &Model,
    table: &Tensor,
    query: ConceptId,
    candidates: &[CandidatePosition],
) -> Result<Vec<(CandidatePosition, f64)>, ModelError> {
    let scores = model.score_positions(table, query, candidates)?;
    Ok(rank_by_score(candidates, &scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Tensor {
        Tensor::matrix(3, 2, vec![1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap()
    }

    #[test]
    fn zero_model_ranks_in_enumeration_order() {
        let mut m = Model::init(ModelSpec::Tmn(TmnConfig::new(2)), 0);
        for s in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(s).fill(0.0);
        }
        let cands: Vec<_> = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(p, c)| CandidatePosition::new(ConceptId(p), ConceptId(c)))
            .collect();
        let ranked = rank_candidates(&m, &table(), ConceptId(0), &cands).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), cands);
        assert!(ranked.iter().all(|r| r.1 == 0.0));
    }

    #[test]
    fn higher_score_ranks_first() {
        let cands = [
            CandidatePosition::new(ConceptId(0), ConceptId(1)),
            CandidatePosition::new(ConceptId(0), ConceptId(2)),
        ];
        let r = rank_by_score(&cands, &[0.3, 0.7]);
        assert_eq!(r[0].0, cands[1]);
        assert_eq!(r[1].0, cands[0]);
    }

    #[test]
    fn empty_candidates_rejected() {
        let m = Model::init(ModelSpec::Tmn(TmnConfig::new(2)), 0);
        assert_eq!(
            m.score_positions(&table(), ConceptId(0), &[]),
            Err(ModelError::EmptyCandidateSet)
        );
    }

    #[test]
    fn chunked_scores_match_single_rows() {
        let mut m = Model::init(ModelSpec::Tmn(TmnConfig::new(2)), 3);
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.name(id).to_string();
            let shape = m.store.get(id).shape().to_vec();
            *m.store.get_mut(id) = glorot(9, &name, &shape, 2, 2);
        }
        let t = table();
        let cands = [
            CandidatePosition::new(ConceptId(1), ConceptId(2)),
            CandidatePosition::leaf(ConceptId(1)),
            CandidatePosition::root(ConceptId(2)),
        ];
        let batch = m.score_positions(&t, ConceptId(0), &cands).unwrap();
        for (i, &c) in cands.iter().enumerate() {
            let one = m.score_positions(&t, ConceptId(0), &[c]).unwrap()[0];
            assert!((one - batch[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn glorot_variance() {
        let t = glorot(1, "w", &[100, 100], 30, 20);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        let expect = 2.0 / 50.0;
        assert!((var - expect).abs() < 0.2 * expect, "{var}");
        assert_eq!(t, glorot(1, "w", &[100, 100], 30, 20));
    }
}
