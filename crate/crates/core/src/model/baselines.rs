//! Comparison scorers. Learnable ones see the candidate pair as the
//! concatenation `x_t = [x_p; x_c]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::taxonomy::{CandidatePosition, ConceptId, Endpoint};
use crate::tensor::{dot, Tensor};

use super::tmn::PRIMAL_U;
use super::{glorot, ModelError, NtnBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ClosestPosition,
    SingleLayer,
    MultiLayer,
    Bilinear,
    Ntn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::ClosestPosition,
        BaselineKind::SingleLayer,
        BaselineKind::MultiLayer,
        BaselineKind::Bilinear,
        BaselineKind::Ntn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ClosestPosition => "closest_position",
            BaselineKind::SingleLayer => "single_layer",
            BaselineKind::MultiLayer => "multi_layer",
            BaselineKind::Bilinear => "bilinear",
            BaselineKind::Ntn => "ntn",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| format!("unknown baseline {s:?}"))
    }
}

pub(super) fn init(store: &mut ParamStore, kind: BaselineKind, d: usize, k: usize, seed: u64) {
    match kind {
        BaselineKind::ClosestPosition => {}
        BaselineKind::SingleLayer => {
            store.insert("single.V", glorot(seed, "single.V", &[k, 3 * d], 3 * d, k));
            store.insert("single.b", Tensor::zeros(&[k]));
            store.insert(PRIMAL_U, Tensor::zeros(&[k]));
        }
        BaselineKind::MultiLayer => {
            store.insert("mlp.V1", glorot(seed, "mlp.V1", &[k, 3 * d], 3 * d, k));
            store.insert("mlp.b1", Tensor::zeros(&[k]));
            store.insert("mlp.V2", glorot(seed, "mlp.V2", &[2 * k, k], k, 2 * k));
            store.insert("mlp.b2", Tensor::zeros(&[2 * k]));
            store.insert(PRIMAL_U, Tensor::zeros(&[2 * k]));
        }
        BaselineKind::Bilinear => {
            store.insert(
                "bilinear.M",
                glorot(seed, "bilinear.M", &[1, d, 2 * d], d, 2 * d),
            );
        }
        BaselineKind::Ntn => {
            NtnBlock::new("query_pair").init(store, seed, d, 2 * d, k);
            store.insert(PRIMAL_U, Tensor::zeros(&[k]));
        }
    }
}

fn param(tape: &mut Tape<'_>, store: &ParamStore, name: &str) -> Var {
    tape.param(
        store
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}")),
    )
}

fn dense(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    x: Var,
    w: &str,
    b: &str,
) -> Result<Var, ModelError> {
    let w = param(tape, store, w);
    let b = param(tape, store, b);
    let z = tape.linear(x, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(tape.tanh(z)?)
}

pub(super) fn forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    kind: BaselineKind,
    xq: Var,
    xp: Var,
    xc: Var,
) -> Result<Var, ModelError> {
    match kind {
        BaselineKind::ClosestPosition => Err(ModelError::NotTrainable(kind)),
        BaselineKind::SingleLayer => {
            let z = tape.concat(&[xq, xp, xc])?;
            let a = dense(tape, store, z, "single.V", "single.b")?;
            let u = param(tape, store, PRIMAL_U);
            Ok(tape.row_dot(a, u)?)
        }
        BaselineKind::MultiLayer => {
            let z = tape.concat(&[xq, xp, xc])?;
            let a1 = dense(tape, store, z, "mlp.V1", "mlp.b1")?;
            let a2 = dense(tape, store, a1, "mlp.V2", "mlp.b2")?;
            let u = param(tape, store, PRIMAL_U);
            Ok(tape.row_dot(a2, u)?)
        }
        BaselineKind::Bilinear => {
            let xt = tape.concat(&[xp, xc])?;
            let m = param(tape, store, "bilinear.M");
            let s = tape.bilinear(xq, m, xt)?;
            let one = tape.constant(Tensor::vector(vec![1.0]));
            Ok(tape.row_dot(s, one)?)
        }
        BaselineKind::Ntn => {
            // same op sequence as the query-pair scorer of the TMN
            let block = NtnBlock::new("query_pair");
            let xt = tape.concat(&[xp, xc])?;
            let h = block.hidden(tape, store, xq, xt)?;
            let a = tape.tanh(h)?;
            let all = tape.concat(&[a])?;
            let u = param(tape, store, PRIMAL_U);
            Ok(tape.row_dot(all, u)?)
        }
    }
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `(cos(x_p, x_q) + cos(x_c, x_q)) / 2`.
pub fn closest_position_score(xq: &[f64], xp: &[f64], xc: &[f64]) -> f64 {
    (cosine(xp, xq) + cosine(xc, xq)) / 2.0
}

pub(super) fn closest_position_batch(
    table: &Tensor,
    query: ConceptId,
    positions: &[CandidatePosition],
) -> Result<Vec<f64>, ModelError> {
    let xq = table.row(query.index());
    if xq.iter().all(|&v| v == 0.0) {
        log::warn!("query {query} has a zero feature vector; cosine scores are 0");
    }
    let zero = vec![0.0; table.cols()];
    let feat = |e: Endpoint| match e {
        Endpoint::Concept(c) => table.row(c.index()),
        Endpoint::Pseudo(_) => zero.as_slice(),
    };
    Ok(positions
        .iter()
        .map(|p| closest_position_score(xq, feat(p.parent), feat(p.child)))
        .collect())
}
