//! Triplet matching network: optional channel-wise gating of the candidate
//! ends, three NTN scorers (query–parent, query–child, query–pair) and a
//! primal projection over their concatenated internal features.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{glorot, Forward, ModelError, NtnBlock};

pub const SCORER_PREFIX: [&str; 3] = ["query_parent", "query_child", "query_pair"];
pub const GATE_PARENT: &str = "gate.parent";
pub const GATE_CHILD: &str = "gate.child";
pub const PRIMAL_U: &str = "primal.u";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmnConfig {
    pub dim: usize,
    /// Internal feature width per scorer.
    pub k: usize,
    pub lambdas: [f64; 3],
    pub gating: bool,
    /// Which of s1, s2, s3 exist. Dropped scorers also leave the primal input.
    pub scorers: [bool; 3],
}

impl TmnConfig {
    pub fn new(dim: usize) -> Self {
        TmnConfig {
            dim,
            k: 5,
            lambdas: [1.0; 3],
            gating: true,
            scorers: [true; 3],
        }
    }

    pub fn n_active(&self) -> usize {
        self.scorers.iter().filter(|&&s| s).count()
    }

    /// Length of the primal projection vector `u_p`.
    pub fn primal_width(&self) -> usize {
        self.k * self.n_active()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.k == 0 {
            return Err("dim and k must be positive".into());
        }
        if self.n_active() == 0 {
            return Err("at least one scorer must be enabled".into());
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err("lambdas must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Primal and auxiliary scores of one triplet with internal features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletScores {
    pub primal: f64,
    pub s: [Option<f64>; 3],
    pub h: [Option<Vec<f64>>; 3],
}

pub(super) fn init(store: &mut ParamStore, cfg: &TmnConfig, seed: u64) {
    let d = cfg.dim;
    let widths = [d, d, 2 * d];
    for j in 0..3 {
        if cfg.scorers[j] {
            NtnBlock::new(SCORER_PREFIX[j]).init(store, seed, d, widths[j], cfg.k);
        }
    }
    store.insert(PRIMAL_U, Tensor::zeros(&[cfg.primal_width()]));
    if cfg.gating {
        for name in [GATE_PARENT, GATE_CHILD] {
            store.insert(name, glorot(seed, name, &[d, 3 * d], 3 * d, d));
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

/// `g ⊙ x` with `g = sigmoid(W [x_q, x_p, x_c])`.
pub(super) fn gate(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    name: &str,
    joint: Var,
    x: Var,
) -> Result<Var, ModelError> {
    let w = param(tape, store, name);
    let z = tape.linear(joint, w)?;
    let g = tape.sigmoid(z)?;
    Ok(tape.mul(g, x)?)
}

pub(super) fn forward(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    cfg: &TmnConfig,
    xq: Var,
    mut xp: Var,
    mut xc: Var,
) -> Result<Forward, ModelError> {
    if cfg.gating {
        let joint = tape.concat(&[xq, xp, xc])?;
        xp = gate(tape, store, GATE_PARENT, joint, xp)?;
        xc = gate(tape, store, GATE_CHILD, joint, xc)?;
    }
    let mut hidden = [None; 3];
    let mut aux = [None; 3];
    let mut acts = Vec::with_capacity(3);
    for j in 0..3 {
        if !cfg.scorers[j] {
            continue;
        }
        let block = NtnBlock::new(SCORER_PREFIX[j]);
        let xt = match j {
            0 => xp,
            1 => xc,
            _ => tape.concat(&[xp, xc])?,
        };
        let h = block.hidden(tape, store, xq, xt)?;
        let a = tape.tanh(h)?;
        aux[j] = Some(block.project(tape, store, a)?);
        hidden[j] = Some(h);
        acts.push(a);
    }
    let all = tape.concat(&acts)?;
    let up = param(tape, store, PRIMAL_U);
    let primal = tape.row_dot(all, up)?;
    Ok(Forward {
        primal,
        aux,
        hidden,
    })
}

/// Scores a single triplet given raw feature vectors (pseudo ends already
/// substituted).
pub fn score_triplet(
    store: &ParamStore,
    cfg: &TmnConfig,
    xq: &[f64],
    xp: &[f64],
    xc: &[f64],
) -> Result<TripletScores, ModelError> {
    let mut tape = Tape::new(store);
    let mut row = |x: &[f64]| -> Result<Var, ModelError> {
        Ok(tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?))
    };
    let (q, p, c) = (row(xq)?, row(xp)?, row(xc)?);
    let f = forward(&mut tape, store, cfg, q, p, c)?;
    Ok(TripletScores {
        primal: tape.value(f.primal).item(),
        s: f.aux.map(|v| v.map(|v| tape.value(v).item())),
        h: f.hidden.map(|v| v.map(|v| tape.value(v).data().to_vec())),
    })
}

/// Gated parent and child features of a single triplet.
pub fn gate_embeddings(
    store: &ParamStore,
    xq: &[f64],
    xp: &[f64],
    xc: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new(store);
    let mut row = |x: &[f64]| -> Result<Var, ModelError> {
        Ok(tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?))
    };
    let (q, p, c) = (row(xq)?, row(xp)?, row(xc)?);
    let joint = tape.concat(&[q, p, c])?;
    let gp = gate(&mut tape, store, GATE_PARENT, joint, p)?;
    let gc = gate(&mut tape, store, GATE_CHILD, joint, c)?;
    Ok((
        tape.value(gp).data().to_vec(),
        tape.value(gc).data().to_vec(),
    ))
}
