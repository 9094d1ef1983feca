#![allow(dead_code)]

use rand::Rng;
use tmn_core::{CandidatePosition, ConceptId};

pub fn c(i: u32) -> ConceptId {
    ConceptId(i)
}

/// Random DAG over `0..n`: edges only run from lower to higher ids.
pub fn random_dag<R: Rng>(r: &mut R, n: usize, p: f64) -> Vec<(ConceptId, ConceptId)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if r.gen_bool(p) {
                edges.push((c(a as u32), c(b as u32)));
            }
        }
    }
    edges
}

/// Transitive closure by repeated squaring of a boolean matrix.
pub fn closure(n: usize, edges: &[(ConceptId, ConceptId)]) -> Vec<Vec<bool>> {
    let mut m = vec![vec![false; n]; n];
    for &(a, b) in edges {
        m[a.index()][b.index()] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if m[i][k] {
                for j in 0..n {
                    if m[k][j] {
                        m[i][j] = true;
                    }
                }
            }
        }
    }
    m
}

/// Every valid position by definition: (p, c) with c reachable from p,
/// (p, ⊥) for every node and optionally (⊤, c) for every node.
pub fn oracle_positions(
    n: usize,
    edges: &[(ConceptId, ConceptId)],
    pseudo_parent: bool,
) -> Vec<CandidatePosition> {
    let reach = closure(n, edges);
    let mut out = Vec::new();
    for p in 0..n {
        for ch in 0..n {
            if reach[p][ch] {
                out.push(CandidatePosition::new(c(p as u32), c(ch as u32)));
            }
        }
        out.push(CandidatePosition::leaf(c(p as u32)));
        if pseudo_parent {
            out.push(CandidatePosition::root(c(p as u32)));
        }
    }
    out.sort();
    out
}
