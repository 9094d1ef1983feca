//! Initial concept feature vectors and the word2vec text loader.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dataset::DataError;
use crate::tensor::Tensor;

/// One row per concept, indexed by `ConceptId`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Tensor,
    id_map: BTreeMap<String, usize>,
}

impl EmbeddingTable {
    /// `terms[i]` names row `i` of `vectors` (`[N, dim]`).
    pub fn new(terms: &[String], vectors: Tensor) -> Result<Self, DataError> {
        if vectors.rank() != 2 || vectors.rows() != terms.len() || vectors.cols() == 0 {
            return Err(DataError::DimensionMismatch {
                context: "embedding table".into(),
                expected: terms.len(),
                found: vectors.rows(),
            });
        }
        if !vectors.is_finite() {
            return Err(DataError::Parse {
                file: "embedding table".into(),
                line: 0,
                msg: "non-finite entry".into(),
            });
        }
        let mut id_map = BTreeMap::new();
        for (i, t) in terms.iter().enumerate() {
            id_map.entry(t.clone()).or_insert(i);
        }
        Ok(EmbeddingTable {
            dim: vectors.cols(),
            vectors,
            id_map,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn lookup(&self, term: &str) -> Option<usize> {
        self.id_map.get(term).copied()
    }
}

/// Raw word2vec text file: `count dim` header then `term v1 … vd` lines.
#[derive(Clone, Debug, Default)]
pub struct Word2Vec {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl Word2Vec {
    pub fn parse<R: BufRead>(reader: R, file: &str) -> Result<Self, DataError> {
        let perr = |line: usize, msg: String| DataError::Parse {
            file: file.to_string(),
            line,
            msg,
        };
        let mut lines = reader.lines().enumerate();
        let (count, dim) = loop {
            let Some((i, line)) = lines.next() else {
                return Err(perr(1, "missing header".into()));
            };
            let line = line.map_err(|e| perr(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let count = it.next().and_then(|s| s.parse::<usize>().ok());
            let dim = it.next().and_then(|s| s.parse::<usize>().ok());
            match (count, dim, it.next()) {
                (Some(c), Some(d), None) if d > 0 => break (c, d),
                _ => {
                    return Err(perr(
                        i + 1,
                        format!("bad header {line:?}, expected `count dim`"),
                    ))
                }
            }
        };
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            let line = line.map_err(|e| perr(i + 1, e.to_string()))?;
            let mut it = line.split_whitespace();
            let Some(term) = it.next() else { continue };
            let vals = it
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(i + 1, e.to_string()))?;
            if vals.len() != dim {
                return Err(DataError::DimensionMismatch {
                    context: format!("{file}:{}", i + 1),
                    expected: dim,
                    found: vals.len(),
                });
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(perr(i + 1, "non-finite value".into()));
            }
            vectors.insert(term.to_string(), vals);
        }
        if vectors.len() != count {
            log::warn!(
                "{file}: header declares {count} vectors, found {}",
                vectors.len()
            );
        }
        Ok(Word2Vec { dim, vectors })
    }

    /// Finds a vector by surface term, its underscore form, or the concept id.
    pub fn find(&self, term: &str, external_id: &str) -> Option<&[f64]> {
        self.vectors
            .get(term)
            .or_else(|| self.vectors.get(&term.replace(' ', "_")))
            .or_else(|| self.vectors.get(external_id))
            .map(Vec::as_slice)
    }
}
