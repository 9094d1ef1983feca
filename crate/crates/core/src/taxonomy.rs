//! Taxonomy graph: a DAG of concepts with reachability, candidate-position
//! enumeration and ground-truth extraction for a query concept.
//!
//! Concept ids index a fixed id space (`n_slots`). A taxonomy may hold only a
//! subset of that space, which is how a seed taxonomy keeps the ids of the
//! full taxonomy after held-out queries are removed.

use std::cmp::Ordering;
use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense 0-based index of a concept in the node table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ConceptId {
    fn from(i: usize) -> Self {
        ConceptId(i as u32)
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Placeholder endpoint standing in for "no child" or "no parent".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSentinel {
    PseudoChild,
    PseudoParent,
}

/// One end of a candidate position. Real concepts order before sentinels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Concept(ConceptId),
    Pseudo(PseudoSentinel),
}

impl Endpoint {
    pub fn concept(self) -> Option<ConceptId> {
        match self {
            Endpoint::Concept(c) => Some(c),
            Endpoint::Pseudo(_) => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Concept(c) => write!(f, "{c}"),
            Endpoint::Pseudo(PseudoSentinel::PseudoChild) => f.write_str("<pseudo-child>"),
            Endpoint::Pseudo(PseudoSentinel::PseudoParent) => f.write_str("<pseudo-parent>"),
        }
    }
}

/// A ⟨parent, child⟩ slot into which a query concept may be inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePosition {
    pub parent: Endpoint,
    pub child: Endpoint,
}

impl CandidatePosition {
    pub fn new(parent: ConceptId, child: ConceptId) -> Self {
        CandidatePosition {
            parent: Endpoint::Concept(parent),
            child: Endpoint::Concept(child),
        }
    }

    /// Leaf attachment under `parent`.
    pub fn leaf(parent: ConceptId) -> Self {
        CandidatePosition {
            parent: Endpoint::Concept(parent),
            child: Endpoint::Pseudo(PseudoSentinel::PseudoChild),
        }
    }

    /// Root attachment above `child`.
    pub fn root(child: ConceptId) -> Self {
        CandidatePosition {
            parent: Endpoint::Pseudo(PseudoSentinel::PseudoParent),
            child: Endpoint::Concept(child),
        }
    }

    pub fn involves(&self, id: ConceptId) -> bool {
        self.parent == Endpoint::Concept(id) || self.child == Endpoint::Concept(id)
    }
}

impl Ord for CandidatePosition {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.parent, self.child).cmp(&(other.parent, other.child))
    }
}

impl PartialOrd for CandidatePosition {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CandidatePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.parent, self.child)
    }
}

/// Relationship of a candidate position to a query's true placement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionClass {
    Positive,
    PartialNegative,
    Negative,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cycle detected: {}", fmt_path(.0))]
    CycleDetected(Vec<ConceptId>),
    #[error("edge ({0}, {1}) references a node outside the taxonomy")]
    DanglingEndpoint(ConceptId, ConceptId),
    #[error("self-loop on node {0}")]
    SelfLoop(ConceptId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(ConceptId, ConceptId),
    #[error("unknown node {0}")]
    UnknownNode(ConceptId),
    #[error("invalid candidate position {0}")]
    InvalidPosition(CandidatePosition),
}

fn fmt_path(path: &[ConceptId]) -> String {
    path.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Summary reported by a successful validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagSummary {
    pub nodes: usize,
    pub edges: usize,
    /// Longest root-to-leaf path, counted in edges.
    pub depth: usize,
}

/// Immutable taxonomy snapshot with memoized reachability.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    n_slots: usize,
    nodes: Vec<ConceptId>,
    present: Vec<bool>,
    edges: Vec<(ConceptId, ConceptId)>,
    children: Vec<Vec<ConceptId>>,
    parents: Vec<Vec<ConceptId>>,
    // sorted strict descendants / ancestors per slot
    descendants: Vec<Vec<ConceptId>>,
    ancestors: Vec<Vec<ConceptId>>,
    summary: DagSummary,
}

impl Taxonomy {
    /// Builds a taxonomy over ids `0..n` with every id present.
    pub fn new(n: usize, edges: Vec<(ConceptId, ConceptId)>) -> Result<Self, GraphError> {
        Self::with_nodes(n, (0..n).map(ConceptId::from).collect(), edges)
    }

    /// Builds a taxonomy over the id space `0..n_slots` holding only `nodes`.
    pub fn with_nodes(
        n_slots: usize,
        mut nodes: Vec<ConceptId>,
        mut edges: Vec<(ConceptId, ConceptId)>,
    ) -> Result<Self, GraphError> {
        nodes.sort_unstable();
        nodes.dedup();
        let mut present = vec![false; n_slots];
        for &n in &nodes {
            if n.index() >= n_slots {
                return Err(GraphError::UnknownNode(n));
            }
            present[n.index()] = true;
        }
        let mut children = vec![Vec::new(); n_slots];
        let mut parents = vec![Vec::new(); n_slots];
        let mut seen = BTreeSet::new();
        for &(p, c) in &edges {
            if p.index() >= n_slots
                || c.index() >= n_slots
                || !present[p.index()]
                || !present[c.index()]
            {
                return Err(GraphError::DanglingEndpoint(p, c));
            }
            if p == c {
                return Err(GraphError::SelfLoop(p));
            }
            if !seen.insert((p, c)) {
                return Err(GraphError::DuplicateEdge(p, c));
            }
            children[p.index()].push(c);
            parents[c.index()].push(p);
        }
        for list in children.iter_mut().chain(parents.iter_mut()) {
            list.sort_unstable();
        }
        edges.sort_unstable();

        let order = topo_order(&nodes, &children, &parents)?;

        let mut descendants: Vec<Vec<ConceptId>> = vec![Vec::new(); n_slots];
        let mut height = vec![0usize; n_slots];
        for &n in order.iter().rev() {
            let mut acc = Vec::new();
            for &c in &children[n.index()] {
                acc.push(c);
                acc.extend_from_slice(&descendants[c.index()]);
                height[n.index()] = height[n.index()].max(height[c.index()] + 1);
            }
            acc.sort_unstable();
            acc.dedup();
            descendants[n.index()] = acc;
        }
        let mut ancestors: Vec<Vec<ConceptId>> = vec![Vec::new(); n_slots];
        for &n in &order {
            let mut acc = Vec::new();
            for &p in &parents[n.index()] {
                acc.push(p);
                acc.extend_from_slice(&ancestors[p.index()]);
            }
            acc.sort_unstable();
            acc.dedup();
            ancestors[n.index()] = acc;
        }
        let depth = nodes
            .iter()
            .filter(|n| parents[n.index()].is_empty())
            .map(|n| height[n.index()])
            .max()
            .unwrap_or(0);
        let summary = DagSummary {
            nodes: nodes.len(),
            edges: edges.len(),
            depth,
        };
        Ok(Taxonomy {
            n_slots,
            nodes,
            present,
            edges,
            children,
            parents,
            descendants,
            ancestors,
            summary,
        })
    }

    pub fn summary(&self) -> DagSummary {
        self.summary
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn nodes(&self) -> &[ConceptId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(ConceptId, ConceptId)] {
        &self.edges
    }

    pub fn contains(&self, n: ConceptId) -> bool {
        n.index() < self.n_slots && self.present[n.index()]
    }

    fn check(&self, n: ConceptId) -> Result<(), GraphError> {
        if self.contains(n) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(n))
        }
    }

    pub fn children(&self, n: ConceptId) -> Result<&[ConceptId], GraphError> {
        self.check(n)?;
        Ok(&self.children[n.index()])
    }

    pub fn parents(&self, n: ConceptId) -> Result<&[ConceptId], GraphError> {
        self.check(n)?;
        Ok(&self.parents[n.index()])
    }

    /// All nodes reachable from `n` through at least one edge, sorted.
    pub fn descendants(&self, n: ConceptId) -> Result<&[ConceptId], GraphError> {
        self.check(n)?;
        Ok(&self.descendants[n.index()])
    }

    pub fn ancestors(&self, n: ConceptId) -> Result<&[ConceptId], GraphError> {
        self.check(n)?;
        Ok(&self.ancestors[n.index()])
    }

    pub fn is_descendant(&self, ancestor: ConceptId, node: ConceptId) -> bool {
        self.contains(ancestor)
            && self.descendants[ancestor.index()]
                .binary_search(&node)
                .is_ok()
    }

    pub fn is_root(&self, n: ConceptId) -> bool {
        self.contains(n) && self.parents[n.index()].is_empty()
    }

    pub fn is_leaf(&self, n: ConceptId) -> bool {
        self.contains(n) && self.children[n.index()].is_empty()
    }

    /// Number of strict ancestor–descendant pairs.
    pub fn closure_size(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| self.descendants[n.index()].len())
            .sum()
    }

    /// Every valid candidate position in lexicographic (parent, child) order,
    /// with sentinels sorting after real concepts.
    pub fn enumerate_candidates(&self, allow_pseudo_parent: bool) -> Vec<CandidatePosition> {
        let mut out = Vec::with_capacity(self.closure_size() + self.nodes.len() * 2);
        for &p in &self.nodes {
            for &c in &self.descendants[p.index()] {
                out.push(CandidatePosition::new(p, c));
            }
            out.push(CandidatePosition::leaf(p));
        }
        if allow_pseudo_parent {
            for &c in &self.nodes {
                out.push(CandidatePosition::root(c));
            }
        }
        out
    }

    /// Leaf-attachment positions only, one per node.
    pub fn expansion_candidates(&self) -> Vec<CandidatePosition> {
        self.nodes
            .iter()
            .map(|&n| CandidatePosition::leaf(n))
            .collect()
    }

    /// Parent × child positions of `query`; leaves pair with the pseudo child.
    pub fn true_positions(
        &self,
        query: ConceptId,
        allow_pseudo_parent: bool,
    ) -> Result<Vec<CandidatePosition>, GraphError> {
        self.check(query)?;
        let parents = &self.parents[query.index()];
        let children = &self.children[query.index()];
        let ps: Vec<Endpoint> = if parents.is_empty() {
            if allow_pseudo_parent {
                vec![Endpoint::Pseudo(PseudoSentinel::PseudoParent)]
            } else {
                Vec::new()
            }
        } else {
            parents.iter().map(|&p| Endpoint::Concept(p)).collect()
        };
        let cs: Vec<Endpoint> = if children.is_empty() {
            vec![Endpoint::Pseudo(PseudoSentinel::PseudoChild)]
        } else {
            children.iter().map(|&c| Endpoint::Concept(c)).collect()
        };
        let mut out = Vec::with_capacity(ps.len() * cs.len());
        for &p in &ps {
            for &c in &cs {
                if matches!((p, c), (Endpoint::Pseudo(_), Endpoint::Pseudo(_))) {
                    continue;
                }
                out.push(CandidatePosition {
                    parent: p,
                    child: c,
                });
            }
        }
        Ok(out)
    }

    /// Whether `end` is a correct parent end for `query`.
    pub fn parent_matches(&self, query: ConceptId, end: Endpoint) -> bool {
        let parents = &self.parents[query.index()];
        match end {
            Endpoint::Concept(p) => parents.binary_search(&p).is_ok(),
            Endpoint::Pseudo(PseudoSentinel::PseudoParent) => parents.is_empty(),
            Endpoint::Pseudo(PseudoSentinel::PseudoChild) => false,
        }
    }

    /// Whether `end` is a correct child end for `query`.
    pub fn child_matches(&self, query: ConceptId, end: Endpoint) -> bool {
        let children = &self.children[query.index()];
        match end {
            Endpoint::Concept(c) => children.binary_search(&c).is_ok(),
            Endpoint::Pseudo(PseudoSentinel::PseudoChild) => children.is_empty(),
            Endpoint::Pseudo(PseudoSentinel::PseudoParent) => false,
        }
    }

    /// Checks that `pos` is structurally a candidate position of this taxonomy.
    pub fn check_position(&self, pos: &CandidatePosition) -> Result<(), GraphError> {
        let ok = match (pos.parent, pos.child) {
            (Endpoint::Concept(p), Endpoint::Concept(c)) => self.is_descendant(p, c),
            (Endpoint::Concept(p), Endpoint::Pseudo(PseudoSentinel::PseudoChild)) => {
                self.contains(p)
            }
            (Endpoint::Pseudo(PseudoSentinel::PseudoParent), Endpoint::Concept(c)) => {
                self.contains(c)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidPosition(*pos))
        }
    }

    pub fn classify_position(
        &self,
        query: ConceptId,
        pos: &CandidatePosition,
    ) -> Result<PositionClass, GraphError> {
        self.check(query)?;
        self.check_position(pos)?;
        let p = self.parent_matches(query, pos.parent);
        let c = self.child_matches(query, pos.child);
        Ok(match (p, c) {
            (true, true) => PositionClass::Positive,
            (false, false) => PositionClass::Negative,
            _ => PositionClass::PartialNegative,
        })
    }
}

/// Re-validates an edge list over ids `0..n` and reports its shape.
pub fn validate_dag(n: usize, edges: &[(ConceptId, ConceptId)]) -> Result<DagSummary, GraphError> {
    Taxonomy::new(n, edges.to_vec()).map(|t| t.summary())
}

fn topo_order(
    nodes: &[ConceptId],
    children: &[Vec<ConceptId>],
    parents: &[Vec<ConceptId>],
) -> Result<Vec<ConceptId>, GraphError> {
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut queue: VecDeque<ConceptId> = nodes
        .iter()
        .copied()
        .filter(|n| indeg[n.index()] == 0)
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = queue.pop_front() {
        order.push(n);
        for &c in &children[n.index()] {
            indeg[c.index()] -= 1;
            if indeg[c.index()] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    // Every node left with indeg > 0 lies on or below a cycle; walking parents
    // among them must revisit a node.
    let start = nodes
        .iter()
        .copied()
        .find(|n| indeg[n.index()] > 0)
        .expect("unsorted node exists");
    let mut path = vec![start];
    let mut pos = vec![usize::MAX; children.len()];
    pos[start.index()] = 0;
    let mut cur = start;
    loop {
        let next = parents[cur.index()]
            .iter()
            .copied()
            .find(|p| indeg[p.index()] > 0)
            .expect("blocked node has a blocked parent");
        if pos[next.index()] != usize::MAX {
            let mut cycle: Vec<ConceptId> = path[pos[next.index()]..].to_vec();
            cycle.reverse();
            cycle.insert(0, next);
            return Err(GraphError::CycleDetected(canonical_cycle(cycle)));
        }
        pos[next.index()] = path.len();
        path.push(next);
        cur = next;
    }
}

// Rotates a closed walk so that it starts (and ends) at its smallest node.
fn canonical_cycle(cycle: Vec<ConceptId>) -> Vec<ConceptId> {
    let open = &cycle[..cycle.len() - 1];
    let (start, _) = open
        .iter()
        .enumerate()
        .min_by_key(|(_, n)| **n)
        .expect("non-empty cycle");
    let mut out: Vec<ConceptId> = open[start..]
        .iter()
        .chain(&open[..start])
        .copied()
        .collect();
    out.push(out[0]);
    out
}
