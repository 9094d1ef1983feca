//! Dataset ingestion, train/validation/test splitting with edge repair,
//! versioned persistence and synthetic taxonomies.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingTable, Word2Vec};
use crate::rng;
use crate::taxonomy::{CandidatePosition, ConceptId, GraphError, Taxonomy};
use crate::tensor::Tensor;

pub const ARCHIVE_FORMAT: &str = "tmn-archive";
pub const SPLIT_FORMAT: &str = "tmn-split";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("no embedding for term {0:?}")]
    MissingEmbedding(String),
    #[error("{context}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("split infeasible: {0}")]
    SplitInfeasible(String),
    #[error("{path}: expected {expected} version {version}, found {found}")]
    SchemaVersionMismatch {
        path: String,
        expected: &'static str,
        version: u32,
        found: String,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A loaded taxonomy together with its surface terms and features.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Identifier of each concept as written in the source files.
    pub external_ids: Vec<String>,
    pub terms: Vec<String>,
    pub taxonomy: Taxonomy,
    pub embeddings: EmbeddingTable,
}

impl Dataset {
    pub fn term(&self, id: ConceptId) -> &str {
        &self.terms[id.index()]
    }

    /// Resolves a concept by surface term or external id.
    pub fn find(&self, key: &str) -> Option<ConceptId> {
        self.embeddings
            .lookup(key)
            .or_else(|| self.external_ids.iter().position(|e| e == key))
            .map(ConceptId::from)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let archive = ArchiveFile {
            format: ARCHIVE_FORMAT.into(),
            version: FORMAT_VERSION,
            external_ids: self.external_ids.clone(),
            terms: self.terms.clone(),
            edges: self.taxonomy.edges().iter().map(|&(p, c)| [p, c]).collect(),
            dim: self.embeddings.dim(),
            vectors: self.embeddings.vectors().data().to_vec(),
        };
        write_json(path, &archive)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        check_header(&text, path, ARCHIVE_FORMAT)?;
        let a: ArchiveFile = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
        let n = a.terms.len();
        let taxonomy = Taxonomy::new(n, a.edges.iter().map(|e| (e[0], e[1])).collect())?;
        let vectors =
            Tensor::matrix(n, a.dim, a.vectors).map_err(|_| DataError::DimensionMismatch {
                context: path.display().to_string(),
                expected: n * a.dim,
                found: 0,
            })?;
        let embeddings = EmbeddingTable::new(&a.terms, vectors)?;
        Ok(Dataset {
            external_ids: a.external_ids,
            terms: a.terms,
            taxonomy,
            embeddings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ArchiveFile {
    format: String,
    version: u32,
    external_ids: Vec<String>,
    terms: Vec<String>,
    edges: Vec<[ConceptId; 2]>,
    dim: usize,
    vectors: Vec<f64>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn check_header(text: &str, path: &Path, expected: &'static str) -> Result<(), DataError> {
    let mismatch = |found: String| DataError::SchemaVersionMismatch {
        path: path.display().to_string(),
        expected,
        version: FORMAT_VERSION,
        found,
    };
    match serde_json::from_str::<Header>(text) {
        Ok(h) if h.format == expected && h.version == FORMAT_VERSION => Ok(()),
        Ok(h) => Err(mismatch(format!("{} version {}", h.format, h.version))),
        Err(e) if e.is_eof() => Err(mismatch("truncated file".into())),
        Err(e) => Err(json_err(path, e)),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> DataError {
    DataError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string(value).map_err(|e| json_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_tsv_pairs<R: BufRead>(
    reader: R,
    file: &str,
) -> Result<Vec<(usize, String, String)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse {
            file: file.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let Some((a, b)) = line.split_once('\t') else {
            return Err(DataError::Parse {
                file: file.into(),
                line: i + 1,
                msg: "expected two tab-separated fields".into(),
            });
        };
        out.push((i + 1, a.trim().to_string(), b.trim().to_string()));
    }
    Ok(out)
}

/// Parses the three source files from readers.
pub fn parse_dataset<A: BufRead, B: BufRead, C: BufRead>(
    terms: A,
    edges: B,
    embeddings: C,
    names: [&str; 3],
) -> Result<Dataset, DataError> {
    let term_rows = read_tsv_pairs(terms, names[0])?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut external_ids = Vec::with_capacity(term_rows.len());
    let mut term_list = Vec::with_capacity(term_rows.len());
    for (line, id, term) in term_rows {
        if index.insert(id.clone(), external_ids.len()).is_some() {
            return Err(DataError::Parse {
                file: names[0].into(),
                line,
                msg: format!("duplicate concept id {id:?}"),
            });
        }
        external_ids.push(id);
        term_list.push(term);
    }
    let mut edge_list = Vec::new();
    for (line, p, c) in read_tsv_pairs(edges, names[1])? {
        let resolve = |s: &str| {
            index
                .get(s)
                .map(|&i| ConceptId::from(i))
                .ok_or_else(|| DataError::Parse {
                    file: names[1].into(),
                    line,
                    msg: format!("unknown concept id {s:?}"),
                })
        };
        edge_list.push((resolve(&p)?, resolve(&c)?));
    }
    let taxonomy = Taxonomy::new(external_ids.len(), edge_list)?;

    let w2v = Word2Vec::parse(embeddings, names[2])?;
    let mut data = Vec::with_capacity(term_list.len() * w2v.dim);
    for (term, ext) in term_list.iter().zip(&external_ids) {
        let v = w2v
            .find(term, ext)
            .ok_or_else(|| DataError::MissingEmbedding(term.clone()))?;
        data.extend_from_slice(v);
    }
    let vectors = Tensor::matrix(term_list.len(), w2v.dim, data).expect("rows have header dim");
    let embeddings = EmbeddingTable::new(&term_list, vectors)?;
    Ok(Dataset {
        external_ids,
        terms: term_list,
        taxonomy,
        embeddings,
    })
}

/// Loads `terms` (`id<TAB>term`), `edges` (`parent<TAB>child`) and a word2vec
/// text embedding file.
pub fn load_dataset(terms: &Path, edges: &Path, embeddings: &Path) -> Result<Dataset, DataError> {
    let open = |p: &Path| fs::File::open(p).map(BufReader::new).map_err(io_err(p));
    let names = [terms, edges, embeddings].map(|p| p.display().to_string());
    parse_dataset(
        open(terms)?,
        open(edges)?,
        open(embeddings)?,
        [names[0].as_str(), names[1].as_str(), names[2].as_str()],
    )
}

/// Seed taxonomy plus held-out queries and their ground-truth positions.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub seed_taxonomy: Taxonomy,
    /// Edges added to keep the seed taxonomy connected after removals.
    pub repaired_edges: Vec<(ConceptId, ConceptId)>,
    pub val_queries: Vec<ConceptId>,
    pub test_queries: Vec<ConceptId>,
    pub ground_truth: BTreeMap<ConceptId, Vec<CandidatePosition>>,
    pub split_seed: u64,
    pub leaf_only: bool,
}

impl PartialEq for DatasetSplit {
    fn eq(&self, o: &Self) -> bool {
        self.seed_taxonomy.n_slots() == o.seed_taxonomy.n_slots()
            && self.seed_taxonomy.nodes() == o.seed_taxonomy.nodes()
            && self.seed_taxonomy.edges() == o.seed_taxonomy.edges()
            && self.repaired_edges == o.repaired_edges
            && self.val_queries == o.val_queries
            && self.test_queries == o.test_queries
            && self.ground_truth == o.ground_truth
            && self.split_seed == o.split_seed
            && self.leaf_only == o.leaf_only
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    format: String,
    version: u32,
    split_seed: u64,
    leaf_only: bool,
    n_slots: usize,
    seed_nodes: Vec<ConceptId>,
    seed_edges: Vec<[ConceptId; 2]>,
    repaired_edges: Vec<[ConceptId; 2]>,
    val_queries: Vec<ConceptId>,
    test_queries: Vec<ConceptId>,
    ground_truth: Vec<(ConceptId, Vec<CandidatePosition>)>,
}

impl DatasetSplit {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = SplitFile {
            format: SPLIT_FORMAT.into(),
            version: FORMAT_VERSION,
            split_seed: self.split_seed,
            leaf_only: self.leaf_only,
            n_slots: self.seed_taxonomy.n_slots(),
            seed_nodes: self.seed_taxonomy.nodes().to_vec(),
            seed_edges: self
                .seed_taxonomy
                .edges()
                .iter()
                .map(|&(p, c)| [p, c])
                .collect(),
            repaired_edges: self.repaired_edges.iter().map(|&(p, c)| [p, c]).collect(),
            val_queries: self.val_queries.clone(),
            test_queries: self.test_queries.clone(),
            ground_truth: self
                .ground_truth
                .iter()
                .map(|(q, v)| (*q, v.clone()))
                .collect(),
        };
        write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        check_header(&text, path, SPLIT_FORMAT)?;
        let f: SplitFile = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
        let seed_taxonomy = Taxonomy::with_nodes(
            f.n_slots,
            f.seed_nodes,
            f.seed_edges.iter().map(|e| (e[0], e[1])).collect(),
        )?;
        Ok(DatasetSplit {
            seed_taxonomy,
            repaired_edges: f.repaired_edges.iter().map(|e| (e[0], e[1])).collect(),
            val_queries: f.val_queries,
            test_queries: f.test_queries,
            ground_truth: f.ground_truth.into_iter().collect(),
            split_seed: f.split_seed,
            leaf_only: f.leaf_only,
        })
    }

    pub fn queries(&self, which: QuerySet) -> &[ConceptId] {
        match which {
            QuerySet::Val => &self.val_queries,
            QuerySet::Test => &self.test_queries,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySet {
    Val,
    Test,
}

/// Samples held-out queries, removes them from `full` and repairs the edges.
///
/// Queries are never roots and are pairwise non-adjacent, so every true
/// position of a query has both real endpoints in the seed taxonomy.
pub fn make_split(
    full: &Taxonomy,
    n_val: usize,
    n_test: usize,
    seed: u64,
    leaf_only: bool,
) -> Result<DatasetSplit, DataError> {
    let wanted = n_val + n_test;
    if wanted + 1 >= full.nodes().len() {
        return Err(DataError::SplitInfeasible(format!(
            "{wanted} queries requested from {} nodes",
            full.nodes().len()
        )));
    }
    let mut eligible: Vec<ConceptId> = full
        .nodes()
        .iter()
        .copied()
        .filter(|&n| !full.is_root(n) && (!leaf_only || full.is_leaf(n)))
        .collect();
    eligible.shuffle(&mut rng::stream(seed, "split", &[]));

    let mut blocked = vec![false; full.n_slots()];
    let mut picked = Vec::with_capacity(wanted);
    for n in eligible {
        if picked.len() == wanted {
            break;
        }
        if blocked[n.index()] {
            continue;
        }
        picked.push(n);
        blocked[n.index()] = true;
        for &m in full.parents(n)?.iter().chain(full.children(n)?) {
            blocked[m.index()] = true;
        }
    }
    if picked.len() < wanted {
        return Err(DataError::SplitInfeasible(format!(
            "only {} non-adjacent eligible queries, {wanted} requested",
            picked.len()
        )));
    }
    let mut val_queries = picked[..n_val].to_vec();
    let mut test_queries = picked[n_val..].to_vec();
    val_queries.sort_unstable();
    test_queries.sort_unstable();

    let mut removed = vec![false; full.n_slots()];
    for &q in &picked {
        removed[q.index()] = true;
    }
    let seed_nodes: Vec<ConceptId> = full
        .nodes()
        .iter()
        .copied()
        .filter(|n| !removed[n.index()])
        .collect();
    let mut children: Vec<Vec<ConceptId>> = vec![Vec::new(); full.n_slots()];
    let mut edges = Vec::new();
    for &(p, c) in full.edges() {
        if !removed[p.index()] && !removed[c.index()] {
            children[p.index()].push(c);
            edges.push((p, c));
        }
    }
    let mut sorted_picked = picked.clone();
    sorted_picked.sort_unstable();
    let mut repaired = Vec::new();
    for &q in &sorted_picked {
        for &p in full.parents(q)? {
            for &c in full.children(q)? {
                if !reaches(&children, p, c) {
                    children[p.index()].push(c);
                    edges.push((p, c));
                    repaired.push((p, c));
                }
            }
        }
    }
    let seed_taxonomy = Taxonomy::with_nodes(full.n_slots(), seed_nodes, edges)?;

    let mut ground_truth = BTreeMap::new();
    for &q in &sorted_picked {
        let truth: Vec<CandidatePosition> = full
            .true_positions(q, false)?
            .into_iter()
            .filter(|pos| {
                [pos.parent, pos.child]
                    .iter()
                    .all(|e| e.concept().is_none_or(|c| seed_taxonomy.contains(c)))
            })
            .collect();
        debug_assert!(!truth.is_empty());
        ground_truth.insert(q, truth);
    }
    Ok(DatasetSplit {
        seed_taxonomy,
        repaired_edges: repaired,
        val_queries,
        test_queries,
        ground_truth,
        split_seed: seed,
        leaf_only,
    })
}

fn reaches(children: &[Vec<ConceptId>], from: ConceptId, to: ConceptId) -> bool {
    let mut seen = vec![false; children.len()];
    let mut queue = VecDeque::from([from]);
    seen[from.index()] = true;
    while let Some(n) = queue.pop_front() {
        for &c in &children[n.index()] {
            if c == to {
                return true;
            }
            if !seen[c.index()] {
                seen[c.index()] = true;
                queue.push_back(c);
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    /// Maximum number of children per node.
    pub branching: usize,
    pub dim: usize,
    /// Norm of the perturbation separating a child from its parent.
    pub noise: f64,
    /// Probability that a node gets a second parent.
    pub extra_parent_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 200,
            branching: 4,
            dim: 16,
            noise: 1.0,
            extra_parent_prob: 0.0,
            seed: 0,
        }
    }
}

/// Random tree-like taxonomy whose embeddings drift from parent to child.
pub fn synth_taxonomy(cfg: &SynthConfig) -> Dataset {
    assert!(
        cfg.n_nodes >= 2,
        "synthetic taxonomy needs at least two nodes"
    );
    assert!(cfg.branching >= 1 && cfg.dim >= 1);
    let mut r = rng::stream(cfg.seed, "synth", &[]);
    let n = cfg.n_nodes;
    let mut first_parent = vec![0usize; n];
    let mut n_children = vec![0usize; n];
    let mut depth = vec![0usize; n];
    let mut open: Vec<usize> = vec![0];
    let mut edges = Vec::new();
    for i in 1..n {
        let slot = r.gen_range(0..open.len());
        let p = open[slot];
        first_parent[i] = p;
        depth[i] = depth[p] + 1;
        edges.push((ConceptId::from(p), ConceptId::from(i)));
        n_children[p] += 1;
        if n_children[p] >= cfg.branching {
            open.swap_remove(slot);
        }
        open.push(i);
        if cfg.extra_parent_prob > 0.0 && r.gen_bool(cfg.extra_parent_prob.min(1.0)) {
            let peers: Vec<usize> = (0..i).filter(|&j| j != p && depth[j] == depth[p]).collect();
            if let Some(&q) = peers.as_slice().choose(&mut r) {
                edges.push((ConceptId::from(q), ConceptId::from(i)));
            }
        }
    }
    let mut data = vec![0.0; n * cfg.dim];
    let root = unit_vector(&mut r, cfg.dim);
    data[..cfg.dim].copy_from_slice(&root);
    for i in 1..n {
        let u = unit_vector(&mut r, cfg.dim);
        let p = first_parent[i];
        for j in 0..cfg.dim {
            data[i * cfg.dim + j] = data[p * cfg.dim + j] + cfg.noise * u[j];
        }
    }
    let terms: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    let external_ids = (0..n).map(|i| i.to_string()).collect();
    let taxonomy = Taxonomy::new(n, edges).expect("edges point from older to newer nodes");
    let embeddings = EmbeddingTable::new(&terms, Tensor::matrix(n, cfg.dim, data).expect("sized"))
        .expect("finite");
    Dataset {
        external_ids,
        terms,
        taxonomy,
        embeddings,
    }
}

/// Uniform direction on the unit sphere.
fn unit_vector<R: Rng>(r: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Writes the three text source files for `data` into `dir`.
pub fn export_sources(data: &Dataset, dir: &Path) -> Result<[PathBuf; 3], DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let terms = dir.join("terms.tsv");
    let edges = dir.join("edges.tsv");
    let emb = dir.join("embeddings.txt");
    let mut t = String::new();
    for (id, term) in data.external_ids.iter().zip(&data.terms) {
        t.push_str(&format!("{id}\t{term}\n"));
    }
    fs::write(&terms, t).map_err(io_err(&terms))?;
    let mut e = String::new();
    for &(p, c) in data.taxonomy.edges() {
        e.push_str(&format!(
            "{}\t{}\n",
            data.external_ids[p.index()],
            data.external_ids[c.index()]
        ));
    }
    fs::write(&edges, e).map_err(io_err(&edges))?;
    let mut w = format!("{} {}\n", data.terms.len(), data.embeddings.dim());
    for (i, term) in data.terms.iter().enumerate() {
        w.push_str(&term.replace(' ', "_"));
        for v in data.embeddings.row(i) {
            w.push_str(&format!(" {v:?}"));
        }
        w.push('\n');
    }
    fs::write(&emb, w).map_err(io_err(&emb))?;
    Ok([terms, edges, emb])
}
