//! Built-in correctness checks: per-op and full-loss gradient checks,
//! candidate enumeration against brute force, and metric fixtures.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::model::{forward_on, joint_loss, Labels, Model, ModelError, ModelSpec, TmnConfig};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{OpKind, RowRef, Tape, TapeError, Var};
use crate::taxonomy::{CandidatePosition, ConceptId, Taxonomy};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
    pub worst_grad_error: f64,
    /// Ops whose adjoints the failing gradient checks point to.
    pub suspect_ops: Vec<OpKind>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_tensor<R: Rng>(r: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-scale..scale)).collect(),
    )
    .expect("sized")
}

/// Gradient check of an arbitrary graph over `store`. Returns the report and
/// the op kinds the graph used.
pub fn graph_gradcheck<F>(
    store: &mut ParamStore,
    fault: Option<OpKind>,
    build: F,
) -> Result<(GradCheckReport, BTreeSet<OpKind>), TapeError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, TapeError>,
{
    store.zero_grad();
    let (grads, kinds) = {
        let mut tape = Tape::new(store).with_fault(fault);
        let loss = build(&mut tape)?;
        (tape.backward(loss)?, tape.op_kinds())
    };
    grads.accumulate_into(store);
    let report = finite_diff_check(
        |s| {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape).expect("graph built once already");
            tape.value(loss).item()
        },
        store,
        FD_EPS,
    );
    Ok((report, kinds))
}

/// Finite-difference check of the full joint loss of a randomly
/// parameterized TMN on a random batch with pseudo endpoints.
pub fn joint_loss_gradcheck(
    cfg: &TmnConfig,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<(GradCheckReport, BTreeSet<OpKind>), ModelError> {
    let mut r = rng::stream(seed, "gradcheck", &[]);
    let n = 6;
    let table = random_tensor(&mut r, &[n, cfg.dim], 1.0);
    let mut model = Model::init(ModelSpec::Tmn(cfg.clone()), seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = random_tensor(&mut r, &shape, 0.5);
    }
    let c = |i: u32| ConceptId(i);
    let rows = vec![
        (c(0), CandidatePosition::new(c(1), c(2))),
        (c(0), CandidatePosition::leaf(c(3))),
        (c(0), CandidatePosition::new(c(4), c(5))),
        (c(0), CandidatePosition::root(c(2))),
        (c(3), CandidatePosition::new(c(1), c(5))),
        (c(3), CandidatePosition::leaf(c(4))),
    ];
    let labels = Labels {
        y: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        y_parent: vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        y_child: vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    };
    let spec = model.spec.clone();
    fn loss_graph<'a>(
        spec: &ModelSpec,
        store: &ParamStore,
        tape: &mut Tape<'a>,
        table: &'a Tensor,
        rows: &[(ConceptId, CandidatePosition)],
        labels: &Labels,
    ) -> Result<Var, ModelError> {
        let out = forward_on(spec, store, tape, table, rows)?;
        Ok(joint_loss(spec, tape, &out, labels)?.0)
    }
    model.store.zero_grad();
    let (grads, kinds) = {
        let mut tape = Tape::new(&model.store).with_fault(fault);
        let loss = loss_graph(&spec, &model.store, &mut tape, &table, &rows, &labels)?;
        (tape.backward(loss)?, tape.op_kinds())
    };
    grads.accumulate_into(&mut model.store);
    let report = finite_diff_check(
        |s| {
            let mut tape = Tape::new(s);
            let loss = loss_graph(&spec, s, &mut tape, &table, &rows, &labels)
                .expect("graph built once already");
            tape.value(loss).item()
        },
        &mut model.store,
        FD_EPS,
    );
    Ok((report, kinds))
}

fn op_cases(
    fault: Option<OpKind>,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport, BTreeSet<OpKind>)>, TapeError> {
    let mut r = rng::stream(seed, "op-cases", &[]);
    let mut out = Vec::new();
    let mut run =
        |name: &str,
         shapes: &[&[usize]],
         build: &dyn Fn(&mut Tape<'_>, &[crate::params::ParamId]) -> Result<Var, TapeError>|
         -> Result<(), TapeError> {
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.insert(&format!("p{i}"), random_tensor(&mut r, s, 1.0)))
                .collect();
            let (rep, kinds) = graph_gradcheck(&mut store, fault, |t| build(t, &ids))?;
            out.push((name.to_string(), rep, kinds));
            Ok(())
        };
    run("lookup", &[&[3, 2], &[2, 2]], &|t, p| {
        let (a, e) = (t.param(p[0]), t.param(p[1]));
        let y = t.lookup(
            a,
            Some(e),
            vec![
                RowRef::Table(0),
                RowRef::Extra(1),
                RowRef::Table(0),
                RowRef::Table(2),
            ],
        )?;
        t.sum_all(y)
    })?;
    run("concat", &[&[2, 3], &[2, 1]], &|t, p| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let y = t.concat(&[a, b])?;
        t.sum_all(y)
    })?;
    run("linear", &[&[3, 4], &[2, 4]], &|t, p| {
        let (x, w) = (t.param(p[0]), t.param(p[1]));
        let y = t.linear(x, w)?;
        t.sum_all(y)
    })?;
    run("add_bias", &[&[3, 2], &[2]], &|t, p| {
        let (x, b) = (t.param(p[0]), t.param(p[1]));
        let y = t.add_bias(x, b)?;
        t.sum_all(y)
    })?;
    run("bilinear", &[&[2, 3], &[2, 3, 4], &[2, 4]], &|t, p| {
        let (x, w, z) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
        let y = t.bilinear(x, w, z)?;
        t.sum_all(y)
    })?;
    run("add", &[&[2, 2], &[2, 2]], &|t, p| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let y = t.add(a, b)?;
        t.sum_all(y)
    })?;
    run("mul", &[&[2, 3], &[2, 3]], &|t, p| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        let y = t.mul(a, b)?;
        t.sum_all(y)
    })?;
    run("tanh", &[&[2, 3]], &|t, p| {
        let a = t.param(p[0]);
        let y = t.tanh(a)?;
        t.sum_all(y)
    })?;
    run("sigmoid", &[&[2, 3]], &|t, p| {
        let a = t.param(p[0]);
        let y = t.sigmoid(a)?;
        t.sum_all(y)
    })?;
    run("row_dot", &[&[3, 4], &[4]], &|t, p| {
        let (x, u) = (t.param(p[0]), t.param(p[1]));
        let y = t.row_dot(x, u)?;
        t.sum_all(y)
    })?;
    run("bce", &[&[4]], &|t, p| {
        let z = t.param(p[0]);
        t.bce_with_logits(z, vec![1.0, 0.0, 0.0, 1.0])
    })?;
    run("weighted_sum", &[&[1], &[1]], &|t, p| {
        let (a, b) = (t.param(p[0]), t.param(p[1]));
        t.weighted_sum(&[(a, 0.3), (b, -2.0)])
    })?;
    run("sum_all", &[&[2, 3]], &|t, p| {
        let a = t.param(p[0]);
        t.sum_all(a)
    })?;
    Ok(out)
}

/// Strict ancestor–descendant pairs by brute force, plus pseudo children.
pub fn brute_force_candidates(
    n: usize,
    edges: &[(ConceptId, ConceptId)],
    allow_pseudo_parent: bool,
) -> Vec<CandidatePosition> {
    let mut reach = vec![vec![false; n]; n];
    for &(p, c) in edges {
        reach[p.index()][c.index()] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if reach[i][j] {
                out.push(CandidatePosition::new(
                    ConceptId::from(i),
                    ConceptId::from(j),
                ));
            }
        }
        out.push(CandidatePosition::leaf(ConceptId::from(i)));
        if allow_pseudo_parent {
            out.push(CandidatePosition::root(ConceptId::from(i)));
        }
    }
    out.sort();
    out
}

/// Random DAG: edges only from lower to higher ids.
pub fn random_dag<R: Rng>(r: &mut R, n: usize, p: f64) -> Vec<(ConceptId, ConceptId)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.gen_bool(p) {
                edges.push((ConceptId::from(i), ConceptId::from(j)));
            }
        }
    }
    edges
}

fn enumeration_check(seed: u64) -> CheckResult {
    let mut r = rng::stream(seed, "enum-check", &[]);
    for case in 0..20 {
        let n = r.gen_range(1..=25);
        let edges = random_dag(&mut r, n, 0.15);
        let tax = Taxonomy::new(n, edges.clone()).expect("forward edges are acyclic");
        let mut got = tax.enumerate_candidates(false);
        got.sort();
        if got != brute_force_candidates(n, &edges, false) {
            return CheckResult {
                name: "enumeration".into(),
                passed: false,
                detail: format!("case {case}: candidate sets differ"),
            };
        }
    }
    CheckResult {
        name: "enumeration".into(),
        passed: true,
        detail: "20 random DAGs match brute force".into(),
    }
}

fn metric_check() -> CheckResult {
    let ok = eval::mrr_scaled(&[vec![1, 11]]) == Ok(0.75)
        && eval::mean_rank(&[vec![2, 4]]) == Ok(3.0)
        && eval::mean_rank(&[vec![1], vec![5]]) == Ok(3.0)
        && eval::recall_precision_at_k(&[vec![3, 50]], &[10])
            .map(|(r, p)| r[&10] == 0.5 && p[&10] == 0.1)
            .unwrap_or(false)
        && eval::true_ranks(&[0.1, 0.9, 0.5], &[2]) == vec![2];
    CheckResult {
        name: "metrics".into(),
        passed: ok,
        detail: if ok {
            "fixtures match".into()
        } else {
            "fixture mismatch".into()
        },
    }
}

/// Runs every check. `fault` corrupts one op's adjoint as a negative control.
pub fn run(fault: Option<OpKind>) -> SelfCheckReport {
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    let mut failing: Vec<BTreeSet<OpKind>> = Vec::new();
    let mut passing: BTreeSet<OpKind> = BTreeSet::new();
    let mut record = |name: String,
                      rep: Result<(GradCheckReport, BTreeSet<OpKind>), String>,
                      checks: &mut Vec<CheckResult>| {
        match rep {
            Ok((rep, kinds)) => {
                worst = worst.max(rep.max_rel_error);
                let passed = rep.max_rel_error < GRAD_TOLERANCE;
                if passed {
                    passing.extend(kinds.iter().copied());
                } else {
                    failing.push(kinds);
                }
                let at = rep
                    .worst
                    .as_ref()
                    .map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
                checks.push(CheckResult {
                    name,
                    passed,
                    detail: format!(
                        "max rel error {:.3e}{at} over {} entries",
                        rep.max_rel_error, rep.entries
                    ),
                });
            }
            Err(e) => checks.push(CheckResult {
                name,
                passed: false,
                detail: e,
            }),
        }
    };
    match op_cases(fault, 11) {
        Ok(cases) => {
            for (name, rep, kinds) in cases {
                record(format!("grad/{name}"), Ok((rep, kinds)), &mut checks);
            }
        }
        Err(e) => record("grad/ops".into(), Err(e.to_string()), &mut checks),
    }
    for (i, gating) in [true, false].into_iter().enumerate() {
        let cfg = TmnConfig {
            dim: 4,
            k: 3,
            gating,
            ..TmnConfig::new(4)
        };
        let rep = joint_loss_gradcheck(&cfg, 100 + i as u64, fault).map_err(|e| e.to_string());
        record(
            format!("grad/tmn_joint_loss(gating={gating})"),
            rep,
            &mut checks,
        );
    }
    checks.push(enumeration_check(5));
    checks.push(metric_check());

    let suspect_ops = if failing.is_empty() {
        Vec::new()
    } else {
        let mut common = failing[0].clone();
        for f in &failing[1..] {
            common = common.intersection(f).copied().collect();
        }
        common.difference(&passing).copied().collect()
    };
    SelfCheckReport {
        checks,
        worst_grad_error: worst,
        suspect_ops,
    }
}
