//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape is append-only: every operation refers to earlier nodes, so the
//! recorded graph is acyclic by construction and backward is a single reverse
//! sweep. Each op carries a hand-written adjoint; `gradcheck` verifies them.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Activation, ShapeError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row selector for [`Tape::lookup`]: a row of the main table or of the
/// auxiliary (learned sentinel) table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowRef {
    Table(usize),
    Extra(usize),
}

/// Operation kinds, used to name ops in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Lookup,
    Concat,
    Linear,
    AddBias,
    Bilinear,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    RowDot,
    Bce,
    WeightedSum,
    SumAll,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Lookup,
        OpKind::Concat,
        OpKind::Linear,
        OpKind::AddBias,
        OpKind::Bilinear,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::RowDot,
        OpKind::Bce,
        OpKind::WeightedSum,
        OpKind::SumAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Lookup => "lookup",
            OpKind::Concat => "concat",
            OpKind::Linear => "linear",
            OpKind::AddBias => "add_bias",
            OpKind::Bilinear => "bilinear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::RowDot => "row_dot",
            OpKind::Bce => "bce",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::SumAll => "sum_all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

enum Value<'a> {
    Owned(Tensor),
    Param(ParamId),
    Borrowed(&'a Tensor),
}

enum Op {
    Leaf,
    Lookup {
        table: Var,
        extra: Option<Var>,
        rows: Vec<RowRef>,
    },
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Bilinear {
        x: Var,
        w: Var,
        t: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Act(Var, Activation),
    RowDot {
        x: Var,
        u: Var,
    },
    Bce {
        z: Var,
        labels: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    SumAll(Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Lookup { .. } => OpKind::Lookup,
            Op::Concat(_) => OpKind::Concat,
            Op::Linear { .. } => OpKind::Linear,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Bilinear { .. } => OpKind::Bilinear,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Act(_, Activation::Tanh) => OpKind::Tanh,
            Op::Act(_, Activation::Sigmoid) => OpKind::Sigmoid,
            Op::RowDot { .. } => OpKind::RowDot,
            Op::Bce { .. } => OpKind::Bce,
            Op::WeightedSum(_) => OpKind::WeightedSum,
            Op::SumAll(_) => OpKind::SumAll,
        })
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    /// Adds these gradients into the store's gradient slots.
    pub fn accumulate_into(self, store: &mut ParamStore) {
        for (id, g) in self.entries {
            store.accumulate(id, &g);
        }
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    fault: Option<OpKind>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the adjoint of one op kind. Used by self-check negative controls.
    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
            Value::Borrowed(t) => t,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Distinct op kinds recorded so far.
    pub fn op_kinds(&self) -> BTreeSet<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TapeError> {
        if !value.is_finite() {
            let kind = op.kind().map_or("leaf", OpKind::name);
            return Err(ShapeError::NonFinite(kind).into());
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn borrowed(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gathers rows from `table` (`[R, d]`) or from `extra` (`[E, d]`).
    pub fn lookup(
        &mut self,
        table: Var,
        extra: Option<Var>,
        rows: Vec<RowRef>,
    ) -> Result<Var, TapeError> {
        let tv = self.value(table);
        let d = tv.cols();
        let ev = extra.map(|e| self.value(e));
        if let Some(ev) = ev {
            if ev.cols() != d {
                return Err(ShapeError::Mismatch {
                    op: "lookup",
                    detail: format!("table {:?}, extra {:?}", tv.shape(), ev.shape()),
                }
                .into());
            }
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            let src = match (*r, ev) {
                (RowRef::Table(i), _) if i < tv.rows() => tv.row(i),
                (RowRef::Extra(i), Some(ev)) if i < ev.rows() => ev.row(i),
                _ => {
                    return Err(ShapeError::Mismatch {
                        op: "lookup",
                        detail: format!("row {r:?} out of range"),
                    }
                    .into())
                }
            };
            data.extend_from_slice(src);
        }
        let out = Tensor::matrix(rows.len(), d, data)?;
        let rg = self.rg(table) || extra.is_some_and(|e| self.rg(e));
        self.push(out, Op::Lookup { table, extra, rows }, rg)
    }

    /// Column-wise concatenation of row matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts
            .iter()
            .any(|&p| self.value(p).rows() != rows || self.value(p).rank() != 2)
        {
            return Err(ShapeError::Mismatch {
                op: "concat",
                detail: "row counts differ".into(),
            }
            .into());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for b in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(b));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, total, data)?,
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// `x wᵀ` with `w: [m, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TapeError> {
        let out = tensor::linear_rows(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Linear { x, w }, rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TapeError> {
        let mut out = self.value(x).clone();
        tensor::add_bias_rows(&mut out, self.value(b))?;
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias { x, b }, rg)
    }

    pub fn bilinear(&mut self, x: Var, w: Var, t: Var) -> Result<Var, TapeError> {
        let out = tensor::bilinear_rows(self.value(x), self.value(w), self.value(t))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(t);
        self.push(out, Op::Bilinear { x, w, t }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ShapeError::Mismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            }
            .into());
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var, TapeError> {
        let out = tensor::activate(kind, self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Act(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TapeError> {
        self.activate(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TapeError> {
        self.activate(x, Activation::Sigmoid)
    }

    /// Per-row dot product with a vector: `[B, n] · [n] -> [B]`.
    pub fn row_dot(&mut self, x: Var, u: Var) -> Result<Var, TapeError> {
        let xv = self.value(x);
        let uv = self.value(u);
        if uv.len() != xv.cols() {
            return Err(ShapeError::Mismatch {
                op: "row_dot",
                detail: format!("x {:?}, u {:?}", xv.shape(), uv.shape()),
            }
            .into());
        }
        let out = Tensor::vector(
            (0..xv.rows())
                .map(|b| tensor::dot(xv.row(b), uv.data()))
                .collect(),
        );
        let rg = self.rg(x) || self.rg(u);
        self.push(out, Op::RowDot { x, u }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `labels`.
    pub fn bce_with_logits(&mut self, z: Var, labels: Vec<f64>) -> Result<Var, TapeError> {
        let zv = self.value(z);
        if zv.len() != labels.len() || labels.is_empty() {
            return Err(ShapeError::Mismatch {
                op: "bce",
                detail: format!("{} logits, {} labels", zv.len(), labels.len()),
            }
            .into());
        }
        let n = labels.len() as f64;
        let loss: f64 = zv
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| bce_term(z, y))
            .sum::<f64>()
            / n;
        let rg = self.rg(z);
        self.push(Tensor::scalar(loss), Op::Bce { z, labels }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TapeError> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(ShapeError::Mismatch {
                    op: "weighted_sum",
                    detail: format!("term shape {:?}", t.shape()),
                }
                .into());
            }
            acc += w * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TapeError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// parameter leaf that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TapeError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                g.data_mut().iter_mut().for_each(|v| *v *= 1.5);
            }
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        match out.entries.iter_mut().find(|(pid, _)| *pid == id) {
                            Some((_, acc)) => acc.add_assign(&g),
                            None => out.entries.push((id, g)),
                        }
                    }
                }
                Op::Lookup { table, extra, rows } => {
                    let d = g.cols();
                    let mut gt = self
                        .rg(*table)
                        .then(|| Tensor::zeros(self.value(*table).shape()));
                    let mut ge = extra
                        .filter(|e| self.rg(*e))
                        .map(|e| Tensor::zeros(self.value(e).shape()));
                    for (b, r) in rows.iter().enumerate() {
                        let src = g.row(b);
                        let (dst, idx) = match r {
                            RowRef::Table(i) => (gt.as_mut(), *i),
                            RowRef::Extra(i) => (ge.as_mut(), *i),
                        };
                        if let Some(dst) = dst {
                            tensor::axpy(1.0, src, &mut dst.data_mut()[idx * d..(idx + 1) * d]);
                        }
                    }
                    if let Some(gt) = gt {
                        add_grad(&mut grads, *table, gt);
                    }
                    if let (Some(ge), Some(e)) = (ge, extra) {
                        add_grad(&mut grads, *e, ge);
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                    let total = g.cols();
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for b in 0..rows {
                                data.extend_from_slice(
                                    &g.data()[b * total + off..b * total + off + w],
                                );
                            }
                            add_grad(&mut grads, p, Tensor::matrix(rows, w, data)?);
                        }
                        off += w;
                    }
                }
                Op::Linear { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (rows, n, m) = (xv.rows(), xv.cols(), wv.rows());
                    if self.rg(*x) {
                        let mut gx = Tensor::zeros(xv.shape());
                        for b in 0..rows {
                            let gb = g.row(b);
                            let dst = &mut gx.data_mut()[b * n..(b + 1) * n];
                            for (o, &go) in gb.iter().enumerate() {
                                tensor::axpy(go, wv.row(o), dst);
                            }
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        let mut gw = Tensor::zeros(wv.shape());
                        for b in 0..rows {
                            let xb = xv.row(b);
                            for o in 0..m {
                                let go = g.data()[b * m + o];
                                if go != 0.0 {
                                    tensor::axpy(go, xb, &mut gw.data_mut()[o * n..(o + 1) * n]);
                                }
                            }
                        }
                        add_grad(&mut grads, *w, gw);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.rg(*b) {
                        let m = g.cols();
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            tensor::axpy(1.0, row, &mut gb);
                        }
                        let shape = self.value(*b).shape().to_vec();
                        add_grad(&mut grads, *b, Tensor::new(shape, gb)?);
                    }
                    if self.rg(*x) {
                        add_grad(&mut grads, *x, g);
                    }
                }
                Op::Bilinear { x, w, t } => {
                    let need = [self.rg(*x), self.rg(*w), self.rg(*t)];
                    let (gx, gw, gt) = tensor::bilinear_rows_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*t),
                        &g,
                        need,
                    );
                    for (v, gv) in [(*x, gx), (*w, gw), (*t, gt)] {
                        if let Some(gv) = gv {
                            add_grad(&mut grads, v, gv);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        add_grad(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        add_grad(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if self.rg(this) {
                            let ov = self.value(other);
                            let data = g.data().iter().zip(ov.data()).map(|(x, y)| x * y).collect();
                            add_grad(&mut grads, this, Tensor::new(g.shape().to_vec(), data)?);
                        }
                    }
                }
                Op::Act(x, kind) => {
                    let y = self.value(Var(i));
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, &yi)| gi * kind.derivative_from_output(yi))
                        .collect();
                    add_grad(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::RowDot { x, u } => {
                    let xv = self.value(*x);
                    let uv = self.value(*u);
                    let n = xv.cols();
                    if self.rg(*x) {
                        let mut gx = Tensor::zeros(xv.shape());
                        for (b, &gb) in g.data().iter().enumerate() {
                            tensor::axpy(gb, uv.data(), &mut gx.data_mut()[b * n..(b + 1) * n]);
                        }
                        add_grad(&mut grads, *x, gx);
                    }
                    if self.rg(*u) {
                        let mut gu = Tensor::zeros(uv.shape());
                        for (b, &gb) in g.data().iter().enumerate() {
                            tensor::axpy(gb, xv.row(b), gu.data_mut());
                        }
                        add_grad(&mut grads, *u, gu);
                    }
                }
                Op::Bce { z, labels } => {
                    let zv = self.value(*z);
                    let scale = g.item() / labels.len() as f64;
                    let data = zv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &yi)| scale * (tensor::sigmoid(zi) - yi))
                        .collect();
                    add_grad(&mut grads, *z, Tensor::new(zv.shape().to_vec(), data)?);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.rg(v) {
                            let shape = self.value(v).shape().to_vec();
                            add_grad(&mut grads, v, Tensor::new(shape, vec![w * g.item()])?);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    add_grad(
                        &mut grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), vec![g.item(); xv.len()])?,
                    );
                }
            }
        }
        Ok(out)
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable `-[y ln σ(z) + (1-y) ln(1-σ(z))]`.
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
