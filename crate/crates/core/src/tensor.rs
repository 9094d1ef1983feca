//! Dense row-major `f64` tensors and the handful of kernels the scorers need.
//!
//! Batched kernels take row matrices `[B, n]`; the single-vector functions
//! (`bilinear_form`, `affine`, `activate`) are thin wrappers with `B = 1`.
//! Bilinear tensors are stored slice-major as `[k, d, m]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Mismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

fn mismatch(op: &'static str, detail: String) -> ShapeError {
    ShapeError::Mismatch { op, detail }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ShapeError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension of a row matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing width of a row matrix (product of all non-leading dims).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output value.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn activate(kind: Activation, z: &Tensor) -> Tensor {
    Tensor {
        shape: z.shape.clone(),
        data: z.data.iter().map(|&v| kind.apply(v)).collect(),
    }
}

/// `x_qᵀ W⁽ⁱ⁾ x_t` for every slice `i` of `w` (`[k, d, m]`).
pub fn bilinear_form(x: &Tensor, w: &Tensor, t: &Tensor) -> Result<Tensor, ShapeError> {
    let xs = Tensor::matrix(1, x.len(), x.data.clone())?;
    let ts = Tensor::matrix(1, t.len(), t.data.clone())?;
    let out = bilinear_rows(&xs, w, &ts)?;
    Ok(Tensor::vector(out.data))
}

/// `V z + b` for a `[k, m]` matrix.
pub fn affine(v: &Tensor, z: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    let zs = Tensor::matrix(1, z.len(), z.data.clone())?;
    let mut out = linear_rows(&zs, v)?;
    add_bias_rows(&mut out, b)?;
    Ok(Tensor::vector(out.data))
}

fn check_bilinear(
    x: &Tensor,
    w: &Tensor,
    t: &Tensor,
) -> Result<(usize, usize, usize, usize), ShapeError> {
    if w.rank() != 3 {
        return Err(mismatch(
            "bilinear",
            format!("weight must be [k, d, m], got {:?}", w.shape),
        ));
    }
    let (k, d, m) = (w.shape[0], w.shape[1], w.shape[2]);
    if x.rank() != 2 || t.rank() != 2 || x.cols() != d || t.cols() != m || x.rows() != t.rows() {
        return Err(mismatch(
            "bilinear",
            format!("x {:?}, W {:?}, t {:?}", x.shape, w.shape, t.shape),
        ));
    }
    Ok((x.rows(), k, d, m))
}

/// Row-batched bilinear product: `out[b, i] = x[b]ᵀ W[i] t[b]`.
pub fn bilinear_rows(x: &Tensor, w: &Tensor, t: &Tensor) -> Result<Tensor, ShapeError> {
    let (rows, k, d, m) = check_bilinear(x, w, t)?;
    let mut out = vec![0.0; rows * k];
    for b in 0..rows {
        let xb = &x.data[b * d..(b + 1) * d];
        let tb = &t.data[b * m..(b + 1) * m];
        for i in 0..k {
            let slice = &w.data[i * d * m..(i + 1) * d * m];
            let mut acc = 0.0;
            for (j, &xj) in xb.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                acc += xj * dot(&slice[j * m..(j + 1) * m], tb);
            }
            out[b * k + i] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![rows, k],
        data: out,
    })
}

/// Adjoints of `bilinear_rows` given the upstream gradient `g` (`[B, k]`).
pub fn bilinear_rows_backward(
    x: &Tensor,
    w: &Tensor,
    t: &Tensor,
    g: &Tensor,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (rows, k, d, m) = check_bilinear(x, w, t).expect("forward shapes were checked");
    let mut gx = need[0].then(|| Tensor::zeros(&x.shape));
    let mut gw = need[1].then(|| Tensor::zeros(&w.shape));
    let mut gt = need[2].then(|| Tensor::zeros(&t.shape));
    for b in 0..rows {
        let xb = &x.data[b * d..(b + 1) * d];
        let tb = &t.data[b * m..(b + 1) * m];
        for i in 0..k {
            let gbi = g.data[b * k + i];
            if gbi == 0.0 {
                continue;
            }
            let slice = &w.data[i * d * m..(i + 1) * d * m];
            for j in 0..d {
                let row = &slice[j * m..(j + 1) * m];
                if let Some(gx) = gx.as_mut() {
                    gx.data[b * d + j] += gbi * dot(row, tb);
                }
                let s = gbi * xb[j];
                if s == 0.0 {
                    continue;
                }
                if let Some(gt) = gt.as_mut() {
                    axpy(s, row, &mut gt.data[b * m..(b + 1) * m]);
                }
                if let Some(gw) = gw.as_mut() {
                    let off = i * d * m + j * m;
                    axpy(s, tb, &mut gw.data[off..off + m]);
                }
            }
        }
    }
    (gx, gw, gt)
}

/// `x Wᵀ` for `x: [B, n]`, `w: [m, n]`.
pub fn linear_rows(x: &Tensor, w: &Tensor) -> Result<Tensor, ShapeError> {
    if w.rank() != 2 || x.rank() != 2 || x.cols() != w.shape[1] {
        return Err(mismatch(
            "linear",
            format!("x {:?}, W {:?}", x.shape, w.shape),
        ));
    }
    let (rows, n, m) = (x.rows(), x.cols(), w.shape[0]);
    let mut out = vec![0.0; rows * m];
    for b in 0..rows {
        let xb = &x.data[b * n..(b + 1) * n];
        for o in 0..m {
            out[b * m + o] = dot(&w.data[o * n..(o + 1) * n], xb);
        }
    }
    Ok(Tensor {
        shape: vec![rows, m],
        data: out,
    })
}

pub fn add_bias_rows(x: &mut Tensor, b: &Tensor) -> Result<(), ShapeError> {
    if b.len() != x.cols() {
        return Err(mismatch(
            "add_bias",
            format!("x {:?}, b {:?}", x.shape, b.shape),
        ));
    }
    let m = b.len();
    for row in x.data.chunks_mut(m) {
        for (v, bi) in row.iter_mut().zip(&b.data) {
            *v += bi;
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
