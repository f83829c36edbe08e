//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward rule. [`Graph::backward`] walks the tape in
//! reverse, so gradients are accumulated in a fixed order and repeated runs
//! are bit-identical.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// tanh approximation.
    Gelu,
    Silu,
    Exp,
    Log,
    Tanh,
    Neg,
}

/// One attention sequence inside a row-stacked batch.
#[derive(Debug, Clone)]
pub struct Segment {
    /// First row of the sequence in the stacked `[rows, 3d]` input.
    pub start: usize,
    pub len: usize,
    /// Row-major `len × len` indices into the per-head bias table.
    pub bias_index: Option<Rc<Vec<usize>>>,
}

/// Geometry of a fused multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<Segment>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleRows(Var, Rc<Vec<T>>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Attention {
        qkv: Var,
        table: Option<Var>,
        layout: Rc<AttentionLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Build one per forward pass; it is dropped after backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    check_finite: bool,
}

/// Gradients indexed by tape position.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape2(op, a, b)
}

/// tanh through a single `exp`, several times cheaper than libm's `tanhf`;
/// absolute error stays within a few ulps of 1.
fn tanh_via_exp<T: Scalar>(z: T) -> T {
    let two = T::from_f64_lossy(2.0);
    let t = T::one() - two / ((two * z.abs()).exp() + T::one());
    if z < T::zero() {
        -t
    } else {
        t
    }
}

fn unary_fwd<T: Scalar>(kind: Unary, x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        Unary::Gelu => {
            let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let k = T::from_f64_lossy(0.044715);
            half * x * (T::one() + tanh_via_exp(c * (x + k * x * x * x)))
        }
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Neg => -x,
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    let half = T::from_f64_lossy(0.5);
    match kind {
        Unary::Gelu => {
            let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let k = T::from_f64_lossy(0.044715);
            let three = T::from_f64_lossy(3.0);
            let th = tanh_via_exp(c * (x + k * x * x * x));
            half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
        }
        Unary::Silu => {
            let s = T::one() / (T::one() + (-x).exp());
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Tanh => T::one() - y * y,
        Unary::Neg => -T::one(),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any primitive whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "primitive #{} ({}) produced a non-finite value",
                self.nodes.len(),
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let n = va.cols();
        if vr.numel() != n {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = va
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<Vec<T>>) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if factors.len() != va.rows() {
            return Err(shape_err("scale_rows", va.shape(), &[factors.len()]));
        }
        let n = va.cols();
        let data = va
            .data()
            .chunks(n)
            .zip(factors.iter())
            .flat_map(|(chunk, &f)| chunk.iter().map(move |&x| x * f))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, Op::ScaleRows(a, factors), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            if va.shape().len() != 2 || vb.shape().len() != 2 {
                return Err(shape_err("matmul", va.shape(), vb.shape()));
            }
            va.matmul(vb)?
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.transpose()?;
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Concatenation of rank-2 tensors along rows or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 2 {
            return Err(shape_err("concat", &first, &[]));
        }
        for p in &parts[1..] {
            let s = self.nodes[p.0].value.shape();
            let ok = s.len() == 2
                && match axis {
                    Axis::Rows => s[1] == first[1],
                    Axis::Cols => s[0] == first[0],
                };
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
        }
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = &self.nodes[p.0].value;
                    rows += v.shape()[0];
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, first[1]], data)?
            }
            Axis::Cols => {
                let rows = first[0];
                let total: usize = parts.iter().map(|p| self.nodes[p.0].value.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Contiguous slice `[start, start + len)` along an axis of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(shape_err("slice", s, &[start, len]));
        }
        let extent = match axis {
            Axis::Rows => s[0],
            Axis::Cols => s[1],
        };
        if len == 0 || start + len > extent {
            return Err(shape_err("slice", s, &[start, len]));
        }
        let out = match axis {
            Axis::Rows => Tensor::new(
                vec![len, s[1]],
                va.data()[start * s[1]..(start + len) * s[1]].to_vec(),
            )?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(s[0] * len);
                for r in 0..s[0] {
                    data.extend_from_slice(&va.row(r)[start..start + len]);
                }
                Tensor::new(vec![s[0], len], data)?
            }
        };
        let ng = self.needs(a);
        self.push(out, Op::Slice(a, axis, start), ng)
    }

    /// Splits along an axis into consecutive pieces of the given widths.
    pub fn split(&mut self, a: Var, axis: Axis, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(a, axis, start, w)?);
            start += w;
        }
        let s = self.shape(a);
        let extent = if axis == Axis::Rows { s[0] } else { s[1] };
        if start != extent {
            return Err(shape_err("split", s, widths));
        }
        Ok(out)
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let (rows, n) = (va.rows(), va.cols());
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(shape_err("gather_rows", va.shape(), &[index.len()]));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::new(vec![index.len(), n], data)?;
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, index), ng)
    }

    /// Writes row `i` of `a` to row `index[i]` of a zero `[out_rows, n]` tensor.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, index: Rc<Vec<usize>>, out_rows: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        if index.len() != va.rows() || index.iter().any(|&i| i >= out_rows) {
            return Err(shape_err("scatter_rows", va.shape(), &[out_rows, n]));
        }
        let mut seen = vec![false; out_rows];
        let mut out = Tensor::zeros(&[out_rows, n]);
        for (src, &dst) in index.iter().enumerate() {
            if std::mem::replace(&mut seen[dst], true) {
                return Err(Error::Shape {
                    op: "scatter_rows",
                    detail: format!("duplicate destination row {dst}"),
                });
            }
            out.data_mut()[dst * n..(dst + 1) * n].copy_from_slice(va.row(src));
        }
        let ng = self.needs(a);
        self.push(out, Op::ScatterRows(a, index), ng)
    }

    /// Repeats a single-row tensor `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        if self.nodes[a.0].value.rows() != 1 {
            return Err(shape_err("broadcast_row", self.shape(a), &[rows]));
        }
        self.gather_rows(a, Rc::new(vec![0; rows]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = va.cols();
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks(n) {
            softmax_into(row, &mut data);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// optional per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let n = vx.cols();
        for p in [gamma, beta].into_iter().flatten() {
            if self.nodes[p.0].value.numel() != n {
                return Err(shape_err("layer_norm", vx.shape(), self.nodes[p.0].value.shape()));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let g = gamma.map(|v| self.nodes[v.0].value.data().to_vec());
        let b = beta.map(|v| self.nodes[v.0].value.data().to_vec());
        let mut data = xhat.clone();
        for row in data.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(g) = &g {
                    *v = *v * g[j];
                }
                if let Some(b) = &b {
                    *v = *v + b[j];
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || gamma.is_some_and(|v| self.needs(v)) || beta.is_some_and(|v| self.needs(v));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| unary_fwd(kind, x));
        let ng = self.needs(a);
        self.push(out, Op::Unary(a, kind), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let s = v.sum() / T::from_usize(v.numel()).unwrap();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Multi-head self-attention `softmax(QKᵀ/√d_k + B)V` over row-stacked
    /// sequences. `qkv` is `[rows, 3d]` with Q, K, V blocks side by side; the
    /// optional `table` is `[heads, extent]` and each segment supplies the
    /// index matrix selecting its bias entries.
    pub fn attention(&mut self, qkv: Var, table: Option<Var>, layout: Rc<AttentionLayout>) -> Result<Var> {
        let vq = &self.nodes[qkv.0].value;
        let (rows, three_d) = (vq.rows(), vq.cols());
        let heads = layout.heads;
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(shape_err("attention", vq.shape(), &[heads]));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let tab = table.map(|t| &self.nodes[t.0].value);
        if let Some(tab) = tab {
            if tab.shape().len() != 2 || tab.shape()[0] != heads {
                return Err(shape_err("attention", vq.shape(), tab.shape()));
            }
        }
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = Vec::new();
        let mut covered = 0;
        for seg in &layout.segments {
            let n = seg.len;
            if seg.start + n > rows {
                return Err(shape_err("attention", vq.shape(), &[seg.start, n]));
            }
            covered += n;
            match (&seg.bias_index, tab) {
                (Some(ix), Some(_)) if ix.len() != n * n => {
                    return Err(shape_err("attention", &[n, n], &[ix.len()]));
                }
                (Some(_), None) | (None, Some(_)) => {
                    return Err(Error::Contract(
                        "attention: bias table and per-segment index must be given together".into(),
                    ));
                }
                _ => {}
            }
            let base = seg.start * three_d;
            let src = &vq.data()[base..];
            for h in 0..heads {
                let mut s = vec![T::zero(); n * n];
                // S = scale · Q Kᵀ
                T::gemm(
                    n,
                    dh,
                    n,
                    scale,
                    &src[h * dh..],
                    three_d as isize,
                    1,
                    &src[d + h * dh..],
                    1,
                    three_d as isize,
                    T::zero(),
                    &mut s,
                    n as isize,
                    1,
                );
                if let (Some(ix), Some(tab)) = (&seg.bias_index, tab) {
                    let trow = tab.row(h);
                    for (sv, &i) in s.iter_mut().zip(ix.iter()) {
                        *sv = *sv + trow[i];
                    }
                }
                let mut p = Vec::with_capacity(n * n);
                for row in s.chunks(n) {
                    softmax_into(row, &mut p);
                }
                T::gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    &p,
                    n as isize,
                    1,
                    &src[2 * d + h * dh..],
                    three_d as isize,
                    1,
                    T::zero(),
                    &mut out.data_mut()[seg.start * d + h * dh..],
                    d as isize,
                    1,
                );
                probs.extend_from_slice(&p);
            }
        }
        if covered != rows {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("segments cover {covered} of {rows} rows"),
            });
        }
        let ng = self.needs(qkv) || table.is_some_and(|t| self.needs(t));
        self.push(
            out,
            Op::Attention {
                qkv,
                table,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(shape_err("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every registered parameter, keyed by name. Parameters
    /// that did not influence the loss get exact zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            match out.get_mut(name) {
                Some(acc) => accumulate(acc, &g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => accumulate(acc, &g),
                slot @ None => *slot = Some(g),
            }
        };
        let gd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, zip_map(gy, vb, |g, y| g * y), grads);
                send(*b, zip_map(gy, va, |g, x| g * x), grads);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, zip_map(gy, vb, |g, y| g / y), grads);
                let gb: Vec<T> = gd
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                send(*b, Tensor::new(vb.shape().to_vec(), gb)?, grads);
            }
            Op::AddRow(a, r) => {
                send(*a, gy.clone(), grads);
                let vr = val(*r);
                let n = vr.numel();
                let mut acc = vec![T::zero(); n];
                for chunk in gd.chunks(n) {
                    for (s, &g) in acc.iter_mut().zip(chunk) {
                        *s = *s + g;
                    }
                }
                send(*r, Tensor::new(vr.shape().to_vec(), acc)?, grads);
            }
            Op::Scale(a, s) => send(*a, gy.map(|g| g * *s), grads),
            Op::AddScalar(a) => send(*a, gy.clone(), grads),
            Op::ScaleRows(a, f) => {
                let n = gy.cols();
                let data = gd
                    .chunks(n)
                    .zip(f.iter())
                    .flat_map(|(c, &s)| c.iter().map(move |&g| g * s))
                    .collect();
                send(*a, Tensor::new(gy.shape().to_vec(), data)?, grads);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut ga = Tensor::zeros(&[m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::zero(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                    send(*a, ga, grads);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut gb = Tensor::zeros(&[k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        T::zero(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                    send(*b, gb, grads);
                }
            }
            Op::Transpose(a) => send(*a, gy.transpose()?, grads),
            Op::Reshape(a) => send(*a, gy.clone().reshaped(val(*a).shape())?, grads),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let s = val(*p).shape();
                    let g = match axis {
                        Axis::Rows => {
                            let w = s[1];
                            let t = Tensor::new(s.to_vec(), gd[offset * w..(offset + s[0]) * w].to_vec())?;
                            offset += s[0];
                            t
                        }
                        Axis::Cols => {
                            let mut data = Vec::with_capacity(s[0] * s[1]);
                            for r in 0..s[0] {
                                data.extend_from_slice(&gy.row(r)[offset..offset + s[1]]);
                            }
                            offset += s[1];
                            Tensor::new(s.to_vec(), data)?
                        }
                    };
                    send(*p, g, grads);
                }
            }
            Op::Slice(a, axis, start) => {
                let s = val(*a).shape();
                let mut g = Tensor::zeros(s);
                match axis {
                    Axis::Rows => {
                        let w = s[1];
                        g.data_mut()[start * w..start * w + gd.len()].copy_from_slice(gd);
                    }
                    Axis::Cols => {
                        let len = gy.cols();
                        for r in 0..s[0] {
                            g.data_mut()[r * s[1] + start..r * s[1] + start + len].copy_from_slice(gy.row(r));
                        }
                    }
                }
                send(*a, g, grads);
            }
            Op::GatherRows(a, index) => {
                let s = val(*a).shape();
                let n = gy.cols();
                let mut g = Tensor::zeros(s);
                for (src, &dst) in index.iter().enumerate() {
                    let row = &mut g.data_mut()[dst * n..(dst + 1) * n];
                    for (acc, &v) in row.iter_mut().zip(gy.row(src)) {
                        *acc = *acc + v;
                    }
                }
                send(*a, g, grads);
            }
            Op::ScatterRows(a, index) => {
                let n = gy.cols();
                let mut data = Vec::with_capacity(index.len() * n);
                for &i in index.iter() {
                    data.extend_from_slice(gy.row(i));
                }
                send(*a, Tensor::new(val(*a).shape().to_vec(), data)?, grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(gd.chunks(n)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &g)| s + p * g);
                    data.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
                }
                send(*a, Tensor::new(y.shape().to_vec(), data)?, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = gy.cols();
                let nf = T::from_usize(n).unwrap();
                let gvals = gamma.map(|g| val(g).data());
                if let Some(b) = beta {
                    let mut acc = vec![T::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (s, &g) in acc.iter_mut().zip(chunk) {
                            *s = *s + g;
                        }
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), acc)?, grads);
                }
                if let Some(gm) = gamma {
                    let mut acc = vec![T::zero(); n];
                    for (chunk, xh) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((s, &g), &h) in acc.iter_mut().zip(chunk).zip(xh) {
                            *s = *s + g * h;
                        }
                    }
                    send(*gm, Tensor::new(val(*gm).shape().to_vec(), acc)?, grads);
                }
                if self.nodes[x.0].needs_grad {
                    let mut data = Vec::with_capacity(gd.len());
                    for ((chunk, xh), &r) in gd.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dxh: Vec<T> = match gvals {
                            Some(gv) => chunk.iter().zip(gv).map(|(&g, &w)| g * w).collect(),
                            None => chunk.to_vec(),
                        };
                        let m1 = dxh.iter().fold(T::zero(), |s, &v| s + v) / nf;
                        let m2 = dxh.iter().zip(xh).fold(T::zero(), |s, (&v, &h)| s + v * h) / nf;
                        data.extend(dxh.iter().zip(xh).map(|(&v, &h)| r * (v - m1 - h * m2)));
                    }
                    send(*x, Tensor::new(gy.shape().to_vec(), data)?, grads);
                }
            }
            Op::Unary(a, kind) => {
                let (vx, vy) = (val(*a), &node.value);
                let data = gd
                    .iter()
                    .zip(vx.data().iter().zip(vy.data()))
                    .map(|(&g, (&x, &y))| g * unary_grad(*kind, x, y))
                    .collect();
                send(*a, Tensor::new(vx.shape().to_vec(), data)?, grads);
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), gd[0]), grads),
            Op::Mean(a) => {
                let va = val(*a);
                let g = gd[0] / T::from_usize(va.numel()).unwrap();
                send(*a, Tensor::full(va.shape(), g), grads);
            }
            Op::Attention {
                qkv,
                table,
                layout,
                probs,
            } => {
                let vq = val(*qkv);
                let three_d = vq.cols();
                let d = three_d / 3;
                let heads = layout.heads;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut gq = Tensor::zeros(vq.shape());
                let mut gt = table.map(|t| Tensor::zeros(val(t).shape()));
                let mut poff = 0;
                for seg in &layout.segments {
                    let n = seg.len;
                    let src = &vq.data()[seg.start * three_d..];
                    let gout = &gd[seg.start * d..];
                    for h in 0..heads {
                        let p = &probs[poff..poff + n * n];
                        poff += n * n;
                        // dV = Pᵀ dO
                        T::gemm(
                            n,
                            n,
                            dh,
                            T::one(),
                            p,
                            1,
                            n as isize,
                            &gout[h * dh..],
                            d as isize,
                            1,
                            T::zero(),
                            &mut gq.data_mut()[seg.start * three_d + 2 * d + h * dh..],
                            three_d as isize,
                            1,
                        );
                        // dP = dO Vᵀ
                        let mut dp = vec![T::zero(); n * n];
                        T::gemm(
                            n,
                            dh,
                            n,
                            T::one(),
                            &gout[h * dh..],
                            d as isize,
                            1,
                            &src[2 * d + h * dh..],
                            1,
                            three_d as isize,
                            T::zero(),
                            &mut dp,
                            n as isize,
                            1,
                        );
                        for (pr, dr) in p.chunks(n).zip(dp.chunks_mut(n)) {
                            let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        if let (Some(ix), Some(gt)) = (&seg.bias_index, gt.as_mut()) {
                            let row = &mut gt.data_mut()[h * val(table.unwrap()).cols()..];
                            for (&i, &ds) in ix.iter().zip(&dp) {
                                row[i] = row[i] + ds;
                            }
                        }
                        // dQ = scale · dS K
                        T::gemm(
                            n,
                            n,
                            dh,
                            scale,
                            &dp,
                            n as isize,
                            1,
                            &src[d + h * dh..],
                            three_d as isize,
                            1,
                            T::zero(),
                            &mut gq.data_mut()[seg.start * three_d + h * dh..],
                            three_d as isize,
                            1,
                        );
                        // dK = scale · dSᵀ Q
                        T::gemm(
                            n,
                            n,
                            dh,
                            scale,
                            &dp,
                            1,
                            n as isize,
                            &src[h * dh..],
                            three_d as isize,
                            1,
                            T::zero(),
                            &mut gq.data_mut()[seg.start * three_d + d + h * dh..],
                            three_d as isize,
                            1,
                        );
                    }
                }
                send(*qkv, gq, grads);
                if let (Some(t), Some(g)) = (table, gt) {
                    send(*t, g, grads);
                }
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::ScaleRows(..) => "scale_rows",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::GatherRows(..) => "gather_rows",
        Op::ScatterRows(..) => "scatter_rows",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Unary(..) => "unary",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Attention { .. } => "attention",
    }
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let start = out.len();
    let mut total = T::zero();
    for &v in row {
        let e = (v - max).exp();
        total = total + e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v = *v / total;
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn accumulate<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
}
