//! Wengert-list style tape: every primitive appends a node holding its value
//! and the indices of its inputs, so node order is already topological.

use std::collections::HashMap;

use super::{sigmoid, softplus, ParamGrads, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, len: usize },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Shape relation for elementwise binary ops.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is one row broadcast over every row of lhs
    Rows,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Tracked input that is not a stored parameter (e.g. an initial state
    /// whose sensitivity is wanted).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Tracked leaf for a stored parameter. Repeated calls for the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let trailing = if sa.is_empty() { &[][..] } else { &sa[1..] };
        let row_shape_ok = sb == trailing
            || (sb.len() == sa.len() && sb.first() == Some(&1) && &sb[1..] == trailing);
        if sa.len() >= 2 && row_shape_ok {
            Ok(Bcast::Rows)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let mode = self.bcast(op_name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data: Vec<f64> = match mode {
            Bcast::Same => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rows => {
                let c = vb.len();
                va.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb.data()[i % c]))
                    .collect()
            }
        };
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(index) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0))
        {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Sums over the trailing dimension: `[B, n] -> [B]`, `[n] -> []`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let data: Vec<f64> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let value = Tensor { shape, data };
        let tracked = self.tracked(&[a]);
        self.push(value, Op::SumLast(a), tracked)
    }

    /// Concatenates along the trailing dimension; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), tracked))
    }

    /// Columns `start..start + len` of the trailing dimension.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        let c = v.cols();
        if len == 0 || start + len > c || v.shape().is_empty() {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("columns {start}..{} out of range for shape {:?}", start + len, v.shape()),
            });
        }
        let data: Vec<f64> = v.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let tracked = self.tracked(&[src]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { src, start, len }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            tracked,
        ))
    }

    /// `ln Γ(k)` for positive integer entries, via a cached `ln (k-1)!` table.
    /// The result is a constant: no gradient flows through counts.
    pub fn lgamma_int(&mut self, a: Var, table: &mut LgammaTable) -> Result<Var> {
        let value = table.lgamma_tensor(self.value(a))?;
        Ok(self.constant(value))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.is_tracked(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(g, (n as isize, 1), bv, (1, n as isize), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.is_tracked(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(av, (1, k as isize), g, (n as isize, 1), &mut db, k, m, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send_bcast(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send_bcast(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = bv.len();
                if self.is_tracked(*a) {
                    let da = g.iter().enumerate().map(|(i, gv)| gv * bv[i % c]).collect();
                    self.send(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let db = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    self.send_bcast(grads, *b, db);
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let c = bv.len();
                if self.is_tracked(*a) {
                    let da = g.iter().enumerate().map(|(i, gv)| gv / bv[i % c]).collect();
                    self.send(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let db = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            let y = bv[i % c];
                            -gv * av[i] / (y * y)
                        })
                        .collect();
                    self.send_bcast(grads, *b, db);
                }
            }
            Op::Neg(a) => self.send(grads, *a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => self.send(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Tanh(a) => {
                let d = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.send(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gv, &x)| gv * sigmoid(x)).collect();
                self.send(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out).map(|(gv, y)| gv * y).collect();
                self.send(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gv, x)| gv / x).collect();
                self.send(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gv, x)| 2.0 * gv * x).collect();
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let c = self.value(*a).cols();
                let n = self.value(*a).len();
                self.send(grads, *a, (0..n).map(|i| g[i / c]).collect());
            }
            Op::Concat(parts) => {
                let width = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.is_tracked(p) {
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * width + offset..r * width + offset + pc]);
                        }
                        accumulate(grads, p, &d);
                    }
                    offset += pc;
                }
            }
            Op::Slice { src, start, len } => {
                let c = self.value(*src).cols();
                let rows = self.value(*src).rows();
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.send(grads, *src, d);
            }
        }
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.is_tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(d),
        }
    }

    /// Like [`Self::send`] but reduces over rows when `v` was broadcast.
    fn send_bcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if !self.is_tracked(v) {
            return;
        }
        let n = self.value(v).len();
        if n == d.len() {
            return self.send(grads, v, d);
        }
        let mut reduced = vec![0.0; n];
        for (i, x) in d.iter().enumerate() {
            reduced[i % n] += x;
        }
        self.send(grads, v, reduced);
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, (k as isize, 1), b, (n as isize, 1), &mut out, m, k, n);
    out
}

/// `out[m, n] = A[m, k] · B[k, n]` with explicit (row, column) strides for
/// `A` and `B`; `out` is row-major and overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() == m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `out`,
    // whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient w.r.t. a node, `None` when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: tape.shape(v).to_vec(),
            data: g.clone(),
        })
    }

    /// Gradient for every stored parameter; untouched ones are zero.
    pub fn params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, var) in &self.param_vars {
            if let Some(Some(g)) = self.grads.get(var.0) {
                out.get_mut(*id).data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

/// Cumulative `ln k` table giving `ln Γ(k + 1) = ln k!` for integer `k`.
#[derive(Clone, Debug)]
pub struct LgammaTable {
    cumulative: Vec<f64>,
}

impl Default for LgammaTable {
    fn default() -> Self {
        Self {
            cumulative: vec![0.0],
        }
    }
}

impl LgammaTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// `ln k!`, growing the cache as needed.
    pub fn ln_factorial(&mut self, k: u64) -> f64 {
        let k = k as usize;
        while self.cumulative.len() <= k {
            let next = self.cumulative.len();
            let last = *self.cumulative.last().unwrap();
            self.cumulative.push(last + (next as f64).ln());
        }
        self.cumulative[k]
    }

    /// Elementwise `ln Γ(k)` for integer `k >= 1`.
    pub fn lgamma_tensor(&mut self, t: &Tensor) -> Result<Tensor> {
        let mut data = Vec::with_capacity(t.len());
        for (index, &v) in t.data().iter().enumerate() {
            if !(v >= 1.0) || v.fract() != 0.0 || v > 1e9 {
                return Err(TensorError::Domain {
                    op: "lgamma_int",
                    index,
                    value: v,
                });
            }
            data.push(self.ln_factorial(v as u64 - 1));
        }
        Ok(Tensor {
            shape: t.shape().to_vec(),
            data,
        })
    }
}
