//! Reverse-mode gradient tape over dense arrays.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Parameters enter the
//! tape through [`Tape::param`] and come back out of the backward pass keyed
//! by name.

use std::collections::BTreeMap;

use super::array::{gemm_acc, gemm_tn_acc, sigmoid, softplus, transpose, Array};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Exp,
    Log,
    Softplus,
    Relu,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Unary, Var),
    Reduce {
        kind: Reduce,
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Gather(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        cols: bool,
    },
    Reshape(Var),
    SegmentMatMul {
        a: Var,
        b: Var,
        segments: Vec<usize>,
    },
    SegmentSum(Var, Vec<usize>),
}

struct Node {
    value: Array,
    op: Op,
}

/// Gradients of a scalar with respect to every bound parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(pub BTreeMap<String, Array>);

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.0.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    /// Adds `other` into `self`, inserting missing entries.
    pub fn accumulate(&mut self, other: &GradMap) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }
}

/// Parameter handles produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Array) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), v));
        v
    }

    /// Binds every parameter of the store: trainable entries as named leaves,
    /// frozen ones as constants.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let mut bound = BTreeMap::new();
        for (name, entry) in store.iter() {
            let v = if entry.trainable {
                self.param(name, entry.value.clone())
            } else {
                self.constant(entry.value.clone())
            };
            bound.insert(name.clone(), v);
        }
        Bound(bound)
    }

    /// Binds every parameter as a constant (forward-only evaluation).
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Bound {
        let mut bound = BTreeMap::new();
        for (name, entry) in store.iter() {
            bound.insert(name.clone(), self.constant(entry.value.clone()));
        }
        Bound(bound)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// `a[m, n] · b[n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let (n2, p) = self.dims2(b)?;
        if n != n2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, n, p);
        Ok(self.push(Array::new(vec![m, p], out)?, Op::MatMul(a, b)))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    /// Adds a length-`n` row vector to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(Array::new(vec![m, n], out)?, Op::AddRow(a, row)))
    }

    /// Subtracts `col[i]` from every entry of row `i` of `a[m, n]`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(col).len() != m {
            return Err(shape_err("sub_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o -= c[i];
            }
        }
        Ok(self.push(Array::new(vec![m, n], out)?, Op::SubCol(a, col)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Array::new(shape, out)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sin => f64::sin,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(kind, a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Reduces `axis` away. Max sends its gradient to the first argmax;
    /// log-sum-exp is evaluated shifted by the running maximum.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::EmptyReduction { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind != Reduce::Sum {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| x[(o * len + k) * inner + i];
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += at(k);
                        }
                        out[slot] = s;
                    }
                    Reduce::Max | Reduce::LogSumExp => {
                        let mut best = 0;
                        let mut m = at(0);
                        for k in 1..len {
                            if at(k) > m {
                                m = at(k);
                                best = k;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = if kind == Reduce::Max || !m.is_finite() {
                            m
                        } else {
                            let mut s = 0.0;
                            for k in 0..len {
                                s += (at(k) - m).exp();
                            }
                            m + s.ln()
                        };
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Array::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                input: a,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![n])?;
        self.reduce(Reduce::Sum, flat, 0)
    }

    /// Flat gather: `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Array::new(shape, data)?;
        Ok(self.push(value, Op::Gather(a, indices)))
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let idx = (0..m)
            .flat_map(|i| cols.iter().map(move |&j| i * n + j))
            .collect();
        self.gather(a, idx, vec![m, cols.len()])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (_, n) = self.dims2(a)?;
        let idx = rows.iter().flat_map(|&i| (0..n).map(move |j| i * n + j)).collect();
        self.gather(a, idx, vec![rows.len(), n])
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, true)
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, false)
    }

    fn concat(&mut self, inputs: &[Var], cols: bool) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero arrays".into()))?;
        let (m0, n0) = self.dims2(first)?;
        if inputs.len() == 1 {
            let v = self.value(first).clone();
            return Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), cols }));
        }
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (m, n) = self.dims2(v)?;
            if (cols && m != m0) || (!cols && n != n0) {
                return Err(shape_err("concat", self.shape(first), self.shape(v)));
            }
            dims.push((m, n));
        }
        let (value, shape) = if cols {
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m0 * total);
            for i in 0..m0 {
                for (&v, &(_, n)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(v).data()[i * n..(i + 1) * n]);
                }
            }
            (out, vec![m0, total])
        } else {
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(total * n0);
            for &v in inputs {
                out.extend_from_slice(self.value(v).data());
            }
            (out, vec![total, n0])
        };
        let value = Array::new(shape, value)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Block-wise product. `b` is split into `segments.len()` equal row blocks;
    /// the next `segments[s]` rows of `a` are multiplied by block `s`.
    pub fn segment_matmul(&mut self, a: Var, b: Var, segments: Vec<usize>) -> Result<Var> {
        let (ra, k) = self.dims2(a)?;
        let (rb, c) = self.dims2(b)?;
        if segments.is_empty() || rb != segments.len() * k || segments.iter().sum::<usize>() != ra {
            return Err(Error::Dimension(format!(
                "segment_matmul: a {:?}, b {:?}, {} segments",
                self.shape(a),
                self.shape(b),
                segments.len()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; ra * c];
        let mut row = 0;
        for (s, &len) in segments.iter().enumerate() {
            gemm_acc(
                &av[row * k..(row + len) * k],
                &bv[s * k * c..(s + 1) * k * c],
                &mut out[row * c..(row + len) * c],
                len,
                k,
                c,
            );
            row += len;
        }
        let value = Array::new(vec![ra, c], out)?;
        Ok(self.push(value, Op::SegmentMatMul { a, b, segments }))
    }

    /// Sums consecutive runs of a flat array: `segments[s]` values per output.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<usize>) -> Result<Var> {
        let x = self.value(a).data();
        if segments.iter().sum::<usize>() != x.len() {
            return Err(Error::Dimension(format!(
                "segment_sum: {} values, segments cover {}",
                x.len(),
                segments.iter().sum::<usize>()
            )));
        }
        let mut out = Vec::with_capacity(segments.len());
        let mut at = 0;
        for &len in &segments {
            let mut s = 0.0;
            for v in &x[at..at + len] {
                s += v;
            }
            out.push(s);
            at += len;
        }
        let value = Array::from_vec(out);
        Ok(self.push(value, Op::SegmentSum(a, segments)))
    }

    /// `input · weight (+ bias)` over the last axis of `input`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n_in, n_out) = self.dims2(weight)?;
        let last = in_shape.last().copied().unwrap_or(1);
        if last != n_in {
            return Err(Error::Dimension(format!(
                "linear: input {in_shape:?} does not match weight {:?}",
                self.shape(weight)
            )));
        }
        let rows = self.value(input).len() / n_in.max(1);
        let flat = if in_shape.len() == 2 {
            input
        } else {
            self.reshape(input, vec![rows, n_in])?
        };
        let mut out = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            if self.value(b).len() != n_out {
                return Err(shape_err("linear bias", self.shape(weight), self.shape(b)));
            }
            out = self.add_row(out, b)?;
        }
        if in_shape.len() != 2 {
            let mut shape = in_shape;
            if shape.is_empty() {
                shape.push(n_out);
            } else {
                *shape.last_mut().unwrap() = n_out;
            }
            out = self.reshape(out, shape)?;
        }
        Ok(out)
    }

    /// Runs the reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Array::zeros(self.shape(*v)));
            match out.get_mut(name) {
                Some(acc) => Array::add_assign(acc, &g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(GradMap(out))
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let gd = g.data();
        let mut send = |v: Var, data: Vec<f64>| {
            let shape = self.shape(v).to_vec();
            let arr = Array::new(shape, data).expect("gradient shape");
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&arr),
                slot @ None => *slot = Some(arr),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.dims2(*a)?;
                let (_, p) = self.dims2(*b)?;
                let bt = transpose(self.value(*b).data(), n, p);
                let mut ga = vec![0.0; m * n];
                gemm_acc(gd, &bt, &mut ga, m, p, n);
                let mut gb = vec![0.0; n * p];
                gemm_tn_acc(self.value(*a).data(), gd, &mut gb, m, n, p);
                send(*a, ga);
                send(*b, gb);
            }
            Op::MatMulNt(a, b) => {
                // out[m, n] = a[m, k] b[n, k]ᵀ
                let (m, k) = self.dims2(*a)?;
                let (n, _) = self.dims2(*b)?;
                let mut ga = vec![0.0; m * k];
                gemm_acc(gd, self.value(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                gemm_tn_acc(gd, self.value(*a).data(), &mut gb, m, n, k);
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.dims2(*a)?;
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for (r, x) in gr.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *r += x;
                    }
                }
                send(*a, gd.to_vec());
                send(*row, gr);
            }
            Op::SubCol(a, col) => {
                let (m, n) = self.dims2(*a)?;
                let gc = (0..m).map(|i| -gd[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
                send(*a, gd.to_vec());
                send(*col, gc);
            }
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, gd.iter().zip(bv).map(|(g, y)| g / y).collect());
                send(
                    *b,
                    gd.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::Scale(a, c) => send(*a, gd.iter().map(|x| x * c).collect()),
            Op::Shift(a) => send(*a, gd.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d: Vec<f64> = match kind {
                    Unary::Sin => x.iter().zip(gd).map(|(x, g)| g * x.cos()).collect(),
                    Unary::Exp => y.iter().zip(gd).map(|(y, g)| g * y).collect(),
                    Unary::Log => x.iter().zip(gd).map(|(x, g)| g / x).collect(),
                    Unary::Softplus => x.iter().zip(gd).map(|(x, g)| g * sigmoid(*x)).collect(),
                    Unary::Relu => x
                        .iter()
                        .zip(gd)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Sqrt => y.iter().zip(gd).map(|(y, g)| 0.5 * g / y).collect(),
                    Unary::Square => x.iter().zip(gd).map(|(x, g)| 2.0 * g * x).collect(),
                };
                send(*a, d);
            }
            Op::Reduce {
                kind,
                input,
                outer,
                len,
                inner,
                argmax,
            } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let mut d = vec![0.0; x.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let slot = o * inner + i;
                        match kind {
                            Reduce::Sum => {
                                for k in 0..*len {
                                    d[(o * len + k) * inner + i] = gd[slot];
                                }
                            }
                            Reduce::Max => d[(o * len + argmax[slot]) * inner + i] = gd[slot],
                            Reduce::LogSumExp => {
                                for k in 0..*len {
                                    let at = (o * len + k) * inner + i;
                                    d[at] = gd[slot] * (x[at] - y[slot]).exp();
                                }
                            }
                        }
                    }
                }
                send(*input, d);
            }
            Op::Gather(a, indices) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (&i, g) in indices.iter().zip(gd) {
                    d[i] += g;
                }
                send(*a, d);
            }
            Op::Concat { inputs, cols } => {
                if inputs.len() == 1 {
                    send(inputs[0], gd.to_vec());
                } else if *cols {
                    let (m, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &v in inputs {
                        let (_, n) = self.dims2(v)?;
                        let mut d = Vec::with_capacity(m * n);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + n]);
                        }
                        offset += n;
                        send(v, d);
                    }
                } else {
                    let mut at = 0;
                    for &v in inputs {
                        let n = self.value(v).len();
                        send(v, gd[at..at + n].to_vec());
                        at += n;
                    }
                }
            }
            Op::Reshape(a) => send(*a, gd.to_vec()),
            Op::SegmentMatMul { a, b, segments } => {
                let (ra, k) = self.dims2(*a)?;
                let (_, c) = self.dims2(*b)?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![0.0; ra * k];
                let mut gb = vec![0.0; bv.len()];
                let mut row = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let block = &bv[s * k * c..(s + 1) * k * c];
                    let bt = transpose(block, k, c);
                    let g_rows = &gd[row * c..(row + len) * c];
                    gemm_acc(g_rows, &bt, &mut ga[row * k..(row + len) * k], len, c, k);
                    gemm_tn_acc(
                        &av[row * k..(row + len) * k],
                        g_rows,
                        &mut gb[s * k * c..(s + 1) * k * c],
                        len,
                        k,
                        c,
                    );
                    row += len;
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SegmentSum(a, segments) => {
                let mut d = Vec::with_capacity(self.value(*a).len());
                for (&len, g) in segments.iter().zip(gd) {
                    d.extend(std::iter::repeat_n(*g, len));
                }
                send(*a, d);
            }
        }
        Ok(())
    }
}
