//! Reverse-mode differentiation over a closed set of dense primitives.
//!
//! Every node on the [`Tape`] holds a row-major matrix value. Leaves are either
//! trainable parameters or constants; interior nodes record the primitive that
//! produced them. [`Tape::backward`] walks the tape once in reverse and returns
//! the gradient of a scalar root with respect to every node that depends on a
//! parameter.
//!
//! The primitive set is fixed: affine layers (whose weights may themselves be
//! a tape node, which is what makes hypernetworks differentiable), elementwise
//! activations and arithmetic, reductions, row plumbing, cosine similarity and
//! softmax cross-entropy.

use crate::error::{Error, Result};
use crate::ndiff::linalg::{gemm, MatRef};
use crate::ndiff::params::{Activation, LayerSlot, Manifest, ParamVec};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("tensor data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense { x: Var, params: Var, slot: LayerSlot },
    Activate { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Transpose(Var),
    DotRows(Var, Var),
    Cosine(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.lens.get(v.0).copied().unwrap_or(0)],
        }
    }

    /// Moves the gradient out, avoiding a copy for large parameter blocks.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => vec![0.0; self.lens.get(v.0).copied().unwrap_or(0)],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|&x| x == 0.0))
    }
}

const NORM_FLOOR: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.data.len(), 1);
        t.data[0]
    }

    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::Leaf, true))
    }

    /// Registers a flat parameter vector as a 1xN trainable leaf.
    pub fn param_vec(&mut self, p: &ParamVec) -> Var {
        let n = p.len();
        self.push(
            Tensor {
                rows: 1,
                cols: n,
                data: p.values().to_vec(),
            },
            Op::Leaf,
            true,
        )
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![x],
            },
            Op::Leaf,
            false,
        )
    }

    /// Affine layer `x W^T + b` with `W`, `b` read from `params` at `slot`.
    pub fn dense(&mut self, x: Var, params: Var, slot: LayerSlot) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols != slot.input {
            return Err(Error::shape("dense input", slot.input, xv.cols));
        }
        let pv = self.value(params);
        let end = slot.bias_offset + slot.output;
        if pv.data.len() < end {
            return Err(Error::shape("dense parameters", end, pv.data.len()));
        }
        let rows = xv.rows;
        let w = &pv.data[slot.weight_offset..slot.bias_offset];
        let b = &pv.data[slot.bias_offset..end];
        let mut y = vec![0.0; rows * slot.output];
        gemm(
            MatRef::row_major(&xv.data, rows, slot.input),
            MatRef::transposed(w, slot.input, slot.output),
            0.0,
            &mut y,
        );
        for row in y.chunks_exact_mut(slot.output) {
            for (yi, bi) in row.iter_mut().zip(b) {
                *yi += bi;
            }
        }
        let rg = self.rg(x) || self.rg(params);
        Ok(self.push(
            Tensor {
                rows,
                cols: slot.output,
                data: y,
            },
            Op::Dense { x, params, slot },
            rg,
        ))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Linear {
            return x;
        }
        let xv = self.value(x);
        let value = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| act.apply(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Activate { x, act }, rg)
    }

    /// Runs every layer of `manifest` with parameters taken from `params`.
    pub fn mlp(&mut self, x: Var, params: Var, manifest: &Manifest) -> Result<Var> {
        let mut h = x;
        for (slot, spec) in manifest.slots().into_iter().zip(manifest.layers()) {
            h = self.dense(h, params, slot).map_err(|e| match e {
                Error::Shape {
                    context,
                    expected,
                    found,
                } => Error::Shape {
                    context: format!("{context} ({})", spec.name),
                    expected,
                    found,
                },
                other => other,
            })?;
            h = self.activate(h, slot.activation);
        }
        Ok(h)
    }

    /// Applies a unary primitive by name, for graph descriptions built from data.
    pub fn unary(&mut self, name: &str, x: Var) -> Result<Var> {
        match name {
            "tanh" => Ok(self.activate(x, Activation::Tanh)),
            "relu" => Ok(self.activate(x, Activation::Relu)),
            "linear" => Ok(x),
            "square" => Ok(self.square(x)),
            "exp" => Ok(self.exp(x)),
            "log" => Ok(self.log(x)),
            "sum" => Ok(self.sum(x)),
            "mean" => Ok(self.mean(x)),
            other => Err(Error::Capability(other.to_string())),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(Error::shape(
                format!("{what} operands ({}x{} vs {}x{})", av.rows, av.cols, bv.rows, bv.cols),
                av.len(),
                bv.len(),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![s],
            },
            Op::Sum(x),
            rg,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![m],
            },
            Op::Mean(x),
            rg,
        )
    }

    /// Column-wise mean over rows: `R x C -> 1 x C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows == 0 {
            return Err(Error::Input("mean over zero rows".into()));
        }
        let mut out = vec![0.0; xv.cols];
        for row in xv.data.chunks_exact(xv.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / xv.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let cols = xv.cols;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                rows: 1,
                cols,
                data: out,
            },
            Op::MeanRows(x),
            rg,
        ))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.rows {
            return Err(Error::shape("row index", xv.rows, i));
        }
        let value = Tensor {
            rows: 1,
            cols: xv.cols,
            data: xv.row(i).to_vec(),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Row(x, i), rg))
    }

    /// Vertical concatenation.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("stack of zero parts".into()));
        };
        let cols = self.value(first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != cols {
                return Err(Error::shape("stack_rows columns", cols, pv.cols));
            }
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::StackRows(parts.to_vec()), rg))
    }

    /// Horizontal concatenation `[a | b]`; a single-row `b` is broadcast.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows != av.rows && bv.rows != 1 {
            return Err(Error::shape("concat_cols rows", av.rows, bv.rows));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(if bv.rows == 1 { 0 } else { r }));
        }
        let rows = av.rows;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows, xv.cols);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor {
                rows: c,
                cols: r,
                data,
            },
            Op::Transpose(x),
            rg,
        )
    }

    /// Row-wise dot product: `R x C, R x C -> R x 1`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot_rows")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = av
            .data
            .chunks_exact(av.cols)
            .zip(bv.data.chunks_exact(bv.cols))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rows = av.rows;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { rows, cols: 1, data }, Op::DotRows(a, b), rg))
    }

    /// Pairwise cosine similarity: `R1 x C, R2 x C -> R1 x R2`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.cols {
            return Err(Error::shape("cosine feature dimension", av.cols, bv.cols));
        }
        let na = row_norms(av);
        let nb = row_norms(bv);
        let mut data = vec![0.0; av.rows * bv.rows];
        for i in 0..av.rows {
            for j in 0..bv.rows {
                let dot: f64 = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| x * y).sum();
                data[i * bv.rows + j] = dot / (na[i] * nb[j]);
            }
        }
        let (rows, cols) = (av.rows, bv.rows);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { rows, cols, data }, Op::Cosine(a, b), rg))
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows {
            return Err(Error::shape("softmax_xent labels", lv.rows, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols) {
            return Err(Error::shape("softmax_xent label index", lv.cols, bad));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            total += xent_row(row, y);
        }
        let loss = total / lv.rows.max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor {
                rows: 1,
                cols: 1,
                data: vec![loss],
            },
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Gradient of the scalar `root` with respect to every upstream node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Capability(format!(
                "reverse pass from a non-scalar {}x{} node",
                rv.rows, rv.cols
            )));
        }
        if !rv.data[0].is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite ({})",
                rv.data[0]
            )));
        }
        Ok(self.reverse(&[(root, 1.0)]))
    }

    /// Reverse pass from arbitrary seeds; every element of a seeded node
    /// receives the given cotangent.
    pub fn reverse(&self, seeds: &[(Var, f64)]) -> Gradients {
        let n = self.nodes.len();
        let lens: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for &(v, s) in seeds {
            if self.rg(v) {
                let g = acc(&mut grads, &lens, v);
                g.iter_mut().for_each(|x| *x += s);
            }
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &lens);
        }
        Gradients { grads, lens }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        lens: &[usize],
    ) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, params, slot } => {
                let xv = self.value(*x);
                let pv = self.value(*params);
                let rows = xv.rows;
                let w = &pv.data[slot.weight_offset..slot.bias_offset];
                if self.rg(*x) {
                    let gx = acc(grads, lens, *x);
                    gemm(
                        MatRef::row_major(g, rows, slot.output),
                        MatRef::row_major(w, slot.output, slot.input),
                        1.0,
                        gx,
                    );
                }
                if self.rg(*params) {
                    let gp = acc(grads, lens, *params);
                    gemm(
                        MatRef::transposed(g, slot.output, rows),
                        MatRef::row_major(&xv.data, rows, slot.input),
                        1.0,
                        &mut gp[slot.weight_offset..slot.bias_offset],
                    );
                    let gb = &mut gp[slot.bias_offset..slot.bias_offset + slot.output];
                    for row in g.chunks_exact(slot.output) {
                        for (b, gi) in gb.iter_mut().zip(row) {
                            *b += gi;
                        }
                    }
                }
            }
            Op::Activate { x, act } => {
                if self.rg(*x) {
                    let gx = acc(grads, lens, *x);
                    match act {
                        Activation::Tanh => {
                            for ((o, gi), yi) in gx.iter_mut().zip(g).zip(&y.data) {
                                *o += gi * (1.0 - yi * yi);
                            }
                        }
                        Activation::Relu => {
                            for ((o, gi), yi) in gx.iter_mut().zip(g).zip(&y.data) {
                                if *yi > 0.0 {
                                    *o += gi;
                                }
                            }
                        }
                        Activation::Linear => add_into(gx, g),
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, lens, *a), g);
                }
                if self.rg(*b) {
                    add_into(acc(grads, lens, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, lens, *a), g);
                }
                if self.rg(*b) {
                    let gb = acc(grads, lens, *b);
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data.clone();
                let bv = self.value(*b).data.clone();
                if self.rg(*a) {
                    let ga = acc(grads, lens, *a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, lens, *b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    for (o, gi) in acc(grads, lens, *x).iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::Square(x) => {
                if self.rg(*x) {
                    let xv = &self.value(*x).data;
                    for ((o, gi), xi) in acc(grads, lens, *x).iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * xi * gi;
                    }
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    for ((o, gi), yi) in acc(grads, lens, *x).iter_mut().zip(g).zip(&y.data) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log(x) => {
                if self.rg(*x) {
                    let xv = &self.value(*x).data;
                    for ((o, gi), xi) in acc(grads, lens, *x).iter_mut().zip(g).zip(xv) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    acc(grads, lens, *x).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let s = g[0] / lens[x.0].max(1) as f64;
                    acc(grads, lens, *x).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows(x) => {
                if self.rg(*x) {
                    let rows = self.value(*x).rows as f64;
                    let gx = acc(grads, lens, *x);
                    for row in gx.chunks_exact_mut(y.cols) {
                        for (o, gi) in row.iter_mut().zip(g) {
                            *o += gi / rows;
                        }
                    }
                }
            }
            Op::Row(x, i) => {
                if self.rg(*x) {
                    let cols = y.cols;
                    let gx = acc(grads, lens, *x);
                    add_into(&mut gx[i * cols..(i + 1) * cols], g);
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = lens[p.0];
                    if self.rg(p) {
                        add_into(acc(grads, lens, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (ac, bv) = (self.value(*a).cols, self.value(*b));
                let (bc, brows) = (bv.cols, bv.rows);
                if self.rg(*a) {
                    let ga = acc(grads, lens, *a);
                    for (r, row) in g.chunks_exact(y.cols).enumerate() {
                        add_into(&mut ga[r * ac..(r + 1) * ac], &row[..ac]);
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, lens, *b);
                    for (r, row) in g.chunks_exact(y.cols).enumerate() {
                        let br = if brows == 1 { 0 } else { r };
                        add_into(&mut gb[br * bc..(br + 1) * bc], &row[ac..]);
                    }
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    // y is (c x r); x is (r x c)
                    let (c, r) = (y.rows, y.cols);
                    let gx = acc(grads, lens, *x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::DotRows(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = av.cols;
                let (adata, bdata) = (av.data.clone(), bv.data.clone());
                if self.rg(*a) {
                    let ga = acc(grads, lens, *a);
                    for (r, gi) in g.iter().enumerate() {
                        for c in 0..cols {
                            ga[r * cols + c] += gi * bdata[r * cols + c];
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, lens, *b);
                    for (r, gi) in g.iter().enumerate() {
                        for c in 0..cols {
                            gb[r * cols + c] += gi * adata[r * cols + c];
                        }
                    }
                }
            }
            Op::Cosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let na = row_norms(av);
                let nb = row_norms(bv);
                let (r1, r2, cols) = (av.rows, bv.rows, av.cols);
                let s = &y.data;
                if self.rg(*a) {
                    let mut ga = vec![0.0; r1 * cols];
                    for i in 0..r1 {
                        let ai = av.row(i);
                        let gi = &mut ga[i * cols..(i + 1) * cols];
                        for j in 0..r2 {
                            let gij = g[i * r2 + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let bj = bv.row(j);
                            let c1 = gij / (na[i] * nb[j]);
                            let c2 = gij * s[i * r2 + j] / (na[i] * na[i]);
                            for k in 0..cols {
                                gi[k] += c1 * bj[k] - c2 * ai[k];
                            }
                        }
                    }
                    add_into(acc(grads, lens, *a), &ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; r2 * cols];
                    for j in 0..r2 {
                        let bj = bv.row(j);
                        let gj = &mut gb[j * cols..(j + 1) * cols];
                        for i in 0..r1 {
                            let gij = g[i * r2 + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let ai = av.row(i);
                            let c1 = gij / (na[i] * nb[j]);
                            let c2 = gij * s[i * r2 + j] / (nb[j] * nb[j]);
                            for k in 0..cols {
                                gj[k] += c1 * ai[k] - c2 * bj[k];
                            }
                        }
                    }
                    add_into(acc(grads, lens, *b), &gb);
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits);
                    let cols = lv.cols;
                    let scale = g[0] / lv.rows.max(1) as f64;
                    let mut gl = vec![0.0; lv.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = lv.row(r);
                        let lse = log_sum_exp(row);
                        for c in 0..cols {
                            let p = (row[c] - lse).exp();
                            gl[r * cols + c] = scale * (p - if c == label { 1.0 } else { 0.0 });
                        }
                    }
                    add_into(acc(grads, lens, *logits), &gl);
                }
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], lens: &[usize], v: Var) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; lens[v.0]])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.data
        .chunks_exact(t.cols.max(1))
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR))
        .collect()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log_sum_exp(row) - row[y]` without cancellation when `row[y]` dominates.
fn xent_row(row: &[f64], y: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return log_sum_exp(row) - row[y];
    }
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    let d = m - row[y];
    if d == 0.0 {
        rest.ln_1p()
    } else {
        d + ((-d).exp() + rest).ln()
    }
}

/// Value and gradient of a scalar function of a flat parameter vector.
pub fn value_and_grad<F>(at: &[f64], loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(1, at.len(), at.to_vec())?;
    let root = loss_fn(&mut tape, p)?;
    let grads = tape.backward(root)?;
    let g = grads.get(p);
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is not finite")));
    }
    Ok((tape.scalar(root), g))
}

/// Gradient of `loss_fn` at `at`, shaped like `at`.
pub fn grad<F>(at: &ParamVec, loss_fn: F) -> Result<ParamVec>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let (_, g) = value_and_grad(at.values(), loss_fn)?;
    ParamVec::new(at.manifest().clone(), g)
}
