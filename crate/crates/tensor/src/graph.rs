//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op as a node appended after its inputs, so the
//! node vector is already in topological order and backward is a single
//! reverse sweep. Values are 2-D unless an op says otherwise. The only
//! broadcasting is scalar-tensor (`scale`) and the explicit `add_bias`.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Vec<f32>),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    CausalSoftmax(Var),
    Rows(Var, usize),
    Cols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<f32> },
    Mse(Var, Vec<f32>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Kind tag of a recorded op, exposed for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Mul,
    AddBias,
    Scale,
    MulConst,
    Gelu,
    LayerNorm,
    Softmax,
    CausalSoftmax,
    Rows,
    Cols,
    ConcatRows,
    ConcatCols,
    GatherRows,
    Sum,
    CrossEntropy,
    Mse,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bound: HashMap<ParamId, Var>,
}

const LN_EPS: f32 = 1e-5;

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => {
            let c = *shape.last().unwrap_or(&1);
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].data[0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::Rows(..) => OpKind::Rows,
            Op::Cols(..) => OpKind::Cols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse(..) => OpKind::Mse,
        }
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v` was
    /// reached and needed one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad(true);
        Ok(self.leaf(t))
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same id
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.bound.insert(id, v);
        v
    }

    /// Adds the gradients of every bound trainable parameter into the
    /// store's grad buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut bound: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort();
        for (id, v) in bound {
            if let Some(g) = self.grad(v) {
                if store.get(id).requires_grad {
                    store.get_mut(id).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Moves the gradients of every bound parameter that needed one out of
    /// the graph, sorted by parameter id.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        let mut bound: Vec<_> = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort();
        bound
            .into_iter()
            .filter_map(|(id, v)| self.grads.get_mut(v.0).and_then(Option::take).map(|g| (id, g)))
            .collect()
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(TensorError::shape("matmul", format!("expected 2-D, got {sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[n, k2]) = (sa, sb) else {
            return Err(TensorError::shape("matmul_nt", format!("expected 2-D, got {sa:?} x {sb:?}")));
        };
        if k != k2 {
            return Err(TensorError::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
        }
        let data = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], data, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {:?} for rows of width {n}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let data = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), ng)
    }

    /// Element-wise product with a constant factor buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(TensorError::shape(
                "mul_const",
                format!("{} factors for {} values", factor.len(), self.value(x).len()),
            ));
        }
        let data = self.value(x).iter().zip(&factor).map(|(v, f)| v * f).collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulConst(x, factor), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), ng)
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gain {:?} bias {:?} for width {n}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = dims2(self.shape(x));
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_row(row, n);
        }
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), data, Op::Softmax(x), ng)
    }

    /// Causal softmax over score rows `[q, k]` where the `q` queries are the
    /// last `q` positions of the `k` keys: row `i` sees columns `0..=k-q+i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let &[q, k] = self.shape(x) else {
            return Err(TensorError::shape("causal_softmax", format!("expected 2-D, got {:?}", self.shape(x))));
        };
        if q > k {
            return Err(TensorError::shape("causal_softmax", format!("{q} queries over {k} keys")));
        }
        let offset = k - q;
        let mut data = self.value(x).to_vec();
        for (i, row) in data.chunks_exact_mut(k).enumerate() {
            kernels::softmax_row(row, offset + i + 1);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![q, k], data, Op::CausalSoftmax(x), ng))
    }

    /// Rows `start..start+len` of a 2-D value.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let &[m, n] = self.shape(x) else {
            return Err(TensorError::shape("rows", format!("expected 2-D, got {:?}", self.shape(x))));
        };
        if len == 0 || start + len > m {
            return Err(TensorError::shape("rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(vec![len, n], data, Op::Rows(x, start), ng))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let &[m, n] = self.shape(x) else {
            return Err(TensorError::shape("cols", format!("expected 2-D, got {:?}", self.shape(x))));
        };
        if len == 0 || start + len > n {
            return Err(TensorError::shape("cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let xs = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m, len], data, Op::Cols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::shape("concat_rows", "no parts".to_string()));
        };
        let n = dims2(self.shape(first)).1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = match self.shape(p) {
                &[a, b] => (a, b),
                s => return Err(TensorError::shape("concat_rows", format!("expected 2-D, got {s:?}"))),
            };
            if pn != n {
                return Err(TensorError::shape("concat_rows", format!("width {pn} vs {n}")));
            }
            m += pm;
            data.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, n], data, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::shape("concat_cols", "no parts".to_string()));
        };
        let m = dims2(self.shape(first)).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                &[pm, pn] if pm == m => widths.push(pn),
                s => return Err(TensorError::shape("concat_cols", format!("part {s:?} with {m} rows"))),
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, n], data, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row lookup `table[index[i], :]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let &[v, n] = self.shape(table) else {
            return Err(TensorError::shape("gather_rows", format!("expected 2-D, got {:?}", self.shape(table))));
        };
        if index.is_empty() {
            return Err(TensorError::shape("gather_rows", "empty index".to_string()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= v {
                return Err(TensorError::Index { index: i, len: v });
            }
            data.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![index.len(), n], data, Op::GatherRows(table, index.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Mean of `-log softmax(logits[t])[targets[t]]` over rows with
    /// `mask[t]`. Unmasked rows contribute neither loss nor gradient and
    /// their targets are never read.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let &[t, v] = self.shape(logits) else {
            return Err(TensorError::shape("cross_entropy", format!("expected 2-D, got {:?}", self.shape(logits))));
        };
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{t} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let rows: Vec<(usize, usize)> = (0..t).filter(|&i| mask[i]).map(|i| (i, targets[i])).collect();
        if rows.is_empty() {
            return Err(TensorError::NoSupervisedPositions);
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0f64;
        for &(i, target) in &rows {
            if target >= v {
                return Err(TensorError::Index { index: target, len: v });
            }
            let mut row = z[i * v..(i + 1) * v].to_vec();
            kernels::softmax_row(&mut row, v);
            // log-sum-exp form keeps tiny probabilities exact
            let max = z[i * v..(i + 1) * v].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64
                + z[i * v..(i + 1) * v].iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln();
            total += lse - z[i * v + target] as f64;
            probs.extend_from_slice(&row);
        }
        let loss = (total / rows.len() as f64) as f32;
        let ng = self.ng(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, rows, probs }, ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<f32>) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(TensorError::shape(
                "mse",
                format!("{} targets for {} predictions", target.len(), self.value(pred).len()),
            ));
        }
        let n = target.len() as f32;
        let loss = self.value(pred).iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f32>() / n;
        let ng = self.ng(pred);
        Ok(self.push(vec![1], vec![loss], Op::Mse(pred, target), ng))
    }

    // ---- backward -----------------------------------------------------

    /// Populates gradients of the scalar `root` with respect to every node
    /// that needs one. Each node is visited once, in reverse creation order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(gout) = self.grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &gout);
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f32>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) {
        // Ops are moved out temporarily so their saved state can be read
        // while other nodes' gradient buffers are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let out_shape = self.nodes[idx].shape.clone();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                if self.ng(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b), m, n, k);
                    add_into(self.acc(*a), &da);
                }
                if self.ng(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    if let Some(db) = self.acc(*b) {
                        kernels::matmul_tn_acc(&av, g, m, k, n, db);
                    }
                    self.nodes[a.0].data = av;
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).0;
                if self.ng(*a) {
                    let da = kernels::matmul(g, self.value(*b), m, n, k);
                    add_into(self.acc(*a), &da);
                }
                if self.ng(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    if let Some(db) = self.acc(*b) {
                        // db[n,k] += gᵀ[n,m] · a[m,k]
                        kernels::matmul_tn_acc(g, &av, m, n, k, db);
                    }
                    self.nodes[a.0].data = av;
                }
            }
            Op::Add(a, b) => {
                add_into(self.acc(*a), g);
                add_into(self.acc(*b), g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d: Vec<f32> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(self.acc(*a), &d);
                }
                if self.ng(*b) {
                    let d: Vec<f32> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(self.acc(*b), &d);
                }
            }
            Op::AddBias(x, bias) => {
                add_into(self.acc(*x), g);
                let n = *out_shape.last().unwrap();
                if let Some(db) = self.acc(*bias) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::MulConst(x, f) => {
                if let Some(dx) = self.acc(*x) {
                    for ((d, v), fv) in dx.iter_mut().zip(g).zip(f) {
                        *d += v * fv;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let d: Vec<f32> =
                        g.iter().zip(self.value(*x)).map(|(v, &xv)| v * kernels::gelu_grad(xv)).collect();
                    add_into(self.acc(*x), &d);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = *out_shape.last().unwrap();
                let m = xhat.len() / n;
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0f32; n];
                    let mut db = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                            db[j] += g[i * n + j];
                        }
                    }
                    add_into(self.acc(*gain), &dg);
                    add_into(self.acc(*bias), &db);
                }
                if self.ng(*x) {
                    let gv = self.value(*gain).to_vec();
                    let mut dx = vec![0.0f32; m * n];
                    for i in 0..m {
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        let (s1, s2) = (s1 / n as f32, s2 / n as f32);
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] = rstd[i] * (dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    add_into(self.acc(*x), &dx);
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                if self.ng(*x) {
                    let n = *out_shape.last().unwrap();
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![0.0f32; y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                        let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    add_into(self.acc(*x), &dx);
                }
            }
            Op::Rows(x, start) => {
                let n = out_shape[1];
                if let Some(dx) = self.acc(*x) {
                    for (d, v) in dx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Cols(x, start) => {
                let (m, len) = (out_shape[0], out_shape[1]);
                let n = dims2(self.shape(*x)).1;
                if let Some(dx) = self.acc(*x) {
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(self.acc(p), &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out_shape[0];
                let n = out_shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    if let Some(dp) = self.acc(p) {
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(table, index) => {
                let n = out_shape[1];
                if let Some(dt) = self.acc(*table) {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..n {
                            dt[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let v = dims2(self.shape(*logits)).1;
                let scale = g[0] / rows.len() as f32;
                if let Some(dl) = self.acc(*logits) {
                    for (r, &(i, target)) in rows.iter().enumerate() {
                        let p = &probs[r * v..(r + 1) * v];
                        let d = &mut dl[i * v..(i + 1) * v];
                        for j in 0..v {
                            d[j] += scale * p[j];
                        }
                        d[target] -= scale;
                    }
                }
            }
            Op::Mse(pred, target) => {
                let n = target.len() as f32;
                if self.ng(*pred) {
                    let d: Vec<f32> = self
                        .value(*pred)
                        .iter()
                        .zip(target)
                        .map(|(p, t)| g[0] * 2.0 * (p - t) / n)
                        .collect();
                    add_into(self.acc(*pred), &d);
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn add_into(dst: Option<&mut Vec<f32>>, src: &[f32]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}
