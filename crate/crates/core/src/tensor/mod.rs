//! Dense `f64` tensors with a reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into leaf variables and into the gradient buffers of
//! trainable parameters borrowed from a [`ParamStore`].
//!
//! Tapes are confined to one thread. Parameters are only read during a
//! forward/backward pass, so several tapes may borrow the same store at once.

mod checkpoint;
pub mod gradcheck;
mod nn;
mod optim;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use nn::{init_uniform, Linear, LstmCell, LstmState};
pub use optim::{adam_step, Adam, ParamGrads, ParamId, ParamStore, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("target index {index} out of range for {len} classes")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

type TResult<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TResult<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// A dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::vector(vec![x])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> TResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatVecT(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MaskedSoftmax(Var, Vec<bool>),
    CrossEntropy(Var, usize),
    Mse(Var, Var),
    NormalizeRows(Var),
    GroupMax(Var, Vec<Option<usize>>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    ShiftClamp(Var),
    Pad(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_grads: ParamGrads,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only constants and leaves are available.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_grads: ParamGrads::default(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            param_grads: ParamGrads::new(store.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.store.expect("param without store").get(id).tensor.data,
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: self.ng(v),
            grad: self.grad(v).map(|g| g.to_vec()),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Const, false)
    }

    /// A value whose gradient is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        if t.requires_grad {
            self.push(t.shape, t.data, Op::Leaf, true)
        } else {
            self.constant(t)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("Tape::param needs a parameter store");
        let shape = store.get(id).tensor.shape.clone();
        self.push(shape, Vec::new(), Op::Param(id), true)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(Tensor::zeros(&[n]))
    }

    /// Gradient accumulated for a leaf so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> &ParamGrads {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> ParamGrads {
        self.param_grads
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, row) in out.iter_mut().zip(av.chunks_exact(k)) {
                *o = dot(row, bv);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                    if aip != 0.0 {
                        axpy(aip, &bv[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    /// `m^T x` for `m: [r,c]`, `x: [r]`.
    pub fn matvec_t(&mut self, m: Var, x: Var) -> TResult<Var> {
        let (sm, sx) = (self.shape(m).to_vec(), self.shape(x).to_vec());
        if sm.len() != 2 || sx.len() != 1 || sm[0] != sx[0] {
            return shape_err("matvec_t", &sm, &sx);
        }
        let c = sm[1];
        let mv = self.value(m);
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        for (row, &xi) in mv.chunks_exact(c).zip(xv) {
            axpy(xi, row, &mut out);
        }
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(vec![c], out, Op::MatVecT(m, x), ng))
    }

    /// `a b^T` for `a: [m,d]`, `b: [n,d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> TResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", &sa, &sb);
        }
        let (m, d, n) = (sa[0], sa[1], sb[0]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..n {
                out.push(dot(ai, &bv[j * d..(j + 1) * d]));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TResult<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TResult<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// Multiplies every entry of `v` by the single entry of `s`.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> TResult<Var> {
        if self.value(s).len() != 1 {
            return shape_err("mul_scalar", self.shape(v), self.shape(s));
        }
        let k = self.value(s)[0];
        let out = self.value(v).iter().map(|x| x * k).collect();
        let ng = self.ng(v) || self.ng(s);
        Ok(self.push(self.shape(v).to_vec(), out, Op::MulScalar(v, s), ng))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> TResult<Var> {
        if self.value(a).len() != self.value(b).len() {
            return shape_err("dot", self.shape(a), self.shape(b));
        }
        let out = dot(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![1], vec![out], Op::Dot(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> TResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![out.len()], out, Op::Concat(parts.to_vec()), ng))
    }

    /// Flat slice `[start, start+len)` as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> TResult<Var> {
        let n = self.value(a).len();
        if start + len > n || len == 0 {
            return shape_err("slice", self.shape(a), &[start, len]);
        }
        let out = self.value(a)[start..start + len].to_vec();
        let ng = self.ng(a);
        Ok(self.push(vec![len], out, Op::Slice(a, start), ng))
    }

    /// Row `i` of a matrix.
    pub fn row(&mut self, a: Var, i: usize) -> TResult<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || i >= s[0] {
            return shape_err("row", &s, &[i]);
        }
        self.slice(a, i * s[1], s[1])
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> TResult<Var> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid("stack of zero rows".into()));
        };
        let d = self.value(first).len();
        let mut out = Vec::with_capacity(d * rows.len());
        for &r in rows {
            if self.value(r).len() != d {
                return shape_err("stack", self.shape(first), self.shape(r));
            }
            out.extend_from_slice(self.value(r));
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(vec![rows.len(), d], out, Op::Stack(rows.to_vec()), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    // ---- normalisation and losses --------------------------------------

    /// Softmax over a vector. `mask[i] == true` marks entry `i` invalid; it
    /// receives probability zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> TResult<Var> {
        let n = self.value(a).len();
        let mask = match mask {
            Some(m) if m.len() != n => return shape_err("masked_softmax", self.shape(a), &[m.len()]),
            Some(m) => m.to_vec(),
            None => vec![false; n],
        };
        if mask.iter().all(|&m| m) {
            return Err(TensorError::Invalid("masked_softmax: every entry masked".into()));
        }
        let out = softmax_masked(self.value(a), &mask);
        let ng = self.ng(a);
        Ok(self.push(vec![n], out, Op::MaskedSoftmax(a, mask), ng))
    }

    pub fn softmax(&mut self, a: Var) -> TResult<Var> {
        self.masked_softmax(a, None)
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> TResult<Var> {
        let v = self.value(logits);
        if target >= v.len() {
            return Err(TensorError::TargetOutOfRange {
                index: target,
                len: v.len(),
            });
        }
        let loss = log_sum_exp(v) - v[target];
        let ng = self.ng(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(logits, target), ng))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> TResult<Var> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).len() as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(vec![1], vec![loss], Op::Mse(pred, target), ng))
    }

    /// Scales each row of `[r,d]` (or a vector) to unit Euclidean norm.
    /// Zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let ng = self.ng(a);
        self.push(shape, out, Op::NormalizeRows(a), ng)
    }

    /// Block-wise maximum of a matrix. Output entry `(g, h)` is the maximum
    /// of `a[r][c]` over `r in row_groups[g]`, `c in col_groups[h]`, or zero
    /// when either group is empty.
    pub fn group_max(
        &mut self,
        a: Var,
        row_groups: &[Vec<usize>],
        col_groups: &[Vec<usize>],
    ) -> TResult<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err("group_max", &s, &[]);
        }
        let (r, c) = (s[0], s[1]);
        let bad_r = row_groups.iter().flatten().any(|&i| i >= r);
        let bad_c = col_groups.iter().flatten().any(|&j| j >= c);
        if bad_r || bad_c {
            return shape_err("group_max", &s, &[row_groups.len(), col_groups.len()]);
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(row_groups.len() * col_groups.len());
        let mut arg = Vec::with_capacity(out.capacity());
        for rg in row_groups {
            for cg in col_groups {
                let mut best: Option<(f64, usize)> = None;
                for &i in rg {
                    for &j in cg {
                        let x = av[i * c + j];
                        if best.map_or(true, |(b, _)| x > b) {
                            best = Some((x, i * c + j));
                        }
                    }
                }
                out.push(best.map_or(0.0, |b| b.0));
                arg.push(best.map(|b| b.1));
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![row_groups.len(), col_groups.len()], out, Op::GroupMax(a, arg), ng))
    }

    /// Rows `idx` of a `[v,d]` table, as a `[idx.len(), d]` matrix.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> TResult<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) || idx.is_empty() {
            return shape_err("gather_rows", &s, &[idx.len()]);
        }
        let d = s[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![idx.len(), d], out, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Column-wise mean of a `[n,d]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> TResult<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return shape_err("mean_rows", &s, &[]);
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; d];
        for row in self.value(a).chunks_exact(d) {
            axpy(1.0 / n as f64, row, &mut out);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![d], out, Op::MeanRows(a), ng))
    }

    /// Shifts a vector one place to the right, keeping the last entry in
    /// place: `out[i] = a[i-1]` plus `out[m-1] += a[m-1]`.
    pub fn shift_clamp(&mut self, a: Var) -> TResult<Var> {
        let v = self.value(a);
        let m = v.len();
        if self.shape(a).len() != 1 || m == 0 {
            return shape_err("shift_clamp", self.shape(a), &[]);
        }
        let mut out = vec![0.0; m];
        out[1..m].copy_from_slice(&v[..m - 1]);
        out[m - 1] += v[m - 1];
        let ng = self.ng(a);
        Ok(self.push(vec![m], out, Op::ShiftClamp(a), ng))
    }

    /// Zero-pads a vector to length `len`.
    pub fn pad(&mut self, a: Var, len: usize) -> TResult<Var> {
        let v = self.value(a);
        if v.len() > len {
            return shape_err("pad", self.shape(a), &[len]);
        }
        let mut out = v.to_vec();
        out.resize(len, 0.0);
        let ng = self.ng(a);
        Ok(self.push(vec![len], out, Op::Pad(a), ng))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates `d loss / d x` into every leaf and parameter reachable
    /// from `loss`. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> TResult<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalar(self.shape(loss).to_vec()));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Leaf => add_into(&mut self.leaf_grads[idx], &g),
                Op::Param(id) => self.param_grads.add(*id, &g),
                op => self.propagate(op, idx, &g, &mut adj),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        // Gradient buffer for `v`, or None when `v` needs no gradient.
        macro_rules! gbuf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.ng(v) {
                    let len = self.value(v).len();
                    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }

        match op {
            Op::Const | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = g.len() / m;
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = gbuf!(*a) {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        let row = &mut ga[i * k..(i + 1) * k];
                        if n == 1 {
                            axpy(gi[0], bv, row);
                        } else {
                            for (p, r) in row.iter_mut().enumerate() {
                                *r += dot(gi, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if let Some(gb) = gbuf!(*b) {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for (p, &aip) in av[i * k..(i + 1) * k].iter().enumerate() {
                            axpy(aip, gi, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatVecT(m, x) => {
                let c = g.len();
                let mv = self.value(*m);
                let xv = self.value(*x);
                if let Some(gm) = gbuf!(*m) {
                    for (row, &xi) in gm.chunks_exact_mut(c).zip(xv) {
                        axpy(xi, g, row);
                    }
                }
                if let Some(gx) = gbuf!(*x) {
                    for (gxi, row) in gx.iter_mut().zip(mv.chunks_exact(c)) {
                        *gxi += dot(row, g);
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let d = self.shape(*a)[1];
                let m = self.shape(*a)[0];
                let n = self.shape(*b)[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = gbuf!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &bv[j * d..(j + 1) * d], &mut ga[i * d..(i + 1) * d]);
                        }
                    }
                }
                if let Some(gb) = gbuf!(*b) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &av[i * d..(i + 1) * d], &mut gb[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = gbuf!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = gbuf!(*b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = gbuf!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = gbuf!(*b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                if let Some(ga) = gbuf!(*a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * y;
                    }
                }
                let av = self.value(*a);
                if let Some(gb) = gbuf!(*b) {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = gbuf!(*a) {
                    axpy(*c, g, ga);
                }
            }
            Op::MulScalar(v, s) => {
                let k = self.value(*s)[0];
                if let Some(gv) = gbuf!(*v) {
                    axpy(k, g, gv);
                }
                let vv = self.value(*v);
                if let Some(gs) = gbuf!(*s) {
                    gs[0] += dot(g, vv);
                }
            }
            Op::Dot(a, b) => {
                let bv = self.value(*b);
                if let Some(ga) = gbuf!(*a) {
                    axpy(g[0], bv, ga);
                }
                let av = self.value(*a);
                if let Some(gb) = gbuf!(*b) {
                    axpy(g[0], av, gb);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = gbuf!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = gbuf!(p) {
                        axpy(1.0, &g[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = gbuf!(*a) {
                    axpy(1.0, g, &mut ga[*start..*start + g.len()]);
                }
            }
            Op::Stack(rows) => {
                let d = g.len() / rows.len();
                for (i, &r) in rows.iter().enumerate() {
                    if let Some(gr) = gbuf!(r) {
                        axpy(1.0, &g[i * d..(i + 1) * d], gr);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = gbuf!(*a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = gbuf!(*a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = gbuf!(*a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                if let Some(ga) = gbuf!(*a) {
                    let s = dot(g, out);
                    for (i, x) in ga.iter_mut().enumerate() {
                        if !mask[i] {
                            *x += out[i] * (g[i] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, target) => {
                let p = softmax_masked(self.value(*logits), &vec![false; self.value(*logits).len()]);
                if let Some(gl) = gbuf!(*logits) {
                    for (i, x) in gl.iter_mut().enumerate() {
                        let t = if i == *target { 1.0 } else { 0.0 };
                        *x += g[0] * (p[i] - t);
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                if let Some(ga) = gbuf!(*a) {
                    axpy(1.0, &diff, ga);
                }
                if let Some(gb) = gbuf!(*b) {
                    axpy(-1.0, &diff, gb);
                }
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let d = *self.shape(*a).last().unwrap_or(&1);
                if let Some(ga) = gbuf!(*a) {
                    for r in 0..av.len() / d {
                        let x = &av[r * d..(r + 1) * d];
                        let norm = dot(x, x).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let y = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let yg = dot(y, gr);
                        for ((dst, &gi), &yi) in ga[r * d..(r + 1) * d].iter_mut().zip(gr).zip(y) {
                            *dst += (gi - yi * yg) / norm;
                        }
                    }
                }
            }
            Op::GroupMax(a, arg) => {
                if let Some(ga) = gbuf!(*a) {
                    for (gi, at) in g.iter().zip(arg) {
                        if let Some(k) = at {
                            ga[*k] += gi;
                        }
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                let d = self.shape(*table)[1];
                if let Some(gt) = gbuf!(*table) {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[k * d..(k + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let (n, d) = (s[0], s[1]);
                if let Some(ga) = gbuf!(*a) {
                    for row in ga.chunks_exact_mut(d) {
                        axpy(1.0 / n as f64, g, row);
                    }
                }
            }
            Op::ShiftClamp(a) => {
                if let Some(ga) = gbuf!(*a) {
                    let m = g.len();
                    for i in 1..m {
                        ga[i - 1] += g[i];
                    }
                    ga[m - 1] += g[m - 1];
                }
            }
            Op::Pad(a) => {
                if let Some(ga) = gbuf!(*a) {
                    let n = ga.len();
                    axpy(1.0, &g[..n], ga);
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => axpy(1.0, g, buf),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax; masked entries are exactly zero.
pub fn softmax_masked(v: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = v
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn masked_softmax_uniform_for_equal_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let p = t.softmax(x).unwrap();
        assert!(close(t.value(p), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn masked_softmax_full_mask_on_second() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![5.0, 1.0]));
        let p = t.masked_softmax(x, Some(&[false, true])).unwrap();
        assert_eq!(t.value(p), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rejects_all_masked() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![5.0, 1.0]));
        assert!(t.masked_softmax(x, Some(&[true, true])).is_err());
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut t = Tape::new();
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.25, -7.0, 9.0]).unwrap();
        let i = t.constant(Tensor::identity(3));
        let av = t.constant(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.shape(out), &[3, 2]);
        assert_eq!(t.value(out), a.data.as_slice());
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2]));
        match t.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut t = Tape::new();
        let xv = t.leaf(Tensor::vector(x).with_grad());
        let yv = t.constant(Tensor::vector(y.clone()));
        let d = t.dot(xv, yv).unwrap();
        t.backward(d).unwrap();
        assert_eq!(t.grad(xv).unwrap(), y.as_slice());
    }

    #[test]
    fn backward_twice_doubles_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = t.tanh(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        assert!(close(twice, &[2.0 * once[0], 2.0 * once[1]], 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert_eq!(t.backward(x), Err(TensorError::NonScalar(vec![2])));
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.3; 7]));
        let l = t.cross_entropy(x, 4).unwrap();
        assert!((t.scalar(l) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(vec![0.0, margin, 0.0]));
            let v = t_ce(&mut t, x, 1);
            let l = t.scalar(v);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    fn t_ce(t: &mut Tape, x: Var, i: usize) -> Var {
        t.cross_entropy(x, i).unwrap()
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(
            t.cross_entropy(x, 2),
            Err(TensorError::TargetOutOfRange { index: 2, len: 2 })
        );
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.1, -3.0, 2.0]));
        let l = t.mse(a, a).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn shift_clamp_keeps_last_mass() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let s = t.shift_clamp(a).unwrap();
        assert!(close(t.value(s), &[0.0, 0.2, 0.8], 1e-15));
        let one = t.constant(Tensor::vector(vec![1.0]));
        let s1 = t.shift_clamp(one).unwrap();
        assert_eq!(t.value(s1), &[1.0]);
    }

    #[test]
    fn group_max_empty_groups_are_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1.0, 5.0, -2.0, 0.5, 0.1, 4.0]).unwrap());
        let g = t
            .group_max(a, &[vec![0, 1], vec![]], &[vec![0], vec![1, 2]])
            .unwrap();
        assert_eq!(t.value(g), &[1.0, 5.0, 0.0, 0.0]);
    }
}
