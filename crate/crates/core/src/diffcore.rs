//! Reverse-mode automatic differentiation over dense row-major buffers.
//!
//! A [`Tape`] is an append-only list of nodes. Every op validates shapes,
//! computes its output eagerly and records enough to run the vector-Jacobian
//! product later. [`Tape::backward`] walks the nodes in reverse insertion
//! order exactly once, so gradients are a pure function of the tape.
//!
//! Broadcasting is limited to a one-element operand in `add`/`sub`/`mul`.
//! Shapes with an empty dimension list are scalars.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Index sentinel for [`Tape::gather`]: the output element is zero.
pub const PAD: usize = usize::MAX;

/// Floating-point element type of a tape.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `c = a · b + beta · c` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from(v).expect("f64 is representable")
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: the caller's strides address only elements inside `a`/`b`,
        // and `c` holds an m×n row-major block.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: as for f64.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { src: Var, index: Arc<[usize]> },
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ReduceSum(Var),
    SumAll(Var),
    SetMax { src: Var, argmax: Vec<usize> },
    Softmax(Var),
    LogSumExp(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::ReduceSum(..) => "reduce_sum",
            Op::SumAll(..) => "sum_all",
            Op::SetMax { .. } => "reduce_max_over_set",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape into `(outer, inner)` around its last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&c) if c > 0 => (numel(shape) / c, c),
        Some(_) => (0, 0),
        None => (1, 1),
    }
}

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node does not influence the root through
    /// grad-requiring inputs.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros of the right length.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    /// Input buffer. `requires_grad` marks it as a differentiation leaf.
    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{} values for shape {shape:?}", values.len()),
            });
        }
        self.push(values, shape.to_vec(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.leaf(vec![v], &[], false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape == nb.shape {
            let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            Ok((v, na.shape.clone()))
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            Ok((na.value.iter().map(|&x| f(x, y)).collect(), na.shape.clone()))
        } else if na.value.len() == 1 {
            let x = na.value[0];
            Ok((nb.value.iter().map(|&y| f(x, y)).collect(), nb.shape.clone()))
        } else {
            Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", na.shape, nb.shape),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "add", |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        self.push(v, s, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "sub", |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        self.push(v, s, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "mul", |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        self.push(v, s, Op::Mul(a, b), g)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let n = self.node(a);
        let v = n.value.iter().map(|&x| x * k).collect();
        let s = n.shape.clone();
        let g = n.needs_grad;
        self.push(v, s, Op::Scale(a, c), g)
    }

    /// Add a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let n = self.node(a);
        let v = n.value.iter().map(|&x| x + k).collect();
        let s = n.shape.clone();
        let g = n.needs_grad;
        self.push(v, s, Op::Offset(a), g)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (m, k, k2, n) = match (na.shape.as_slice(), nb.shape.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => (0, 1, 2, 0),
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} · {:?}", na.shape, nb.shape),
            });
        }
        let mut out = vec![T::zero(); m * n];
        if m > 0 && n > 0 {
            T::gemm(m, k, n, &na.value, (k as isize, 1), &nb.value, (n as isize, 1), T::zero(), &mut out);
        }
        let g = na.needs_grad || nb.needs_grad;
        self.push(out, vec![m, n], Op::MatMul(a, b), g)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.node(*first).shape.clone();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} for rank {}", base.len()),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = &self.node(v).shape;
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{base:?} vs {s:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &v in inputs {
                let n = self.node(v);
                let w = n.shape[axis] * tail;
                out.extend_from_slice(&n.value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let g = inputs.iter().any(|&v| self.needs(v));
        self.push(out, shape, Op::Concat { inputs: inputs.to_vec(), axis }, g)
    }

    /// `out[i] = src.flat[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.node(src);
        if index.len() != numel(shape) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("{} indices for shape {shape:?}", index.len()),
            });
        }
        let len = n.value.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == PAD {
                out.push(T::zero());
            } else if i < len {
                out.push(n.value[i]);
            } else {
                return Err(Error::IndexOutOfRange { index: i, len });
            }
        }
        let g = n.needs_grad;
        self.push(out, shape.to_vec(), Op::Gather { src, index }, g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a);
        if numel(shape) != n.value.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", n.shape),
            });
        }
        let v = n.value.clone();
        let g = n.needs_grad;
        self.push(v, shape.to_vec(), Op::Reshape(a), g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let n = self.node(a);
        let v = n.value.iter().map(|&x| f(x)).collect();
        let s = n.shape.clone();
        let g = n.needs_grad;
        self.push(v, s, op, g)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (r, c) = rows_cols(&n.shape);
        let out = (0..r)
            .map(|i| n.value[i * c..(i + 1) * c].iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let shape = n.shape[..n.shape.len().saturating_sub(1)].to_vec();
        let g = n.needs_grad;
        self.push(out, shape, Op::ReduceSum(a), g)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().fold(T::zero(), |s, &x| s + x);
        let g = n.needs_grad;
        self.push(vec![s], vec![], Op::SumAll(a), g)
    }

    /// Column-wise max over row sets of a `[n, d]` buffer.
    ///
    /// `offsets` has one more entry than there are sets; set `s` spans rows
    /// `offsets[s]..offsets[s + 1]`. Output is `[sets, d]`; an empty set
    /// yields zeros. Ties resolve to the lowest row index.
    pub fn reduce_max_over_set(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let n = self.node(a);
        let (rows, d) = match n.shape.as_slice() {
            [r, d] => (*r, *d),
            s => {
                return Err(Error::Shape {
                    op: "reduce_max_over_set",
                    detail: format!("expected rank-2 input, got {s:?}"),
                })
            }
        };
        if offsets.is_empty()
            || offsets[0] != 0
            || *offsets.last().unwrap() != rows
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Shape {
                op: "reduce_max_over_set",
                detail: format!("offsets do not partition {rows} rows"),
            });
        }
        let sets = offsets.len() - 1;
        let mut out = vec![T::zero(); sets * d];
        let mut argmax = vec![PAD; sets * d];
        for s in 0..sets {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            let o = &mut out[s * d..(s + 1) * d];
            let am = &mut argmax[s * d..(s + 1) * d];
            o.copy_from_slice(&n.value[lo * d..(lo + 1) * d]);
            am.iter_mut().for_each(|x| *x = lo);
            for r in lo + 1..hi {
                let row = &n.value[r * d..(r + 1) * d];
                for c in 0..d {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        am[c] = r;
                    }
                }
            }
        }
        let g = n.needs_grad;
        self.push(out, vec![sets, d], Op::SetMax { src: a, argmax }, g)
    }

    /// Max over all rows of `[n, d]` (a single set), giving `[d]`.
    pub fn max_over_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.shape(a).first().copied().unwrap_or(0);
        let m = self.reduce_max_over_set(a, &[0, rows])?;
        let d = self.shape(m)[1];
        self.reshape(m, &[d])
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (r, c) = rows_cols(&n.shape);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let x = &n.value[i * c..(i + 1) * c];
            let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = T::zero();
            for (oj, &xj) in o.iter_mut().zip(x) {
                *oj = (xj - m).exp();
                z = z + *oj;
            }
            o.iter_mut().for_each(|v| *v = *v / z);
        }
        let s = n.shape.clone();
        let g = n.needs_grad;
        self.push(out, s, Op::Softmax(a), g)
    }

    /// `log Σ exp` over the last axis, max-shifted: `[.., n] -> [..]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (r, c) = rows_cols(&n.shape);
        let out = (0..r)
            .map(|i| {
                let x = &n.value[i * c..(i + 1) * c];
                let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                m + x.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln()
            })
            .collect();
        let shape = n.shape[..n.shape.len().saturating_sub(1)].to_vec();
        let g = n.needs_grad;
        self.push(out, shape, Op::LogSumExp(a), g)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rn = self.node(root);
        if rn.value.len() != 1 {
            return Err(Error::NotScalar(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.node(v).value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn acc_binary(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], f: impl Fn(usize) -> T) {
        if let Some(dst) = self.acc(grads, v) {
            if dst.len() == g.len() {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = *d + f(j);
                }
            } else {
                // broadcast scalar operand
                let s = (0..g.len()).fold(T::zero(), |s, j| s + f(j));
                dst[0] = dst[0] + s;
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        let bval = |v: Var, j: usize| {
            let val = &self.node(v).value;
            if val.len() == 1 {
                val[0]
            } else {
                val[j]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_binary(grads, *a, g, |j| g[j]);
                self.acc_binary(grads, *b, g, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_binary(grads, *a, g, |j| g[j]);
                self.acc_binary(grads, *b, g, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                self.acc_binary(grads, *a, g, |j| g[j] * bval(*b, j));
                self.acc_binary(grads, *b, g, |j| g[j] * bval(*a, j));
            }
            Op::Scale(a, c) => {
                let k = T::of(*c);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + k * g);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k) = (na.shape[0], na.shape[1]);
                let n = nb.shape[1];
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                if let Some(da) = self.acc(grads, *a) {
                    // dA += G · Bᵀ
                    T::gemm(m, n, k, g, (n as isize, 1), &nb.value, (1, n as isize), T::one(), da);
                }
                if let Some(db) = self.acc(grads, *b) {
                    // dB += Aᵀ · G
                    T::gemm(k, m, n, &na.value, (1, k as isize), g, (n as isize, 1), T::one(), db);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * tail;
                let mut start = 0;
                for &v in inputs {
                    let w = self.node(v).shape[*axis] * tail;
                    if let Some(d) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + w];
                            d[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    start += w;
                }
            }
            Op::Gather { src, index } => {
                if let Some(d) = self.acc(grads, *src) {
                    for (&i, &gi) in index.iter().zip(g) {
                        if i != PAD {
                            d[i] = d[i] + gi;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        if y[j] > T::zero() {
                            d[j] = d[j] + g[j];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * (T::one() - y[j] * y[j]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * y[j] * (T::one() - y[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * y[j];
                    }
                }
            }
            Op::Log(a) => {
                let x = &self.node(*a).value;
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] / x[j];
                    }
                }
            }
            Op::Square(a) => {
                let x = &self.node(*a).value;
                let two = T::of(2.0);
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] = d[j] + two * g[j] * x[j];
                    }
                }
            }
            Op::ReduceSum(a) => {
                let (_, c) = rows_cols(&self.node(*a).shape);
                if let Some(d) = self.acc(grads, *a) {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj = *dj + g[j / c];
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SetMax { src, argmax } => {
                let dcols = node.shape[1];
                if let Some(d) = self.acc(grads, *src) {
                    for (j, &r) in argmax.iter().enumerate() {
                        if r != PAD {
                            let idx = r * dcols + j % dcols;
                            d[idx] = d[idx] + g[j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = rows_cols(&node.shape);
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let dot = yi.iter().zip(gi).fold(T::zero(), |s, (&y, &g)| s + y * g);
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + yi[j] * (gi[j] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = &self.node(*a).value;
                let (r, c) = rows_cols(&self.node(*a).shape);
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            d[k] = d[k] + g[i] * (x[k] - y[i]).exp();
                        }
                    }
                }
            }
        }
    }
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `1e-4`:
/// `max_i |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with_step(f, x, shape, 1e-4)
}

pub fn grad_check_with_step<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.to_vec(), shape)?;
    let root = f(&mut tape, xv)?;
    let analytic = tape.backward(root)?.get_or_zero(xv, x.len());

    let eval = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p.to_vec(), shape)?;
        let r = f(&mut t, v)?;
        Ok(t.scalar_value(r))
    };
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Row indices `0..n` each repeated to tile a `[d]` vector into `[n, d]`.
pub fn tile_index(n: usize, d: usize) -> Arc<[usize]> {
    (0..n).flat_map(|_| 0..d).collect()
}

/// Flat indices selecting columns `start..start+len` of a `[rows, cols]` buffer.
pub fn column_index(rows: usize, cols: usize, start: usize, len: usize) -> Arc<[usize]> {
    (0..rows).flat_map(|r| (start..start + len).map(move |c| r * cols + c)).collect()
}
