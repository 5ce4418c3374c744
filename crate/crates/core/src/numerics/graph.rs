//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are appended to a [`Graph`] in evaluation order, so the tape
//! is a topological order by construction and [`Graph::backward`] is a single
//! reverse sweep. Every node keeps its forward value; leaves created with
//! `requires_grad` accumulate `∂loss/∂leaf` into their grad buffer each time
//! `backward` runs, until [`Graph::zero_grad`] clears them.

use std::rc::Rc;
use std::sync::atomic::{AtomicU32, Ordering};

use super::real::{gemm, MatRef};
use super::{Real, Tensor};
use crate::error::{ensure, Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, bias: Var },
    Expand { x: Var, times: usize },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    NarrowAxis1 { x: Var, start: usize },
    ConcatAxis1(Vec<Var>),
    SwapAxes12(Var),
    Rope { x: Var, cos: Rc<Vec<T>>, sin: Rc<Vec<T>> },
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    FlatView { x: Var, offset: usize },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Precomputed rotary tables: `cos`/`sin` of shape `[tokens, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeTables<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Rc<Vec<T>>,
    pub sin: Rc<Vec<T>>,
}

pub struct Graph<T: Real = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of_f64(0.044_715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + k * x * x * x);
    let th = T::one() - (T::one() + T::one()) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        ensure!(
            v.graph == self.id && v.index < self.nodes.len(),
            "variable {v:?} does not belong to graph {}",
            self.id
        );
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != value.len() {
            return Err(Error::dimension(format!(
                "leaf shape {shape:?} vs {} values",
                value.len()
            )));
        }
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![T::zero(); value.len()]),
            value,
            shape,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Copies a persistent tensor into the graph, inheriting its grad flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::of_f32(v)).collect();
        self.leaf(t.shape().to_vec(), value, t.requires_grad())
            .expect("tensor shape is consistent")
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.check(v).expect("foreign variable").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.check(v).expect("foreign variable").shape
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = self.check(v)?;
        ensure!(n.value.len() == 1, "value of shape {:?} is not a scalar", n.shape);
        Ok(n.value[0])
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.check(v).ok()?.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.fill(T::zero());
            }
        }
    }

    /// Adds the accumulated gradient of `v` into a persistent tensor.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Err(Error::contract("variable carries no gradient")),
        }
    }

    // ---- linear algebra -----------------------------------------------

    /// `op(a)·op(b)`. Without `ta`, `a` may have any rank ≥ 2 and is read as
    /// `[rows, k]` with its leading dimensions kept in the output shape.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.check(a)?.shape.clone(), self.check(b)?.shape.clone());
        ensure!(sb.len() == 2, "matmul rhs must be 2-D, got {sb:?}");
        ensure!(sa.len() >= 2, "matmul lhs must be at least 2-D, got {sa:?}");
        ensure!(!ta || sa.len() == 2, "transposed matmul lhs must be 2-D, got {sa:?}");
        let last = *sa.last().unwrap();
        let rows = numel(&sa) / last.max(1);
        let (m, k) = if ta { (last, rows) } else { (rows, last) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dimension(format!("matmul {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" })));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(&self.nodes[a.index].value, rows, last, ta),
            MatRef::new(&self.nodes[b.index].value, sb[0], sb[1], tb),
            &mut out,
            false,
        );
        let shape = if ta {
            vec![m, n]
        } else {
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            s
        };
        Ok(self.push(out, shape, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over `[batch, m, k]` operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.check(a)?.shape.clone(), self.check(b)?.shape.clone());
        ensure!(sa.len() == 3 && sb.len() == 3, "batch_matmul needs 3-D operands, got {sa:?} and {sb:?}");
        if sa[0] != sb[0] {
            return Err(Error::dimension(format!("batch sizes {} vs {}", sa[0], sb[0])));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dimension(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let batch = sa[0];
        let (la, lb) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let va = &self.nodes[a.index].value;
            let vb = &self.nodes[b.index].value;
            for (i, chunk) in out.chunks_mut(m * n).enumerate() {
                gemm(
                    MatRef::new(&va[i * la..(i + 1) * la], sa[1], sa[2], ta),
                    MatRef::new(&vb[i * lb..(i + 1) * lb], sb[1], sb[2], tb),
                    chunk,
                    false,
                );
            }
        }
        Ok(self.push(out, vec![batch, m, n], Op::BatchMatMul { a, b, ta, tb }, &[a, b]))
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.check(a)?.shape, &self.check(b)?.shape);
        if sa != sb {
            return Err(Error::dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, shape, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let n = self.check(x)?;
        let f = T::of_f64(factor);
        let (v, shape) = (n.value.iter().map(|&e| e * f).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Scale(x, f), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let n = self.check(x)?;
        let c = T::of_f64(c);
        let (v, shape) = (n.value.iter().map(|&e| e + c).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::AddScalar(x), &[x]))
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.check(x)?.shape.clone(), self.check(bias)?.shape.clone());
        let last = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != last {
            return Err(Error::dimension(format!("bias {sb:?} for input {sx:?}")));
        }
        let vb = &self.nodes[bias.index].value;
        let mut v = self.nodes[x.index].value.clone();
        for row in v.chunks_mut(last) {
            for (a, &b) in row.iter_mut().zip(vb) {
                *a = *a + b;
            }
        }
        Ok(self.push(v, sx, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Repeats each row of `[batch, d]` along a new token axis: `[batch, times, d]`.
    pub fn expand(&mut self, x: Var, times: usize) -> Result<Var> {
        let sx = self.check(x)?.shape.clone();
        ensure!(sx.len() == 2, "expand needs [batch, d], got {sx:?}");
        let (b, d) = (sx[0], sx[1]);
        let src = &self.nodes[x.index].value;
        let mut v = Vec::with_capacity(b * times * d);
        for row in src.chunks(d) {
            for _ in 0..times {
                v.extend_from_slice(row);
            }
        }
        Ok(self.push(v, vec![b, times, d], Op::Expand { x, times }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?;
        let (v, shape) = (n.value.iter().map(|&e| gelu_parts(e).0).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Gelu(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?;
        let (v, shape) = (n.value.iter().map(|&e| e * sigmoid(e)).collect(), n.shape.clone());
        Ok(self.push(v, shape, Op::Silu(x), &[x]))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?;
        let last = *n.shape.last().unwrap_or(&0);
        ensure!(last > 0, "softmax over empty axis");
        let mut v = n.value.clone();
        for row in v.chunks_mut(last) {
            let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut sum = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum = sum + *e;
            }
            for e in row.iter_mut() {
                *e = *e / sum;
            }
        }
        let shape = n.shape.clone();
        Ok(self.push(v, shape, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last dimension, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let n = self.check(x)?;
        let last = *n.shape.last().unwrap_or(&0);
        ensure!(last > 0, "layer_norm over empty axis");
        let inv_n = T::of_f64(1.0 / last as f64);
        let eps = T::of_f64(eps);
        let mut v = n.value.clone();
        let mut rstd = Vec::with_capacity(v.len() / last);
        for row in v.chunks_mut(last) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            rstd.push(r);
        }
        let shape = n.shape.clone();
        Ok(self.push(v, shape, Op::LayerNorm { x, rstd }, &[x]))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = self.check(x)?;
        if numel(&shape) != n.value.len() {
            return Err(Error::dimension(format!("reshape {:?} -> {shape:?}", n.shape)));
        }
        let v = n.value.clone();
        Ok(self.push(v, shape, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.check(x)?;
        let last = *n.shape.last().unwrap_or(&0);
        ensure!(start + len <= last, "slice {start}+{len} beyond last dim {last}");
        let v = n
            .value
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = n.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(v, shape, Op::SliceLast { x, start }, &[x]))
    }

    /// Rows `start..start+len` of axis 1 of a 3-D tensor.
    pub fn narrow_axis1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.check(x)?;
        ensure!(n.shape.len() == 3, "narrow_axis1 needs 3-D input, got {:?}", n.shape);
        let (b, t, d) = (n.shape[0], n.shape[1], n.shape[2]);
        ensure!(start + len <= t, "narrow {start}+{len} beyond axis length {t}");
        let mut v = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = bi * t * d;
            v.extend_from_slice(&n.value[base + start * d..base + (start + len) * d]);
        }
        Ok(self.push(v, vec![b, len, d], Op::NarrowAxis1 { x, start }, &[x]))
    }

    /// Concatenates 3-D tensors `[batch, t_i, d]` along axis 1.
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of nothing");
        let first = self.check(parts[0])?.shape.clone();
        ensure!(first.len() == 3, "concat_axis1 needs 3-D parts, got {first:?}");
        let (b, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = &self.check(p)?.shape;
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(Error::dimension(format!("concat part {s:?} vs {first:?}")));
            }
            total += s[1];
        }
        let mut v = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let n = &self.nodes[p.index];
                let len = n.shape[1] * d;
                v.extend_from_slice(&n.value[bi * len..(bi + 1) * len]);
            }
        }
        Ok(self.push(v, vec![b, total, d], Op::ConcatAxis1(parts.to_vec()), parts))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?;
        ensure!(n.shape.len() == 4, "swap_axes12 needs 4-D input, got {:?}", n.shape);
        let (a, b, c, d) = (n.shape[0], n.shape[1], n.shape[2], n.shape[3]);
        let v = swap12(&n.value, a, b, c, d);
        Ok(self.push(v, vec![a, c, b, d], Op::SwapAxes12(x), &[x]))
    }

    /// Rotates consecutive pairs of the last dimension of `[batch, heads, tokens, head_dim]`.
    pub fn rope(&mut self, x: Var, tables: &RopeTables<T>) -> Result<Var> {
        let n = self.check(x)?;
        ensure!(n.shape.len() == 4, "rope needs [batch, heads, tokens, head_dim], got {:?}", n.shape);
        let (t, dh) = (n.shape[2], n.shape[3]);
        ensure!(dh % 2 == 0, "rotary head dimension {dh} is odd");
        if tables.tokens != t || tables.pairs * 2 != dh {
            return Err(Error::dimension(format!(
                "rope tables {}x{} for input {:?}",
                tables.tokens, tables.pairs, n.shape
            )));
        }
        let mut v = n.value.clone();
        rotate(&mut v, t, dh, &tables.cos, &tables.sin, false);
        let shape = n.shape.clone();
        Ok(self.push(
            v,
            shape,
            Op::Rope {
                x,
                cos: Rc::clone(&tables.cos),
                sin: Rc::clone(&tables.sin),
            },
            &[x],
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let n = self.check(table)?;
        ensure!(n.shape.len() == 2, "embedding table must be 2-D, got {:?}", n.shape);
        let (vocab, d) = (n.shape[0], n.shape[1]);
        let mut v = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!(id < vocab, "token id {id} outside vocabulary of {vocab}");
            v.extend_from_slice(&n.value[id * d..(id + 1) * d]);
        }
        Ok(self.push(v, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// A contiguous run of a tensor's storage, viewed with a new shape.
    pub fn flat_view(&mut self, x: Var, offset: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = self.check(x)?;
        let len = numel(&shape);
        ensure!(offset + len <= n.value.len(), "view {offset}+{len} beyond {} values", n.value.len());
        let v = n.value[offset..offset + len].to_vec();
        Ok(self.push(v, shape, Op::FlatView { x, offset }, &[x]))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.value.iter().copied().sum::<T>();
        Ok(self.push(vec![s], vec![1], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?;
        ensure!(!n.value.is_empty(), "mean of empty tensor");
        let s = n.value.iter().copied().sum::<T>() / T::of_f64(n.value.len() as f64);
        Ok(self.push(vec![s], vec![1], Op::Mean(x), &[x]))
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ---- reverse sweep ------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.check(loss)?;
        ensure!(
            ln.value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            ln.shape
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            if node.requires_grad {
                let node = &mut self.nodes[i];
                let dst = node.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d = *d + *s;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Vec<T> { &nodes[v.index].value };
        let shp = |v: Var| -> &Vec<usize> { &nodes[v.index].shape };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (shp(a), shp(b));
                let last = *sa.last().unwrap();
                let rows = numel(sa) / last;
                let (m, n) = if ta { (last, if tb { sb[0] } else { sb[1] }) } else { (rows, if tb { sb[0] } else { sb[1] }) };
                let gm = MatRef::new(g, m, n, false);
                let gmt = MatRef::new(g, m, n, true);
                let bm = |t| MatRef::new(val(b), sb[0], sb[1], t);
                let am = |t| MatRef::new(val(a), rows, last, t);
                if let Some(da) = slot(grads, nodes, a) {
                    if ta {
                        gemm(bm(tb), gmt, da, true);
                    } else {
                        gemm(gm, bm(!tb), da, true);
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    if tb {
                        gemm(gmt, am(ta), db, true);
                    } else {
                        gemm(am(!ta), gm, db, true);
                    }
                }
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (shp(a).clone(), shp(b).clone());
                let batch = sa[0];
                let (la, lb) = (sa[1] * sa[2], sb[1] * sb[2]);
                let m = if ta { sa[2] } else { sa[1] };
                let n = if tb { sb[1] } else { sb[2] };
                let lg = m * n;
                let (va, vb) = (val(a), val(b));
                if let Some(da) = slot(grads, nodes, a) {
                    for i in 0..batch {
                        let gi = &g[i * lg..(i + 1) * lg];
                        let bi = &vb[i * lb..(i + 1) * lb];
                        let dst = &mut da[i * la..(i + 1) * la];
                        if ta {
                            gemm(MatRef::new(bi, sb[1], sb[2], tb), MatRef::new(gi, m, n, true), dst, true);
                        } else {
                            gemm(MatRef::new(gi, m, n, false), MatRef::new(bi, sb[1], sb[2], !tb), dst, true);
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for i in 0..batch {
                        let gi = &g[i * lg..(i + 1) * lg];
                        let ai = &va[i * la..(i + 1) * la];
                        let dst = &mut db[i * lb..(i + 1) * lb];
                        if tb {
                            gemm(MatRef::new(gi, m, n, true), MatRef::new(ai, sa[1], sa[2], ta), dst, true);
                        } else {
                            gemm(MatRef::new(ai, sa[1], sa[2], !ta), MatRef::new(gi, m, n, false), dst, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = slot(grads, nodes, a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = slot(grads, nodes, a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for (d, &s) in db.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, &s), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d = *d + s * y;
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for ((d, &s), &x) in db.iter_mut().zip(g).zip(va) {
                        *d = *d + s * x;
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d = *d + s * f;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    add_into(dx, g);
                }
            }
            &Op::AddBias { x, bias } => {
                let last = shp(bias)[0];
                if let Some(dx) = slot(grads, nodes, x) {
                    add_into(dx, g);
                }
                if let Some(db) = slot(grads, nodes, bias) {
                    for row in g.chunks(last) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Expand { x, times } => {
                let d = shp(x)[1];
                if let Some(dx) = slot(grads, nodes, x) {
                    for (dst, block) in dx.chunks_mut(d).zip(g.chunks(times * d)) {
                        for row in block.chunks(d) {
                            add_into(dst, row);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let last = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((dst, gr), yr) in dx.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let last = *node.shape.last().unwrap();
                let inv_n = T::of_f64(1.0 / last as f64);
                let xhat = &node.value;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (((dst, gr), xr), &r) in dx
                        .chunks_mut(last)
                        .zip(g.chunks(last))
                        .zip(xhat.chunks(last))
                        .zip(rstd)
                    {
                        let mg = gr.iter().copied().sum::<T>() * inv_n;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for ((d, &gi), &xi) in dst.iter_mut().zip(gr).zip(xr) {
                            *d = *d + r * (gi - mg - xi * mgx);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let vx = val(x);
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, &s), &xi) in dx.iter_mut().zip(g).zip(vx) {
                        *d = *d + s * gelu_parts(xi).1;
                    }
                }
            }
            &Op::Silu(x) => {
                let vx = val(x);
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, &s), &xi) in dx.iter_mut().zip(g).zip(vx) {
                        let sg = sigmoid(xi);
                        *d = *d + s * sg * (T::one() + xi * (T::one() - sg));
                    }
                }
            }
            &Op::SliceLast { x, start } => {
                let last = *shp(x).last().unwrap();
                let len = *node.shape.last().unwrap();
                if let Some(dx) = slot(grads, nodes, x) {
                    for (dst, row) in dx.chunks_mut(last).zip(g.chunks(len)) {
                        add_into(&mut dst[start..start + len], row);
                    }
                }
            }
            &Op::NarrowAxis1 { x, start } => {
                let s = shp(x).clone();
                let (t, d) = (s[1], s[2]);
                let len = node.shape[1];
                if let Some(dx) = slot(grads, nodes, x) {
                    for (bi, block) in g.chunks(len * d).enumerate() {
                        let base = bi * t * d + start * d;
                        add_into(&mut dx[base..base + len * d], block);
                    }
                }
            }
            Op::ConcatAxis1(parts) => {
                let (b, total, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let mut offset = 0;
                for &p in parts {
                    let tp = shp(p)[1];
                    if let Some(dp) = slot(grads, nodes, p) {
                        for bi in 0..b {
                            let src = &g[(bi * total + offset) * d..(bi * total + offset + tp) * d];
                            add_into(&mut dp[bi * tp * d..(bi + 1) * tp * d], src);
                        }
                    }
                    offset += tp;
                }
            }
            &Op::SwapAxes12(x) => {
                let s = &node.shape;
                let back = swap12(g, s[0], s[1], s[2], s[3]);
                if let Some(dx) = slot(grads, nodes, x) {
                    add_into(dx, &back);
                }
            }
            Op::Rope { x, cos, sin } => {
                let (t, dh) = (node.shape[2], node.shape[3]);
                let mut back = g.to_vec();
                rotate(&mut back, t, dh, cos, sin, true);
                if let Some(dx) = slot(grads, nodes, *x) {
                    add_into(dx, &back);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, x) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                let n = T::of_f64(val(x).len() as f64);
                if let Some(dx) = slot(grads, nodes, x) {
                    let s = g[0] / n;
                    for d in dx.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = shp(*table)[1];
                if let Some(dt) = slot(grads, nodes, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], row);
                    }
                }
            }
            &Op::FlatView { x, offset } => {
                if let Some(dx) = slot(grads, nodes, x) {
                    add_into(&mut dx[offset..offset + g.len()], g);
                }
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    let n = &nodes[v.index];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.index].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn swap12<T: Copy>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for ai in 0..a {
        for ci in 0..c {
            for bi in 0..b {
                let base = ((ai * b + bi) * c + ci) * d;
                out.extend_from_slice(&src[base..base + d]);
            }
        }
    }
    out
}

/// In-place pairwise rotation; `inverse` rotates by the negated angle.
fn rotate<T: Real>(v: &mut [T], tokens: usize, dh: usize, cos: &[T], sin: &[T], inverse: bool) {
    let pairs = dh / 2;
    for (row_index, row) in v.chunks_mut(dh).enumerate() {
        let t = row_index % tokens;
        let (c, s) = (&cos[t * pairs..(t + 1) * pairs], &sin[t * pairs..(t + 1) * pairs]);
        for j in 0..pairs {
            let (x0, x1) = (row[2 * j], row[2 * j + 1]);
            let sj = if inverse { -s[j] } else { s[j] };
            row[2 * j] = x0 * c[j] - x1 * sj;
            row[2 * j + 1] = x0 * sj + x1 * c[j];
        }
    }
}
