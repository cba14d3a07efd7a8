//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. Nodes are never mutated after they are recorded. `backward` walks
//! the nodes in exact reverse recording order and sums the contributions of
//! every consumer into each producer's gradient.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::shape::{broadcast_map, broadcast_shape, check_axis, split_axis};
use crate::tensor::{check_shape, Tensor, TensorId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Operand list for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
    },
    Unary {
        kind: UnaryKind,
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    MatMul {
        lhs: Var,
        rhs: Var,
    },
    Transpose {
        input: Var,
    },
    Reduce {
        kind: ReduceKind,
        input: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
        // flat input index chosen by max, one per output element
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Stack {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Gru {
        proj: Var,
        recurrent: Var,
        mask: Vec<bool>,
        reverse: bool,
        // per position: previous state, z, r, candidate (each H wide)
        cache: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<TensorId, Var>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mask_check(op: &'static str, mask: &[bool], extent: usize) -> Result<()> {
    if mask.len() != extent {
        return Err(TensorError::MaskLength {
            op,
            mask: mask.len(),
            extent,
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::DegenerateMask { op });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor as a leaf. Binding the same tensor twice returns the
    /// same handle, so all uses of a weight share one gradient slot.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.bound.insert(t.id(), v);
        v
    }

    /// Binds a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            self.nodes[v.0].requires_grad = true;
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.bound.insert(t.id(), v);
        v
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: n,
                actual: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Copies the value of `v` into a fresh constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = self.node(v);
        let (shape, data) = (node.shape.clone(), node.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::raw(n.shape.clone(), n.data.clone())
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        assert_eq!(n.data.len(), 1, "item: node holds {} values", n.data.len());
        n.data[0]
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise<T>) -> Result<Var> {
        match kind {
            Elementwise::Add(a, b) => self.add(a, b),
            Elementwise::Sub(a, b) => self.sub(a, b),
            Elementwise::Mul(a, b) => self.mul(a, b),
            Elementwise::Tanh(a) => Ok(self.tanh(a)),
            Elementwise::Sigmoid(a) => Ok(self.sigmoid(a)),
            Elementwise::Scale(a, c) => Ok(self.scale(a, c)),
        }
    }

    fn binary(&mut self, kind: BinaryKind, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (&self.node(lhs).shape, &self.node(rhs).shape);
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let f = |a: T, b: T| match kind {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        };
        let (shape, data) = if ls == rs {
            let a = &self.node(lhs).data;
            let b = &self.node(rhs).data;
            (ls.clone(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let out = broadcast_shape(ls, rs).ok_or_else(|| TensorError::Shape {
                op: name,
                lhs: ls.clone(),
                rhs: rs.clone(),
            })?;
            let lm = broadcast_map(&out, ls);
            let rm = broadcast_map(&out, rs);
            let a = &self.node(lhs).data;
            let b = &self.node(rhs).data;
            let data = lm.iter().zip(&rm).map(|(&i, &j)| f(a[i], b[j])).collect();
            (out, data)
        };
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(shape, data, Op::Binary { kind, lhs, rhs }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, input: Var) -> Var {
        let f = |x: T| match kind {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Neg => -x,
        };
        let node = self.node(input);
        let shape = node.shape.clone();
        let data = node.data.iter().map(|&x| f(x)).collect();
        let rg = self.rg(input);
        self.push(shape, data, Op::Unary { kind, input }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let node = self.node(input);
        let shape = node.shape.clone();
        let data = node.data.iter().map(|&x| x * factor).collect();
        let rg = self.rg(input);
        self.push(shape, data, Op::Scale { input, factor }, rg)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (&self.node(lhs).shape, &self.node(rhs).shape);
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.node(lhs).data, &self.node(rhs).data, &mut out, m, k, n);
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(vec![m, n], out, Op::MatMul { lhs, rhs }, rg))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let s = &self.node(input).shape;
        if s.len() != 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.node(input).data;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, r], out, Op::Transpose { input }, rg))
    }

    // ---- reductions --------------------------------------------------

    /// Reduces along `axis`, keeping it with extent 1. With a mask, only
    /// positions marked `true` along the axis are read.
    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        input: Var,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.node(input).shape.clone();
        check_axis("reduce", &shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        if let Some(m) = mask {
            mask_check("reduce", m, extent)?;
        }
        let valid = |k: usize| mask.is_none_or(|m| m[k]);
        let count = mask.map_or(extent, |m| m.iter().filter(|&&b| b).count());
        let src = &self.node(input).data;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = T::zero();
                        for k in (0..extent).filter(|&k| valid(k)) {
                            acc = acc + src[at(k)];
                        }
                        if kind == ReduceKind::Mean {
                            acc = acc / T::of(count as f64);
                        }
                        out.push(acc);
                    }
                    ReduceKind::Max => {
                        let mut best: Option<usize> = None;
                        for k in (0..extent).filter(|&k| valid(k)) {
                            // strict comparison keeps the lowest attaining index
                            if best.is_none_or(|b| src[at(k)] > src[b]) {
                                best = Some(at(k));
                            }
                        }
                        let b = best.expect("mask checked non-empty");
                        argmax.push(b);
                        out.push(src[b]);
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(input);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                kind,
                input,
                axis,
                mask: mask.map(|m| m.to_vec()),
                argmax,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, input: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, input, axis, mask)
    }

    pub fn max(&mut self, input: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.reduce(ReduceKind::Max, input, axis, mask)
    }

    pub fn sum(&mut self, input: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, input, axis, mask)
    }

    /// Sum of every element, as a one-element tensor of shape `[1]`.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let n = self.node(input).data.len();
        let flat = self.reshape(input, &[n]).expect("same element count");
        self.reduce(ReduceKind::Sum, flat, 0, None)
            .expect("axis 0 exists")
    }

    // ---- normalization -----------------------------------------------

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(input, axis, None)
    }

    /// Softmax along `axis`. Positions masked out get probability 0 and are
    /// never read.
    pub fn masked_softmax(&mut self, input: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.node(input).shape.clone();
        check_axis("softmax", &shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        if let Some(m) = mask {
            mask_check("softmax", m, extent)?;
        }
        let valid = |k: usize| mask.is_none_or(|m| m[k]);
        let src = &self.node(input).data;
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let mut hi = T::neg_infinity();
                for k in (0..extent).filter(|&k| valid(k)) {
                    hi = hi.max(src[at(k)]);
                }
                let mut z = T::zero();
                for k in (0..extent).filter(|&k| valid(k)) {
                    let e = (src[at(k)] - hi).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in (0..extent).filter(|&k| valid(k)) {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(shape, out, Op::Softmax { input, axis }, rg))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.node(input).shape.clone();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = &self.node(input).data;
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let hi = (0..extent).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..extent).map(|k| (src[at(k)] - hi).exp()).sum();
                let lz = hi + z.ln();
                for k in 0..extent {
                    out[at(k)] = src[at(k)] - lz;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(shape, out, Op::LogSoftmax { input, axis }, rg))
    }

    // ---- structure ---------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.node(*first).shape.clone();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = &self.node(v).shape;
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let n = self.node(v);
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Empty { op: "stack" })?;
        let base = self.node(*first).shape.clone();
        let mut out = Vec::with_capacity(base.iter().product::<usize>() * inputs.len());
        for &v in inputs {
            let n = self.node(v);
            if n.shape != base {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: base,
                    rhs: n.shape.clone(),
                });
            }
            out.extend_from_slice(&n.data);
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&base);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        let src = self.node(input);
        if n != src.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: src.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = src.data.clone();
        let rg = self.rg(input);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { input }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.node(input).shape.clone();
        check_axis("narrow", &shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        if len == 0 || start + len > extent {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let src = &self.node(input).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(out_shape, out, Op::Narrow { input, axis, start }, rg))
    }

    /// Row `i` of a matrix, as a `1 × cols` tensor.
    pub fn row(&mut self, input: Var, i: usize) -> Result<Var> {
        self.narrow(input, 0, i, 1)
    }

    /// Selects rows of a 2-D table: `out[l] = table[ids[l]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.node(table).shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::Axis {
                op: "gather_rows",
                axis: 1,
                rank: shape.len(),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- recurrence --------------------------------------------------

    /// A whole GRU pass as one node. `proj: L × 3H` holds the input
    /// projections (plus biases) for the update, reset and candidate gates
    /// side by side; `recurrent: H × 3H` holds the matching recurrent
    /// kernels. Per valid step:
    /// `z = σ(p_z + h·U_z)`, `r = σ(p_r + h·U_r)`,
    /// `c = tanh(p_c + (r⊙h)·U_c)`, `h' = (1 − z)⊙c + z⊙h`.
    /// The initial state is zero; masked positions repeat the previous state.
    /// Returns `L × H` states in position order.
    pub fn gru_sequence(&mut self, proj: Var, recurrent: Var, mask: &[bool], reverse: bool) -> Result<Var> {
        let ps = self.node(proj).shape.clone();
        let us = self.node(recurrent).shape.clone();
        if ps.len() != 2 || us.len() != 2 || !ps[1].is_multiple_of(3) || us != [ps[1] / 3, ps[1]] {
            return Err(TensorError::Shape {
                op: "gru_sequence",
                lhs: ps,
                rhs: us,
            });
        }
        let (len, h) = (ps[0], us[0]);
        if mask.len() != len {
            return Err(TensorError::MaskLength {
                op: "gru_sequence",
                mask: mask.len(),
                extent: len,
            });
        }
        let p = &self.node(proj).data;
        let u = &self.node(recurrent).data;
        let w = 3 * h;
        let mut out = vec![T::zero(); len * h];
        let mut cache = vec![T::zero(); len * 4 * h];
        let mut state = vec![T::zero(); h];
        let mut rh = vec![T::zero(); h];
        let mut acc = vec![T::zero(); w];
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            if mask[t] {
                let prow = &p[t * w..(t + 1) * w];
                // state · [U_z | U_r]
                acc.iter_mut().for_each(|a| *a = T::zero());
                for (i, &hi) in state.iter().enumerate() {
                    if hi == T::zero() {
                        continue;
                    }
                    let urow = &u[i * w..i * w + 2 * h];
                    for (a, &uv) in acc[..2 * h].iter_mut().zip(urow) {
                        *a = *a + hi * uv;
                    }
                }
                let c0 = t * 4 * h;
                for j in 0..h {
                    let z = sigmoid(prow[j] + acc[j]);
                    let r = sigmoid(prow[h + j] + acc[h + j]);
                    cache[c0 + j] = state[j];
                    cache[c0 + h + j] = z;
                    cache[c0 + 2 * h + j] = r;
                    rh[j] = r * state[j];
                }
                for (i, &v) in rh.iter().enumerate() {
                    if v == T::zero() {
                        continue;
                    }
                    let urow = &u[i * w + 2 * h..(i + 1) * w];
                    for (a, &uv) in acc[2 * h..].iter_mut().zip(urow) {
                        *a = *a + v * uv;
                    }
                }
                for j in 0..h {
                    let c = (prow[2 * h + j] + acc[2 * h + j]).tanh();
                    let z = cache[c0 + h + j];
                    cache[c0 + 3 * h + j] = c;
                    state[j] = c + z * (state[j] - c);
                }
            }
            out[t * h..(t + 1) * h].copy_from_slice(&state);
        }
        let rg = self.rg(proj) || self.rg(recurrent);
        Ok(self.push(
            vec![len, h],
            out,
            Op::Gru {
                proj,
                recurrent,
                mask: mask.to_vec(),
                reverse,
                cache,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Allows another `backward` call on this tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node that requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ln = self.node(loss);
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // differentiable leaves that were never reached get explicit zeros
        let reached: Vec<bool> = grads.iter().map(Option::is_some).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.data.len()]);
            }
        }
        Ok(Gradients {
            grads,
            reached,
            bound: self.bound.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let a = &self.node(lhs).data;
                let b = &self.node(rhs).data;
                let same = self.node(lhs).shape == node.shape && self.node(rhs).shape == node.shape;
                let (lm, rm) = if same {
                    (None, None)
                } else {
                    (
                        Some(broadcast_map(&node.shape, &self.node(lhs).shape)),
                        Some(broadcast_map(&node.shape, &self.node(rhs).shape)),
                    )
                };
                let li = |i: usize| lm.as_ref().map_or(i, |m| m[i]);
                let ri = |i: usize| rm.as_ref().map_or(i, |m| m[i]);
                if self.rg(lhs) {
                    let acc = slot(grads, lhs, a.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * b[ri(i)],
                        };
                        acc[li(i)] = acc[li(i)] + d;
                    }
                }
                if self.rg(rhs) {
                    let acc = slot(grads, rhs, b.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * a[li(i)],
                        };
                        acc[ri(i)] = acc[ri(i)] + d;
                    }
                }
            }
            Op::Unary { kind, input } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let x = &self.node(input).data;
                let y = &node.data;
                let acc = slot(grads, input, x.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Tanh => T::one() - y[i] * y[i],
                        UnaryKind::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryKind::Exp => y[i],
                        UnaryKind::Ln => T::one() / x[i],
                        UnaryKind::Abs => {
                            if x[i] > T::zero() {
                                T::one()
                            } else if x[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Neg => -T::one(),
                    };
                    acc[i] = acc[i] + g[i] * d;
                }
            }
            Op::Scale { input, factor } => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, g.len());
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a = *a + gi * *factor;
                    }
                }
            }
            Op::MatMul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let (m, k) = (self.node(lhs).shape[0], self.node(lhs).shape[1]);
                let n = self.node(rhs).shape[1];
                let a = &self.node(lhs).data;
                let b = &self.node(rhs).data;
                if self.rg(lhs) {
                    // grad_a = g · bᵀ
                    let acc = slot(grads, lhs, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + grow[j] * brow[j];
                            }
                            acc[i * k + p] = acc[i * k + p] + s;
                        }
                    }
                }
                if self.rg(rhs) {
                    // grad_b = aᵀ · g
                    let acc = slot(grads, rhs, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let arow = &mut acc[p * n..(p + 1) * n];
                            for j in 0..n {
                                arow[j] = arow[j] + av * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { input } => {
                if self.rg(*input) {
                    let (r, c) = (node.shape[1], node.shape[0]);
                    let acc = slot(grads, *input, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] = acc[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                input,
                axis,
                mask,
                argmax,
            } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let in_shape = &self.node(input).shape;
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let acc = slot(grads, input, outer * extent * inner);
                match kind {
                    ReduceKind::Max => {
                        for (j, &src) in argmax.iter().enumerate() {
                            acc[src] = acc[src] + g[j];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let valid = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
                        let count = mask
                            .as_ref()
                            .map_or(extent, |m| m.iter().filter(|&&b| b).count());
                        let w = if *kind == ReduceKind::Mean {
                            T::one() / T::of(count as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for i in 0..inner {
                                let gi = g[o * inner + i] * w;
                                for k in (0..extent).filter(|&k| valid(k)) {
                                    let at = (o * extent + k) * inner + i;
                                    acc[at] = acc[at] + gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let (outer, extent, inner) = split_axis(&node.shape, *axis);
                let y = &node.data;
                let acc = slot(grads, input, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let dot: T = (0..extent).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..extent {
                            let p = at(k);
                            acc[p] = acc[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { input, axis } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let (outer, extent, inner) = split_axis(&node.shape, *axis);
                let y = &node.data;
                let acc = slot(grads, input, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let gs: T = (0..extent).map(|k| g[at(k)]).sum();
                        for k in 0..extent {
                            let p = at(k);
                            acc[p] = acc[p] + g[p] - y[p].exp() * gs;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.node(v).shape[*axis];
                    if self.rg(v) {
                        let acc = slot(grads, v, outer * ext * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let dst = &mut acc[o * ext * inner..(o + 1) * ext * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[from..from + ext * inner]) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Stack { inputs } => {
                let chunk = g.len() / inputs.len();
                for (n, &v) in inputs.iter().enumerate() {
                    if self.rg(v) {
                        let acc = slot(grads, v, chunk);
                        for (d, &s) in acc.iter_mut().zip(&g[n * chunk..(n + 1) * chunk]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, g.len());
                    for (d, &s) in acc.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let input = *input;
                if !self.rg(input) {
                    return;
                }
                let in_shape = &self.node(input).shape;
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let len = node.shape[*axis];
                let acc = slot(grads, input, outer * extent * inner);
                for o in 0..outer {
                    let to = (o * extent + start) * inner;
                    let from = o * len * inner;
                    for t in 0..len * inner {
                        acc[to + t] = acc[to + t] + g[from + t];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if !self.rg(table) {
                    return;
                }
                let cols = node.shape[1];
                let acc = slot(grads, table, self.node(table).data.len());
                for (l, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        acc[id * cols + c] = acc[id * cols + c] + g[l * cols + c];
                    }
                }
            }
            Op::Gru {
                proj,
                recurrent,
                mask,
                reverse,
                cache,
            } => {
                let (proj, recurrent) = (*proj, *recurrent);
                let (len, h) = (node.shape[0], node.shape[1]);
                let w = 3 * h;
                let u = &self.node(recurrent).data;
                let mut dp = vec![T::zero(); len * w];
                let mut du = vec![T::zero(); h * w];
                let mut carry = vec![T::zero(); h];
                let mut dh = vec![T::zero(); h];
                let mut dhp = vec![T::zero(); h];
                let mut drh = vec![T::zero(); h];
                for step in (0..len).rev() {
                    let t = if *reverse { len - 1 - step } else { step };
                    for j in 0..h {
                        dh[j] = carry[j] + g[t * h + j];
                    }
                    if !mask[t] {
                        carry.copy_from_slice(&dh);
                        continue;
                    }
                    let c0 = t * 4 * h;
                    let hp = &cache[c0..c0 + h];
                    let z = &cache[c0 + h..c0 + 2 * h];
                    let r = &cache[c0 + 2 * h..c0 + 3 * h];
                    let c = &cache[c0 + 3 * h..c0 + 4 * h];
                    let dprow = &mut dp[t * w..(t + 1) * w];
                    for j in 0..h {
                        let dc = dh[j] * (T::one() - z[j]);
                        dprow[2 * h + j] = dc * (T::one() - c[j] * c[j]);
                        dprow[j] = dh[j] * (hp[j] - c[j]) * z[j] * (T::one() - z[j]);
                        dhp[j] = dh[j] * z[j];
                    }
                    // candidate path through r⊙h
                    for i in 0..h {
                        let urow = &u[i * w + 2 * h..(i + 1) * w];
                        let mut s = T::zero();
                        for j in 0..h {
                            s = s + dprow[2 * h + j] * urow[j];
                        }
                        drh[i] = s;
                        let rhi = r[i] * hp[i];
                        if rhi != T::zero() {
                            let durow = &mut du[i * w + 2 * h..(i + 1) * w];
                            for j in 0..h {
                                durow[j] = durow[j] + rhi * dprow[2 * h + j];
                            }
                        }
                    }
                    for j in 0..h {
                        dhp[j] = dhp[j] + drh[j] * r[j];
                        dprow[h + j] = drh[j] * hp[j] * r[j] * (T::one() - r[j]);
                    }
                    // update and reset gates
                    for i in 0..h {
                        let urow = &u[i * w..i * w + 2 * h];
                        let mut s = T::zero();
                        for j in 0..2 * h {
                            s = s + dprow[j] * urow[j];
                        }
                        dhp[i] = dhp[i] + s;
                        if hp[i] != T::zero() {
                            let durow = &mut du[i * w..i * w + 2 * h];
                            for j in 0..2 * h {
                                durow[j] = durow[j] + hp[i] * dprow[j];
                            }
                        }
                    }
                    carry.copy_from_slice(&dhp);
                }
                if self.rg(proj) {
                    let acc = slot(grads, proj, len * w);
                    for (a, &d) in acc.iter_mut().zip(&dp) {
                        *a = *a + d;
                    }
                }
                if self.rg(recurrent) {
                    let acc = slot(grads, recurrent, h * w);
                    for (a, &d) in acc.iter_mut().zip(&du) {
                        *a = *a + d;
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradient per node, addressable by handle or
/// by the identity of a bound tensor.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    reached: Vec<bool>,
    bound: HashMap<TensorId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor bound with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.bound.get(&t.id()).and_then(|&v| self.of(v))
    }

    /// Whether any consumer contributed to this node's gradient.
    pub fn reached(&self, v: Var) -> bool {
        self.reached.get(v.0).copied().unwrap_or(false)
    }

    pub fn reached_tensor(&self, t: &Tensor<T>) -> bool {
        self.bound.get(&t.id()).is_some_and(|&v| self.reached(v))
    }
}
