//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! Every op appends one node holding its output value and enough metadata to
//! run its backward rule. Node indices grow monotonically, so reverse index
//! order is a reverse topological order and [`Tape::backward`] is a single
//! reverse sweep. Gradients accumulate additively across fan-out, and across
//! repeated `backward` calls until [`Tape::zero_grads`].
//!
//! Parameters are *leased* onto a tape: [`Tape::param`] clones the tensor's
//! storage handle (no copy) and remembers which [`ParamSet`] slot it came
//! from, so [`Tape::apply_param_grads`] can push accumulated gradients back
//! after a backward pass.
//!
//! Value finiteness is enforced at module boundaries (data ingestion and the
//! per-step loss checks in the trainers), not after every op.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nd::kernels::{self, ConvGeom, PadMode};
use crate::nd::param::{ParamId, ParamSet};
use crate::nd::scalar::Scalar;
use crate::nd::tensor::{element_count, strides_for, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf { param: Option<(u64, usize)> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Gelu(Var),
    Scale(Var, T),
    Shift(Var, T),
    Clamp(Var, T, T),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow(Var, usize, usize, usize),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    /// Stored payload: per-row 1/sqrt(var + eps).
    LayerNorm(Var, Vec<T>),
    SumAxes(Var, Vec<usize>, bool),
    /// Stored payload: per-row sorting permutation (output j = input perm[j]).
    Sort(Var, Vec<u32>),
    Conv2d(Var, Var, ConvGeom),
    Upsample2(Var),
    ResizeBilinear(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Numpy-style shape broadcasting, right-aligned.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through `out_rank` broadcast axes: missing
/// leading axes and size-1 axes get stride 0.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let own = strides_for(shape);
    let off = out_rank - shape.len();
    let mut res = vec![0usize; out_rank];
    for i in 0..shape.len() {
        res[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    res
}

/// Visit every output element of a broadcast binary op:
/// `f(out_index, a_offset, b_offset)`.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out_shape.len();
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut digits = vec![0usize; rank - 1];
    let mut oi = 0usize;
    for _ in 0..outer {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (k, &d) in digits.iter().enumerate() {
            oa += d * sa[k];
            ob += d * sb[k];
        }
        for j in 0..last {
            f(oi, oa + j * la, ob + j * lb);
            oi += 1;
        }
        for k in (0..rank - 1).rev() {
            digits[k] += 1;
            if digits[k] < out_shape[k] {
                break;
            }
            digits[k] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_backward<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// Reverse-mode tape. See the module docs for the execution model.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(element_count(&shape), value.len());
        self.push_arc(shape, Arc::new(value), requires_grad, op)
    }

    fn push_arc(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated on a node by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The single element of a scalar node.
    pub fn item(&self, v: Var) -> Result<T> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar node of shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::from_vec(node.value.to_vec(), &node.shape).expect("node shape consistent")
    }

    // ---- Leaves -----------------------------------------------------------

    /// Lease a tensor onto the tape (no data copy). Gradient participation
    /// follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_arc(
            t.shape().to_vec(),
            t.data_arc(),
            t.requires_grad,
            Op::Leaf { param: None },
        )
    }

    /// Lease a tensor with gradients off regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_arc(
            t.shape().to_vec(),
            t.data_arc(),
            false,
            Op::Leaf { param: None },
        )
    }

    /// Lease a parameter from `ps`, remembering its slot so
    /// [`Tape::apply_param_grads`] can route gradients back.
    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> Var {
        let t = ps.get(id);
        self.push_arc(
            t.shape().to_vec(),
            t.data_arc(),
            t.requires_grad,
            Op::Leaf {
                param: Some((ps.uid(), id.index())),
            },
        )
    }

    /// Fresh leaf from raw values (mostly for tests).
    pub fn from_values(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        let t = Tensor::from_vec(values, shape)?.with_requires_grad(requires_grad);
        Ok(self.leaf(&t))
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, v: T) -> Var {
        self.push(Vec::new(), vec![v], false, Op::Leaf { param: None })
    }

    // ---- Elementwise binary ops (broadcasting) ----------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let rank = out_shape.len();
        let sa = bcast_strides(self.shape(a), rank);
        let sb = bcast_strides(self.shape(b), rank);
        let av = self.val(a);
        let bv = self.val(b);
        let mut out = vec![T::ZERO; element_count(&out_shape)];
        for_each_bcast(&out_shape, &sa, &sb, |oi, oa, ob| {
            out[oi] = f(av[oa], bv[ob]);
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, rg, op()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, || Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, || Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, || Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, || Op::Div(a, b))
    }

    // ---- Elementwise unary ops --------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.val(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_forward, Op::Gelu(x))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Add a constant to every element.
    pub fn shift(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x, c))
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max_s(lo).min_s(hi), Op::Clamp(x, lo, hi))
    }

    // ---- Linear algebra ----------------------------------------------------

    /// Matrix multiply with numpy-style broadcasting over leading (batch)
    /// axes: `[..., M, K] @ [..., K, N] -> [..., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {ash:?} and {bsh:?}"
            )));
        }
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {ash:?} @ {bsh:?}"
            )));
        }
        let batch = broadcast_shapes(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2])?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let av = self.val(a);
        let bv = self.val(b);
        let mut out = vec![T::ZERO; element_count(&out_shape)];
        let sa = bcast_strides(&ash[..ash.len() - 2], batch.len());
        let sb = bcast_strides(&bsh[..bsh.len() - 2], batch.len());
        let (blk_a, blk_b, blk_o) = (m * ka, kb * n, m * n);
        for_each_batch(&batch, &sa, &sb, |bi, ba, bb| {
            kernels::mm_forward(
                &av[ba * blk_a..(ba + 1) * blk_a],
                &bv[bb * blk_b..(bb + 1) * blk_b],
                &mut out[bi * blk_o..(bi + 1) * blk_o],
                m,
                ka,
                n,
            );
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, rg, Op::Matmul(a, b)))
    }

    /// Reorder axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permute axes {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides_for(&shape);
        let moved: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let xv = self.val(x);
        let mut out = vec![T::ZERO; xv.len()];
        for_each_index(&out_shape, |oi, digits| {
            let mut off = 0;
            for (k, &d) in digits.iter().enumerate() {
                off += d * moved[k];
            }
            out[oi] = xv[off];
        });
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::Permute(x, axes.to_vec())))
    }

    /// Change shape without moving data (element counts must match).
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        if element_count(new_shape) != self.value(x).len() || new_shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {new_shape:?}",
                self.shape(x)
            )));
        }
        let value = self.val(x); // shared storage; reshape is free
        let rg = self.rg(x);
        Ok(self.push_arc(new_shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of bounds for {shape:?}"
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.val(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::Narrow(x, axis, start, len)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat shapes {s:?} and {first:?} differ outside axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(element_count(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let xv = self.val(x);
                let base = o * ext * inner;
                out.extend_from_slice(&xv[base..base + ext * inner]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out_shape, out, rg, Op::Concat(xs.to_vec(), axis)))
    }

    /// Softmax along the last axis (numerically stabilized by max
    /// subtraction, which does not change the derivative).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("softmax needs rank >= 1".to_string()));
        }
        let last = *shape.last().unwrap();
        let xv = self.val(x);
        let mut out = vec![T::ZERO; xv.len()];
        for (row_x, row_o) in xv.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let mut mx = row_x[0];
            for &v in row_x {
                mx = mx.max_s(v);
            }
            let mut sum = T::ZERO;
            for (o, &v) in row_o.iter_mut().zip(row_x) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in row_o.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax(x)))
    }

    /// Normalize the last axis to mean 0, variance 1 (population), with
    /// epsilon inside the square root. Affine scale/shift is composed
    /// separately via `mul`/`add`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("layer_norm needs rank >= 1".to_string()));
        }
        let last = *shape.last().unwrap();
        let inv_n = T::from_f64(1.0 / last as f64);
        let eps_t = T::from_f64(eps);
        let xv = self.val(x);
        let mut out = vec![T::ZERO; xv.len()];
        let mut inv_stds = Vec::with_capacity(xv.len() / last);
        for (row_x, row_o) in xv.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            let mean = row_x.iter().copied().sum::<T>() * inv_n;
            let mut var = T::ZERO;
            for &v in row_x {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = T::ONE / (var + eps_t).sqrt();
            inv_stds.push(inv_std);
            for (o, &v) in row_o.iter_mut().zip(row_x) {
                *o = (v - mean) * inv_std;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::LayerNorm(x, inv_stds)))
    }

    /// Sum over the given axes. `keepdim` keeps reduced extents as 1;
    /// otherwise they are dropped (reducing all axes yields a rank-0 scalar).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduce = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::dim(format!(
                    "sum axis {a} out of range for shape {shape:?}"
                )));
            }
            reduce[a] = true;
        }
        let out_shape: Vec<usize> = if keepdim {
            shape
                .iter()
                .enumerate()
                .map(|(i, &e)| if reduce[i] { 1 } else { e })
                .collect()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduce[*i])
                .map(|(_, &e)| e)
                .collect()
        };
        // Per-input-axis stride into the output.
        let out_strides = strides_for(&out_shape);
        let mut map = vec![0usize; shape.len()];
        let mut oi = 0usize;
        for i in 0..shape.len() {
            if reduce[i] {
                if keepdim {
                    oi += 1;
                }
            } else {
                map[i] = out_strides[oi];
                oi += 1;
            }
        }
        let xv = self.val(x);
        let mut out = vec![T::ZERO; element_count(&out_shape)];
        for_each_index(&shape, |ii, digits| {
            let mut off = 0;
            for (k, &d) in digits.iter().enumerate() {
                if !reduce[k] {
                    off += d * map[k];
                }
            }
            out[off] += xv[ii];
        });
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, rg, Op::SumAxes(x, axes.to_vec(), keepdim)))
    }

    /// Mean over the given axes (sum then scale).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x);
        let mut n = 1usize;
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a < shape.len() && !seen[a] {
                n *= shape[a];
                seen[a] = true;
            }
        }
        let s = self.sum_axes(x, axes, keepdim)?;
        Ok(self.scale(s, T::from_f64(1.0 / n as f64)))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, T::from_f64(1.0 / n as f64)))
    }

    /// Mean squared error between two same-shape nodes (rank-0 result).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Sort each last-axis row ascending. Stable: ties keep their original
    /// order, and the gradient is routed through the chosen permutation.
    pub fn sort(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("sort needs rank >= 1".to_string()));
        }
        let last = *shape.last().unwrap();
        let xv = self.val(x);
        let rows = xv.len() / last;
        let mut out = vec![T::ZERO; xv.len()];
        let mut perm = vec![0u32; xv.len()];
        let mut order: Vec<u32> = Vec::with_capacity(last);
        for r in 0..rows {
            let row = &xv[r * last..(r + 1) * last];
            order.clear();
            order.extend(0..last as u32);
            order.sort_by(|&i, &j| {
                row[i as usize]
                    .partial_cmp(&row[j as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (jj, &src) in order.iter().enumerate() {
                out[r * last + jj] = row[src as usize];
                perm[r * last + jj] = src;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Sort(x, perm)))
    }

    /// 2-D convolution over `[B, Cin, H, W]` with kernel
    /// `[Cout, Cin, kh, kw]` (bias-free; compose bias with broadcast `add`).
    pub fn conv2d(&mut self, x: Var, k: Var, stride: (usize, usize), pad: PadMode) -> Result<Var> {
        let geom = kernels::conv_geometry(self.shape(x), self.shape(k), stride, pad)?;
        let xv = self.val(x);
        let kv = self.val(k);
        let mut out = vec![T::ZERO; geom.batch * geom.cout * geom.oh * geom.ow];
        kernels::conv2d_forward(&geom, &xv, &kv, &mut out);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            vec![geom.batch, geom.cout, geom.oh, geom.ow],
            out,
            rg,
            Op::Conv2d(x, k, geom),
        ))
    }

    /// Nearest-neighbor 2x upsampling of the trailing two axes.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!(
                "upsample_nearest_2x expects rank 4, got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let xv = self.val(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xv[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, oh, ow], out, rg, Op::Upsample2(x)))
    }

    /// Bilinear resize of the trailing two axes to `(oh, ow)` using
    /// half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::dim(format!(
                "resize_bilinear expects rank 4 and positive target, got {shape:?} -> ({oh},{ow})"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let th = kernels::linear_table(h, oh);
        let tw = kernels::linear_table(w, ow);
        let xv = self.val(x);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xv[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (i, sh) in th.iter().enumerate() {
                let (wh0, wh1) = (T::from_f64(1.0 - sh.w), T::from_f64(sh.w));
                for (j, sw) in tw.iter().enumerate() {
                    let (ww0, ww1) = (T::from_f64(1.0 - sw.w), T::from_f64(sw.w));
                    dst[i * ow + j] = wh0 * ww0 * src[sh.i0 * w + sw.i0]
                        + wh0 * ww1 * src[sh.i0 * w + sw.i1]
                        + wh1 * ww0 * src[sh.i1 * w + sw.i0]
                        + wh1 * ww1 * src[sh.i1 * w + sw.i1];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, oh, ow], out, rg, Op::ResizeBilinear(x)))
    }

    // ---- Backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients land on every
    /// `requires_grad` node reachable from `loss` and accumulate additively
    /// across repeated calls (use [`Tape::zero_grads`] to reset).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(Error::contract(
                "backward: loss does not depend on any tensor with requires_grad".to_string(),
            ));
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            self.backward_node(i, &g, &mut work);
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, &gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clear gradients on every node (leases keep their values).
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Push accumulated leaf gradients back into the parameter set they were
    /// leased from. Other sets' leaves are left alone.
    pub fn apply_param_grads(&self, ps: &mut ParamSet<T>) {
        for node in &self.nodes {
            if let Op::Leaf {
                param: Some((uid, idx)),
            } = node.op
            {
                if uid == ps.uid() {
                    if let Some(g) = &node.grad {
                        ps.tensor_mut_by_index(idx).accumulate_grad(g);
                    }
                }
            }
        }
    }

    fn ensure(work: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut [T] {
        if work[idx].is_none() {
            work[idx] = Some(vec![T::ZERO; len]);
        }
        work[idx].as_mut().unwrap()
    }

    fn backward_node(&self, i: usize, g: &[T], work: &mut [Option<Vec<T>>]) {
        let out_shape = self.nodes[i].shape.clone();
        let out_val = Arc::clone(&self.nodes[i].value);
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let rank = out_shape.len();
                let sa = bcast_strides(self.shape(a), rank);
                let sb = bcast_strides(self.shape(b), rank);
                let av = self.val(a);
                let bv = self.val(b);
                let (do_a, do_b) = (self.rg(a), self.rg(b));
                let (la, lb) = (self.value(a).len(), self.value(b).len());
                // Pre-allocate both slots so the closure can write freely.
                let mut ga = if do_a { vec![T::ZERO; la] } else { Vec::new() };
                let mut gb = if do_b { vec![T::ZERO; lb] } else { Vec::new() };
                let op = &self.nodes[i].op;
                for_each_bcast(&out_shape, &sa, &sb, |oi, oa, ob| match op {
                    Op::Add(..) => {
                        if do_a {
                            ga[oa] += g[oi];
                        }
                        if do_b {
                            gb[ob] += g[oi];
                        }
                    }
                    Op::Sub(..) => {
                        if do_a {
                            ga[oa] += g[oi];
                        }
                        if do_b {
                            gb[ob] -= g[oi];
                        }
                    }
                    Op::Mul(..) => {
                        if do_a {
                            ga[oa] += g[oi] * bv[ob];
                        }
                        if do_b {
                            gb[ob] += g[oi] * av[oa];
                        }
                    }
                    Op::Div(..) => {
                        let inv = T::ONE / bv[ob];
                        if do_a {
                            ga[oa] += g[oi] * inv;
                        }
                        if do_b {
                            gb[ob] -= g[oi] * av[oa] * inv * inv;
                        }
                    }
                    _ => unreachable!(),
                });
                if do_a {
                    accumulate(Self::ensure(work, a.0, la), &ga);
                }
                if do_b {
                    accumulate(Self::ensure(work, b.0, lb), &gb);
                }
            }
            Op::Neg(x) => {
                if self.rg(*x) {
                    let gx = Self::ensure(work, x.0, g.len());
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi -= go;
                    }
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let gx = Self::ensure(work, x.0, g.len());
                    for ((gi, &go), &y) in gx.iter_mut().zip(g).zip(out_val.iter()) {
                        *gi += go * y;
                    }
                }
            }
            Op::Ln(x) => {
                if self.rg(*x) {
                    let xv = self.val(*x);
                    let gx = Self::ensure(work, x.0, g.len());
                    for ((gi, &go), &xi) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        *gi += go / xi;
                    }
                }
            }
            Op::Abs(x) => {
                if self.rg(*x) {
                    let xv = self.val(*x);
                    let gx = Self::ensure(work, x.0, g.len());
                    for ((gi, &go), &xi) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        if xi > T::ZERO {
                            *gi += go;
                        } else if xi < T::ZERO {
                            *gi -= go;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.val(*x);
                    let gx = Self::ensure(work, x.0, g.len());
                    for ((gi, &go), &xi) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        *gi += go * gelu_backward(xi);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let c = *c;
                    let gx = Self::ensure(work, x.0, g.len());
                    for (gi, &go) in gx.iter_mut().zip(g) {
                        *gi += go * c;
                    }
                }
            }
            Op::Shift(x, _) => {
                if self.rg(*x) {
                    let gx = Self::ensure(work, x.0, g.len());
                    accumulate(gx, g);
                }
            }
            Op::Clamp(x, lo, hi) => {
                if self.rg(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let xv = self.val(*x);
                    let gx = Self::ensure(work, x.0, g.len());
                    for ((gi, &go), &xi) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        if xi >= lo && xi <= hi {
                            *gi += go;
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let ash = self.shape(a).to_vec();
                let bsh = self.shape(b).to_vec();
                let (m, kk) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch = out_shape[..out_shape.len() - 2].to_vec();
                let sa = bcast_strides(&ash[..ash.len() - 2], batch.len());
                let sb = bcast_strides(&bsh[..bsh.len() - 2], batch.len());
                let av = self.val(a);
                let bv = self.val(b);
                let (do_a, do_b) = (self.rg(a), self.rg(b));
                let (blk_a, blk_b, blk_o) = (m * kk, kk * n, m * n);
                let mut ga = if do_a {
                    vec![T::ZERO; av.len()]
                } else {
                    Vec::new()
                };
                let mut gb = if do_b {
                    vec![T::ZERO; bv.len()]
                } else {
                    Vec::new()
                };
                for_each_batch(&batch, &sa, &sb, |bi, ba, bb| {
                    let gc = &g[bi * blk_o..(bi + 1) * blk_o];
                    if do_a {
                        kernels::mm_grad_a(
                            &mut ga[ba * blk_a..(ba + 1) * blk_a],
                            gc,
                            &bv[bb * blk_b..(bb + 1) * blk_b],
                            m,
                            kk,
                            n,
                        );
                    }
                    if do_b {
                        kernels::mm_grad_b(
                            &mut gb[bb * blk_b..(bb + 1) * blk_b],
                            gc,
                            &av[ba * blk_a..(ba + 1) * blk_a],
                            m,
                            kk,
                            n,
                        );
                    }
                });
                if do_a {
                    accumulate(Self::ensure(work, a.0, av.len()), &ga);
                }
                if do_b {
                    accumulate(Self::ensure(work, b.0, bv.len()), &gb);
                }
            }
            Op::Permute(x, axes) => {
                if self.rg(*x) {
                    let in_strides = strides_for(self.shape(*x));
                    let moved: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                    let gx = Self::ensure(work, x.0, self.value(*x).len());
                    for_each_index(&out_shape, |oi, digits| {
                        let mut off = 0;
                        for (k, &d) in digits.iter().enumerate() {
                            off += d * moved[k];
                        }
                        gx[off] += g[oi];
                    });
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let gx = Self::ensure(work, x.0, g.len());
                    accumulate(gx, g);
                }
            }
            Op::Narrow(x, axis, start, len) => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let gx = Self::ensure(work, x.0, self.value(*x).len());
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * shape[*axis] + start) * inner;
                        accumulate(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let xs = xs.clone();
                let axis = *axis;
                let first = self.shape(xs[0]).to_vec();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut col = 0usize;
                for &x in &xs {
                    let ext = self.shape(x)[axis];
                    if self.rg(x) {
                        let n = self.value(x).len();
                        let gx = Self::ensure(work, x.0, n);
                        for o in 0..outer {
                            let src = (o * total + col) * inner;
                            let dst = o * ext * inner;
                            accumulate(&mut gx[dst..dst + ext * inner], &g[src..src + ext * inner]);
                        }
                    }
                    col += ext;
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let last = *out_shape.last().unwrap();
                    let gx = Self::ensure(work, x.0, g.len());
                    for r in 0..g.len() / last {
                        let y = &out_val[r * last..(r + 1) * last];
                        let go = &g[r * last..(r + 1) * last];
                        let mut dot = T::ZERO;
                        for (yv, gv) in y.iter().zip(go) {
                            dot += *yv * *gv;
                        }
                        let gr = &mut gx[r * last..(r + 1) * last];
                        for ((gi, &yv), &gv) in gr.iter_mut().zip(y).zip(go) {
                            *gi += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x, inv_stds) => {
                if self.rg(*x) {
                    let last = *out_shape.last().unwrap();
                    let inv_n = T::from_f64(1.0 / last as f64);
                    let inv_stds = inv_stds.clone();
                    let gx = Self::ensure(work, x.0, g.len());
                    for r in 0..g.len() / last {
                        let y = &out_val[r * last..(r + 1) * last];
                        let go = &g[r * last..(r + 1) * last];
                        let inv = inv_stds[r];
                        let mut mean_g = T::ZERO;
                        let mut mean_gy = T::ZERO;
                        for (yv, gv) in y.iter().zip(go) {
                            mean_g += *gv;
                            mean_gy += *gv * *yv;
                        }
                        mean_g *= inv_n;
                        mean_gy *= inv_n;
                        let gr = &mut gx[r * last..(r + 1) * last];
                        for ((gi, &yv), &gv) in gr.iter_mut().zip(y).zip(go) {
                            *gi += inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::SumAxes(x, axes, keepdim) => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let mut reduce = vec![false; shape.len()];
                    for &a in axes {
                        reduce[a] = true;
                    }
                    let keepdim = *keepdim;
                    let out_strides = strides_for(&out_shape);
                    let mut map = vec![0usize; shape.len()];
                    let mut oi = 0usize;
                    for k in 0..shape.len() {
                        if reduce[k] {
                            if keepdim {
                                oi += 1;
                            }
                        } else {
                            map[k] = out_strides[oi];
                            oi += 1;
                        }
                    }
                    let gx = Self::ensure(work, x.0, self.value(*x).len());
                    for_each_index(&shape, |ii, digits| {
                        let mut off = 0;
                        for (k, &d) in digits.iter().enumerate() {
                            if !reduce[k] {
                                off += d * map[k];
                            }
                        }
                        gx[ii] += g[off];
                    });
                }
            }
            Op::Sort(x, perm) => {
                if self.rg(*x) {
                    let last = *out_shape.last().unwrap();
                    let perm = perm.clone();
                    let gx = Self::ensure(work, x.0, g.len());
                    for r in 0..g.len() / last {
                        for j in 0..last {
                            gx[r * last + perm[r * last + j] as usize] += g[r * last + j];
                        }
                    }
                }
            }
            Op::Conv2d(x, k, geom) => {
                let (x, k, geom) = (*x, *k, *geom);
                if self.rg(x) {
                    let kv = self.val(k);
                    let gx = Self::ensure(work, x.0, self.value(x).len());
                    kernels::conv2d_backward_input(&geom, &kv, g, gx);
                }
                if self.rg(k) {
                    let xv = self.val(x);
                    let gk = Self::ensure(work, k.0, self.value(k).len());
                    kernels::conv2d_backward_kernel(&geom, &xv, g, gk);
                }
            }
            Op::Upsample2(x) => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = Self::ensure(work, x.0, b * c * h * w);
                    for bc in 0..b * c {
                        let go = &g[bc * oh * ow..(bc + 1) * oh * ow];
                        let gi = &mut gx[bc * h * w..(bc + 1) * h * w];
                        for i in 0..oh {
                            for j in 0..ow {
                                gi[(i / 2) * w + j / 2] += go[i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (out_shape[2], out_shape[3]);
                    let th = kernels::linear_table(h, oh);
                    let tw = kernels::linear_table(w, ow);
                    let gx = Self::ensure(work, x.0, b * c * h * w);
                    for bc in 0..b * c {
                        let go = &g[bc * oh * ow..(bc + 1) * oh * ow];
                        let gi = &mut gx[bc * h * w..(bc + 1) * h * w];
                        for (i, sh) in th.iter().enumerate() {
                            let (wh0, wh1) = (T::from_f64(1.0 - sh.w), T::from_f64(sh.w));
                            for (j, sw) in tw.iter().enumerate() {
                                let (ww0, ww1) = (T::from_f64(1.0 - sw.w), T::from_f64(sw.w));
                                let gv = go[i * ow + j];
                                gi[sh.i0 * w + sw.i0] += wh0 * ww0 * gv;
                                gi[sh.i0 * w + sw.i1] += wh0 * ww1 * gv;
                                gi[sh.i1 * w + sw.i0] += wh1 * ww0 * gv;
                                gi[sh.i1 * w + sw.i1] += wh1 * ww1 * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Odometer over `shape`: calls `f(linear_index, digits)` for each element
/// in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n = element_count(shape);
    let mut digits = vec![0usize; shape.len()];
    for i in 0..n {
        f(i, &digits);
        for k in (0..shape.len()).rev() {
            digits[k] += 1;
            if digits[k] < shape[k] {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Odometer over broadcast batch dims: `f(out_batch_index, a_batch_offset,
/// b_batch_offset)`, offsets in units of matrix blocks.
fn for_each_batch(
    batch: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if batch.is_empty() {
        f(0, 0, 0);
        return;
    }
    let n: usize = batch.iter().product();
    let mut digits = vec![0usize; batch.len()];
    for bi in 0..n {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (k, &d) in digits.iter().enumerate() {
            oa += d * sa[k];
            ob += d * sb[k];
        }
        f(bi, oa, ob);
        for k in (0..batch.len()).rev() {
            digits[k] += 1;
            if digits[k] < batch[k] {
                break;
            }
            digits[k] = 0;
        }
    }
}
