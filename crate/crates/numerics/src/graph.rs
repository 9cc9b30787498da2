//! Tape of primitive applications and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients additively wherever a value fans out.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T>>;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s.
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Expand(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    L2Normalize {
        a: Var,
        norms: Vec<T>,
        eps: T,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: T,
        na: Vec<T>,
        nb: Vec<T>,
        active: Vec<bool>,
    },
    Custom {
        a: Var,
        backward: CustomBackward<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumLast(..) => "sum_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax_lastdim",
            Op::Gelu(..) => "gelu",
            Op::L2Normalize { .. } => "l2_normalize_lastdim",
            Op::Cosine { .. } => "cosine_similarity_lastdim",
            Op::Custom { .. } => "custom",
        }
    }
}

/// Per-batch matrix offsets for a (possibly broadcast) batched product.
#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `a · bᵀ` instead of `a · b`.
    transpose_b: bool,
    /// `(a_offset, b_offset)` per output batch entry, in elements.
    offsets: Vec<(usize, usize)>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation record.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `target` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let r = target.len();
    let mut own = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        own[i] = acc;
        acc *= shape[i];
    }
    (0..r)
        .map(|i| {
            if i + shape.len() < r {
                0
            } else {
                let j = i + shape.len() - r;
                if shape[j] == 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, in_offset)` for every element of `out_shape`.
fn for_each_strided(out_shape: &[usize], in_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let r = out_shape.len();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for lin in 0..total {
        f(lin, off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += in_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= in_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn permute_tensor<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    // Copy contiguous runs when the innermost axis is preserved.
    let r = out_shape.len();
    if r > 0 && axes[r - 1] == r - 1 && r > 1 {
        let inner = out_shape[r - 1];
        let outer_shape = &out_shape[..r - 1];
        let outer_strides = &in_strides[..r - 1];
        for_each_strided(outer_shape, outer_strides, |lin, off| {
            out[lin * inner..(lin + 1) * inner].copy_from_slice(&src[off..off + inner]);
        });
    } else {
        for_each_strided(&out_shape, &in_strides, |lin, off| {
            out[lin] = src[off];
        });
    }
    Tensor::from_vec(&out_shape, out).expect("permute preserves length")
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A graph that rejects any primitive producing NaN or Inf.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- pointwise -------------------------------------------------------

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
            return self.push(v, Op::Add(a, b), &[a, b]);
        }
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            let inner = sb.iter().product::<usize>().max(1);
            let mut out = self.value(a).clone();
            let bias = self.value(b).data();
            for chunk in out.data_mut().chunks_mut(inner) {
                for (o, &bb) in chunk.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
            return self.push(out, Op::AddBias(a, b), &[a, b]);
        }
        let target = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch("add", &sa, &sb))?;
        let ea = self.expand(a, &target)?;
        let eb = self.expand(b, &target)?;
        self.add(ea, eb)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            let target = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch("sub", &sa, &sb))?;
            let ea = self.expand(a, &target)?;
            let eb = self.expand(b, &target)?;
            return self.sub(ea, eb);
        }
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with numpy broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            let target = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch("mul", &sa, &sb))?;
            let ea = self.expand(a, &target)?;
            let eb = self.expand(b, &target)?;
            return self.mul(ea, eb);
        }
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let v = self
            .value(a)
            .map(|x| half * x * (T::ONE + (c * (x + k * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Unary map with a caller-supplied derivative rule.
    ///
    /// `backward(x, y, dy)` must return `dx`. Used for test instrumentation
    /// and for one-off nonlinearities.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(T) -> T,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Var> {
        let v = self.value(a).map(forward);
        self.push(
            v,
            Op::Custom {
                a,
                backward: Box::new(backward),
            },
            &[a],
        )
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", &shape, format!("bad axes {axes:?}")));
        }
        let v = permute_tensor(self.value(a), axes);
        self.push(
            v,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose_last2", self.shape(a), "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Broadcasts `a` to `shape` (numpy rules).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa == shape {
            return Ok(a);
        }
        match broadcast_shape(&sa, shape) {
            Some(t) if t == shape => {}
            _ => return Err(mismatch("expand", &sa, shape)),
        }
        let strides = broadcast_strides(&sa, shape);
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; shape.iter().product()];
        for_each_strided(shape, &strides, |lin, off| out[lin] = src[off]);
        let v = Tensor::from_vec(shape, out)?;
        self.push(v, Op::Expand(a), &[a])
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a), &[a])
    }

    /// Sum over the last axis.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(invalid("sum_lastdim", x.shape(), "scalar input"));
        }
        let d = x.last_dim();
        let out: Vec<T> = x
            .data()
            .chunks(d)
            .map(|c| c.iter().fold(T::ZERO, |s, &v| s + v))
            .collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let v = Tensor::from_vec(&shape, out)?;
        self.push(v, Op::SumLast(a), &[a])
    }

    // ---- linear algebra --------------------------------------------------

    /// Batched `a[.., m, k] · b[.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a[.., m, k] · b[.., n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op = if transpose_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch(op, &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| mismatch(op, &sa, &sb))?;
        let nbatch: usize = batch.iter().product();
        let plan = if bb.is_empty() {
            // Weight-style product: fold all batch rows of `a` into one GEMM.
            MatMulPlan {
                m: m * nbatch,
                k,
                n,
                transpose_b,
                offsets: vec![(0, 0)],
            }
        } else {
            let sa_str = broadcast_strides(ba, &batch);
            let sb_str = broadcast_strides(bb, &batch);
            let mut offs_a = vec![0; nbatch];
            let mut offs_b = vec![0; nbatch];
            for_each_strided(&batch, &sa_str, |lin, off| offs_a[lin] = off * m * k);
            for_each_strided(&batch, &sb_str, |lin, off| offs_b[lin] = off * k * n);
            MatMulPlan {
                m,
                k,
                n,
                transpose_b,
                offsets: offs_a.into_iter().zip(offs_b).collect(),
            }
        };
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (pm, pk, pn) = (plan.m, plan.k, plan.n);
            let (rsb, csb) = if transpose_b {
                (1, pk as isize)
            } else {
                (pn as isize, 1)
            };
            for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                // SAFETY: offsets and strides stay within the buffers by construction.
                unsafe {
                    T::gemm(
                        pm,
                        pk,
                        pn,
                        T::ONE,
                        av.as_ptr().add(oa),
                        pk as isize,
                        1,
                        bv.as_ptr().add(ob),
                        rsb,
                        csb,
                        T::ZERO,
                        out.as_mut_ptr().add(i * pm * pn),
                        pn as isize,
                        1,
                    );
                }
            }
        }
        let v = Tensor::from_vec(&out_shape, out)?;
        self.push(v, Op::MatMul { a, b, plan }, &[a, b])
    }

    // ---- normalization ---------------------------------------------------

    /// Per-vector standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| invalid("layer_norm", &sx, "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", &sx, self.shape(gain)));
        }
        let eps = T::of(eps);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let bt = self.value(bias).data();
        let rows = xs.len() / d.max(1);
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::ZERO, |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::ZERO, |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let v = Tensor::from_vec(&sx, out)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        if d == 0 {
            return Err(invalid("softmax_lastdim", x.shape(), "empty last axis"));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(row[0], |acc, &v| acc.max(v));
            let mut s = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::ONE / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Divides each last-axis vector by `max(‖x‖₂, eps)`.
    pub fn l2_normalize_lastdim(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        let eps = T::of(eps);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().fold(T::ZERO, |s, &v| s + v * v).sqrt();
            norms.push(n);
            let inv = T::ONE / n.max(eps);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::L2Normalize { a, norms, eps }, &[a])
    }

    /// `a·b / (‖a‖‖b‖)` per last-axis vector, clamped to `[-1, 1]`.
    pub fn cosine_similarity_lastdim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.is_empty() {
            return Err(mismatch("cosine_similarity_lastdim", &sa, &sb));
        }
        let d = sa[sa.len() - 1];
        let eps = T::of(eps);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let rows = av.len() / d.max(1);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut active = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let mut dot = T::ZERO;
            let mut xx = T::ZERO;
            let mut yy = T::ZERO;
            for j in 0..d {
                dot += x[j] * y[j];
                xx += x[j] * x[j];
                yy += y[j] * y[j];
            }
            let (nx, ny) = (xx.sqrt(), yy.sqrt());
            let c = dot / (nx * ny).max(eps);
            na.push(nx);
            nb.push(ny);
            active.push(c >= -T::ONE && c <= T::ONE);
            out.push(c.max(-T::ONE).min(T::ONE));
        }
        let v = Tensor::from_vec(&sa[..sa.len() - 1], out)?;
        self.push(
            v,
            Op::Cosine {
                a,
                b,
                eps,
                na,
                nb,
                active,
            },
            &[a, b],
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if !ls.is_empty() && ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backprop(i, g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddBias(a, b) => {
                if self.needs(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let inner = bshape.iter().product::<usize>().max(1);
                    let mut gb = vec![T::ZERO; inner];
                    for chunk in g.data().chunks(inner) {
                        for (acc, &v) in gb.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&bshape, gb).unwrap());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Square(a) => {
                let two = T::of(2.0);
                let ga = g
                    .zip_map(self.value(*a), "square", |d, x| two * x * d)
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three_k = T::of(3.0 * GELU_A);
                let ga = g
                    .zip_map(self.value(*a), "gelu", |d, x| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (T::ONE + three_k * x * x);
                        d * (half * (T::ONE + th) + half * x * (T::ONE - th * th) * du)
                    })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Custom { a, backward } => {
                let ga = backward(self.value(*a), y, &g);
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(&s).unwrap());
            }
            Op::Permute { a, axes } => {
                let inv = inverse_axes(axes);
                self.accumulate(grads, *a, permute_tensor(&g, &inv));
            }
            Op::Expand(a) => {
                let sa = self.shape(*a).to_vec();
                let strides = broadcast_strides(&sa, g.shape());
                let mut out = vec![T::ZERO; sa.iter().product()];
                let gd = g.data();
                for_each_strided(g.shape(), &strides, |lin, off| out[off] += gd[lin]);
                self.accumulate(grads, *a, Tensor::from_vec(&sa, out).unwrap());
            }
            Op::SumAll(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let s = g.item() / T::of(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumLast(a) => {
                let sa = self.shape(*a).to_vec();
                let d = *sa.last().unwrap();
                let mut out = Vec::with_capacity(sa.iter().product());
                for &v in g.data() {
                    out.extend(std::iter::repeat_n(v, d));
                }
                self.accumulate(grads, *a, Tensor::from_vec(&sa, out).unwrap());
            }
            Op::MatMul { a, b, plan } => self.backprop_matmul(*a, *b, plan, &g, grads),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                let gd = g.data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![T::ZERO; d];
                    let mut db = vec![T::ZERO; d];
                    for (r, row) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += row[j] * xhat[r * d + j];
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_vec(&[d], dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::from_vec(&[d], db).unwrap());
                }
                if self.needs(*x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dx = vec![T::ZERO; gd.len()];
                    for (r, row) in gd.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let dxh = row[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (row[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
            }
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot = drow
                        .iter()
                        .zip(yrow)
                        .fold(T::ZERO, |s, (&dv, &yv)| s + dv * yv);
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize { a, norms, eps } => {
                let d = y.last_dim();
                let mut dx = g.clone();
                for ((drow, yrow), &n) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(norms)
                {
                    if n > *eps {
                        let dot = drow
                            .iter()
                            .zip(yrow)
                            .fold(T::ZERO, |s, (&dv, &yv)| s + dv * yv);
                        let inv = T::ONE / n;
                        for (dv, &yv) in drow.iter_mut().zip(yrow) {
                            *dv = (*dv - yv * dot) * inv;
                        }
                    } else {
                        let inv = T::ONE / *eps;
                        for dv in drow.iter_mut() {
                            *dv *= inv;
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Cosine {
                a,
                b,
                eps,
                na,
                nb,
                active,
            } => {
                let sa = self.shape(*a).to_vec();
                let d = *sa.last().unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::ZERO; av.len()];
                let mut db = vec![T::ZERO; bv.len()];
                for r in 0..na.len() {
                    if !active[r] {
                        continue;
                    }
                    let gr = g.data()[r];
                    let c = y.data()[r];
                    let (x, z) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let denom = na[r] * nb[r];
                    if denom > *eps {
                        let inv = T::ONE / denom;
                        let ca = c / (na[r] * na[r]);
                        let cb = c / (nb[r] * nb[r]);
                        for j in 0..d {
                            da[r * d + j] = gr * (z[j] * inv - ca * x[j]);
                            db[r * d + j] = gr * (x[j] * inv - cb * z[j]);
                        }
                    } else {
                        let inv = T::ONE / *eps;
                        for j in 0..d {
                            da[r * d + j] = gr * z[j] * inv;
                            db[r * d + j] = gr * x[j] * inv;
                        }
                    }
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, da).unwrap());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::from_vec(&sa, db).unwrap());
                }
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        plan: &MatMulPlan,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let (av, bv, gv) = (self.value(a).data(), self.value(b).data(), g.data());
        // Strides of the logical k×n matrix b along k and along n.
        let (b_sk, b_sn) = if plan.transpose_b {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        if self.needs(a) {
            let mut da = vec![T::ZERO; av.len()];
            for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                // da[m,k] += g[m,n] · bᵀ[n,k]
                // SAFETY: same extents as the forward product.
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        gv.as_ptr().add(i * m * n),
                        n as isize,
                        1,
                        bv.as_ptr().add(ob),
                        b_sn,
                        b_sk,
                        T::ONE,
                        da.as_mut_ptr().add(oa),
                        k as isize,
                        1,
                    );
                }
            }
            self.accumulate(grads, a, Tensor::from_vec(self.shape(a), da).unwrap());
        }
        if self.needs(b) {
            let mut db = vec![T::ZERO; bv.len()];
            for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
                // SAFETY: same extents as the forward product.
                unsafe {
                    if plan.transpose_b {
                        // db[n,k] += gᵀ[n,m] · a[m,k]
                        T::gemm(
                            n,
                            m,
                            k,
                            T::ONE,
                            gv.as_ptr().add(i * m * n),
                            1,
                            n as isize,
                            av.as_ptr().add(oa),
                            k as isize,
                            1,
                            T::ONE,
                            db.as_mut_ptr().add(ob),
                            k as isize,
                            1,
                        );
                    } else {
                        // db[k,n] += aᵀ[k,m] · g[m,n]
                        T::gemm(
                            k,
                            m,
                            n,
                            T::ONE,
                            av.as_ptr().add(oa),
                            1,
                            k as isize,
                            gv.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            T::ONE,
                            db.as_mut_ptr().add(ob),
                            b_sk,
                            1,
                        );
                    }
                }
            }
            self.accumulate(grads, b, Tensor::from_vec(self.shape(b), db).unwrap());
        }
    }
}
