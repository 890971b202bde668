//! Reverse-mode differentiation over a recorded list of primitives.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order; `backward` walks it in reverse exactly once.

use super::kernels::{self, gemm, gemm_view, split_axis, Broadcast, View};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Largest magnitude fed to `atanh`; inputs in `(ATANH_LIMIT, 1)` are clamped.
pub const ATANH_LIMIT: f64 = 1.0 - 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, tb: bool },
    Linear { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, src: Var, idx: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Atanh(Var),
    Cosh(Var),
    L2Norm(Var),
    Conv1d { x: Var, w: Var, b: Var, r: usize, patches: Vec<f64> },
    Mean { x: Var, axis: usize },
    Sum(Var),
    ExpMapOrigin { x: Var, kappa: f64 },
    BallProject { x: Var, kappa: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single writer; build one per sample and drop it
/// after `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    atanh_clamps: usize,
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

    /// Number of `atanh` inputs clamped to `±ATANH_LIMIT` so far.
    pub fn atanh_clamps(&self) -> usize {
        self.atanh_clamps
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to leaf `v`, if
    /// any flowed there. Intermediate gradients are not retained.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Backward(format!(
                "cannot record `{name}` after backward has run"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---------------------------------------------------------------- forward

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let Some(bc) = Broadcast::new(va.shape(), vb.shape()) else {
                return shape_err(name, format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()));
            };
            let mut data = vec![0.0; bc.out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            bc.for_each(|o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::new(bc.out_shape.clone(), data)?
        };
        if kind == BinaryKind::Div && vb.data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.push(name, out, Op::Binary(kind, a, b), &[a, b])
    }

    /// Elementwise sum with same-rank broadcasting over extent-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Alias of [`Graph::add`] for call sites that rely on broadcasting.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + s).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let name = if tb { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(name, format!("operands must be 2-D, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(name, format!("inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), tb, 0.0, &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        self.push(name, out, Op::MatMul { a, b, tb }, &[a, b])
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for 2-D operands, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]` and `b` holding `n` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || self.value(b).numel() != sw[1] {
            return shape_err(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {:?}", self.shape(b)),
            );
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Multi-head scaled dot-product attention over `[n, C]` inputs whose
    /// columns split into `heads` contiguous groups. Head `h` computes
    /// `softmax(Q_h K_hᵀ / √d) V_h`; the heads are written side by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return shape_err(
                "attention",
                format!("q {s:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            );
        }
        let (n, c) = (s[0], s[1]);
        if heads == 0 || c % heads != 0 || n == 0 {
            return shape_err("attention", format!("{heads} heads over {c} channels and {n} tokens"));
        }
        let dh = c / heads;
        let alpha = 1.0 / (dh as f64).sqrt();
        let (dq, dk, dv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * c];
        for (h, p) in probs.chunks_mut(n * n).enumerate() {
            let col = View { offset: h * dh, rs: c, cs: 1 };
            gemm_view(n, dh, n, alpha, dq, col, dk, col.t(), 0.0, p, View::dense(n));
            softmax_rows(p, n);
            gemm_view(n, n, dh, 1.0, p, View::dense(n), dv, col, 0.0, &mut out, col);
        }
        let out = Tensor::new(vec![n, c], out)?;
        self.push("attention", out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {:?}", va.shape()));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("narrow", format!("range {start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * dim + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Rows `idx` of a 2-D tensor, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("gather_rows", format!("expected 2-D, got {s:?}"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return shape_err("gather_rows", format!("row {bad} out of range for {} rows", s[0]));
        }
        let c = s[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (sb, ss) = (self.shape(base).to_vec(), self.shape(src).to_vec());
        if sb.len() != 2 || ss.len() != 2 || sb[1] != ss[1] || ss[0] != idx.len() {
            return shape_err(
                "scatter_rows",
                format!("base {sb:?}, src {ss:?}, {} indices", idx.len()),
            );
        }
        let mut seen = vec![false; sb[0]];
        for &i in idx {
            if i >= sb[0] {
                return shape_err("scatter_rows", format!("row {i} out of range for {} rows", sb[0]));
            }
            if std::mem::replace(&mut seen[i], true) {
                return shape_err("scatter_rows", format!("duplicate row {i}"));
            }
        }
        let c = sb[1];
        let mut data = self.value(base).data().to_vec();
        let sdata = self.value(src).data();
        for (r, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&sdata[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(sb, data)?;
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows { base, src, idx: idx.to_vec() },
            &[base, src],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if c == 0 {
            return shape_err("softmax", "empty last axis");
        }
        let mut data = vx.data().to_vec();
        softmax_rows(&mut data, c);
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both of length equal to the last extent).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer_norm", format!("affine parameters must have {c} entries"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.numel() / c.max(1);
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; vx.numel()];
        for (r, row) in vx.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                data[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn cosh(&mut self, x: Var) -> Result<Var> {
        self.unary("cosh", x, f64::cosh, Op::Cosh(x))
    }

    /// Inverse hyperbolic tangent. `|x| >= 1` is a domain error; values
    /// within `1e-12` of the boundary are clamped and counted.
    pub fn atanh(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if let Some(bad) = vx.data().iter().find(|v| v.abs() >= 1.0) {
            return Err(Error::Domain {
                op: "atanh",
                detail: format!("input {bad} outside (-1, 1)"),
            });
        }
        let clamps = vx.data().iter().filter(|v| v.abs() > ATANH_LIMIT).count();
        self.atanh_clamps += clamps;
        self.unary(
            "atanh",
            x,
            |v| v.clamp(-ATANH_LIMIT, ATANH_LIMIT).atanh(),
            Op::Atanh(x),
        )
    }

    /// Euclidean norm over the last axis; the axis is kept with extent 1.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let data: Vec<f64> = vx
            .data()
            .chunks(c.max(1))
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = vx.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let out = Tensor::new(shape, data)?;
        self.push("l2_norm", out, Op::L2Norm(x), &[x])
    }

    /// Strided temporal convolution with kernel size = stride = `r`.
    ///
    /// `x`: `[L, J, Cin]`, `w`: `[Cout, r·Cin]` (tap-major), `b`: `[Cout]`.
    /// Output: `[L/r, J, Cout]`, each joint convolved independently.
    pub fn conv1d_strided(&mut self, x: Var, w: Var, b: Var, r: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 {
            return shape_err("conv1d_strided", format!("x {sx:?}, w {sw:?}"));
        }
        let (l, j, cin) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        if r == 0 || l % r != 0 {
            return shape_err("conv1d_strided", format!("stride {r} does not divide {l} frames"));
        }
        if sw[1] != r * cin || self.value(b).numel() != cout {
            return shape_err(
                "conv1d_strided",
                format!("kernel {sw:?} / bias {:?} inconsistent with r={r}, Cin={cin}", self.shape(b)),
            );
        }
        let lo = l / r;
        let k = r * cin;
        let xd = self.value(x).data();
        let mut patches = vec![0.0; lo * j * k];
        for f in 0..lo {
            for jj in 0..j {
                let row = (f * j + jj) * k;
                for t in 0..r {
                    let src = ((f * r + t) * j + jj) * cin;
                    patches[row + t * cin..row + (t + 1) * cin].copy_from_slice(&xd[src..src + cin]);
                }
            }
        }
        let mut out = vec![0.0; lo * j * cout];
        let bd = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bd);
        }
        gemm(lo * j, k, cout, &patches, false, self.value(w).data(), true, 1.0, &mut out);
        let out = Tensor::new(vec![lo, j, cout], out)?;
        self.push("conv1d_strided", out, Op::Conv1d { x, w, b, r, patches }, &[x, w, b])
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("mean_axis", format!("axis {axis} invalid or empty for {s:?}"));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let off = (o * dim + d) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[off + i];
                }
            }
        }
        let inv = 1.0 / dim as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = s;
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, data)?;
        self.push("mean_axis", out, Op::Mean { x, axis }, &[x])
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Row-wise exponential map at the origin of the ball with curvature
    /// `-kappa`: `tanh(√κ‖x‖)·x/(√κ‖x‖)`, zero for `‖x‖ < 1e-12`.
    pub fn exp_map_origin(&mut self, x: Var, kappa: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let sk = kappa.sqrt();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if n < 1e-12 { 0.0 } else { kernels::tanh_ratio(sk * n) };
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("exp_map_origin", out, Op::ExpMapOrigin { x, kappa }, &[x])
    }

    /// Row-wise `h / (1 + ‖h‖²/κ)`.
    pub fn ball_project(&mut self, x: Var, kappa: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let n2 = row.iter().map(|v| v * v).sum::<f64>();
            let q = 1.0 / (1.0 + n2 / kappa);
            row.iter_mut().for_each(|v| *v *= q);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("ball_project", out, Op::BallProject { x, kappa }, &[x])
    }

    // --------------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` for every node that requires
    /// them. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.propagate(id, &g, &mut grads)?;
            // intermediate gradients are consumed here; only leaves keep theirs
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() == vb.shape() {
                    let (da, db) = (va.data(), vb.data());
                    self.accumulate(grads, *a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gd[i],
                                BinaryKind::Mul => gd[i] * db[i],
                                BinaryKind::Div => gd[i] / db[i],
                            };
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += match kind {
                                BinaryKind::Add => gd[i],
                                BinaryKind::Sub => -gd[i],
                                BinaryKind::Mul => gd[i] * da[i],
                                BinaryKind::Div => -gd[i] * da[i] / (db[i] * db[i]),
                            };
                        }
                    });
                } else {
                    let bc = Broadcast::new(va.shape(), vb.shape()).expect("checked in forward");
                    let (da, db) = (va.data(), vb.data());
                    self.accumulate(grads, *a, |ga| {
                        bc.for_each(|o, ia, ib| {
                            ga[ia] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gd[o],
                                BinaryKind::Mul => gd[o] * db[ib],
                                BinaryKind::Div => gd[o] / db[ib],
                            };
                        })
                    });
                    self.accumulate(grads, *b, |gb| {
                        bc.for_each(|o, ia, ib| {
                            gb[ib] += match kind {
                                BinaryKind::Add => gd[o],
                                BinaryKind::Sub => -gd[o],
                                BinaryKind::Mul => gd[o] * da[ia],
                                BinaryKind::Div => -gd[o] * da[ia] / (db[ib] * db[ib]),
                            };
                        })
                    });
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y * s)
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
            }),
            Op::MatMul { a, b, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *tb { sb[0] } else { sb[1] };
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · B_opᵀ
                self.accumulate(grads, *a, |ga| gemm(m, n, k, gd, false, db, !*tb, 1.0, ga));
                if *tb {
                    // B is n×k: dB = Gᵀ · A
                    self.accumulate(grads, *b, |gb| gemm(n, m, k, gd, true, da, false, 1.0, gb));
                } else {
                    // B is k×n: dB = Aᵀ · G
                    self.accumulate(grads, *b, |gb| gemm(k, m, n, da, true, gd, false, 1.0, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                let (dx, dw) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| gemm(m, n, k, gd, false, dw, true, 1.0, gx));
                self.accumulate(grads, *w, |gw| gemm(k, m, n, dx, true, gd, false, 1.0, gw));
                self.accumulate(grads, *b, |gb| {
                    for row in gd.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (n, c) = (s[0], s[1]);
                let dh = c / heads;
                let alpha = 1.0 / (dh as f64).sqrt();
                let (dq, dk, dv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let need = [q, k, v].map(|t| self.nodes[t.0].requires_grad);
                let mut gq = vec![0.0; if need[0] { n * c } else { 0 }];
                let mut gk = vec![0.0; if need[1] { n * c } else { 0 }];
                let mut gv = vec![0.0; if need[2] { n * c } else { 0 }];
                let mut ds = vec![0.0; n * n];
                for (h, p) in probs.chunks(n * n).enumerate() {
                    let col = View { offset: h * dh, rs: c, cs: 1 };
                    let sq = View::dense(n);
                    if need[2] {
                        gemm_view(n, n, dh, 1.0, p, sq.t(), gd, col, 1.0, &mut gv, col);
                    }
                    if !(need[0] || need[1]) {
                        continue;
                    }
                    // dP = dO_h V_hᵀ, then the softmax Jacobian row by row
                    gemm_view(n, dh, n, 1.0, gd, col, dv, col.t(), 0.0, &mut ds, sq);
                    for (dr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        dr.iter_mut().zip(pr).for_each(|(d, p)| *d = p * (*d - dot));
                    }
                    if need[0] {
                        gemm_view(n, n, dh, alpha, &ds, sq, dk, col, 1.0, &mut gq, col);
                    }
                    if need[1] {
                        gemm_view(n, n, dh, alpha, &ds, sq.t(), dq, col, 1.0, &mut gk, col);
                    }
                }
                for (t, gt) in [(q, gq), (k, gk), (v, gv)] {
                    if !gt.is_empty() {
                        self.accumulate(grads, *t, |acc| acc.iter_mut().zip(&gt).for_each(|(a, b)| *a += b));
                    }
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
            }),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = g.shape()[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gd[src..src + len * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&gd[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ScatterRows { base, src, idx } => {
                let c = g.last_dim();
                self.accumulate(grads, *base, |gb| {
                    // rows overwritten by `src` receive no gradient
                    let mut keep = vec![true; gb.len() / c.max(1)];
                    for &i in idx {
                        keep[i] = false;
                    }
                    for (row, k) in keep.iter().enumerate() {
                        if *k {
                            let s = row * c;
                            gb[s..s + c]
                                .iter_mut()
                                .zip(&gd[s..s + c])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                });
                self.accumulate(grads, *src, |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        gs[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&gd[i * c..(i + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.last_dim();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gd[base + j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[base + j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            gx[base + j] += rs / cf * (cf * dxhat[j] - s1 - xhat[base + j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (r, row) in gd.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += row[j] * xhat[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for row in gd.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Atanh(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let v = xd[i].clamp(-ATANH_LIMIT, ATANH_LIMIT);
                        gx[i] += gd[i] / (1.0 - v * v);
                    }
                });
            }
            Op::Cosh(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * xd[i].sinh();
                    }
                });
            }
            Op::L2Norm(x) => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let norms = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for (r, row) in xv.data().chunks(c).enumerate() {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let s = gd[r] / norms[r];
                        for j in 0..c {
                            gx[r * c + j] += s * row[j];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, r, patches } => {
                let sx = self.shape(*x);
                let (j, cin) = (sx[1], sx[2]);
                let cout = self.shape(*w)[0];
                let k = r * cin;
                let rows = patches.len() / k;
                self.accumulate(grads, *b, |gb| {
                    for row in gd.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
                // dW = Gᵀ · P  (cout × k)
                self.accumulate(grads, *w, |gw| gemm(cout, rows, k, gd, true, patches, false, 1.0, gw));
                if self.nodes[x.0].requires_grad {
                    let mut dp = vec![0.0; rows * k];
                    gemm(rows, cout, k, gd, false, self.value(*w).data(), false, 0.0, &mut dp);
                    self.accumulate(grads, *x, |gx| {
                        for row in 0..rows {
                            let (f, jj) = (row / j, row % j);
                            for t in 0..*r {
                                let dst = ((f * r + t) * j + jj) * cin;
                                for ch in 0..cin {
                                    gx[dst + ch] += dp[row * k + t * cin + ch];
                                }
                            }
                        }
                    });
                }
            }
            Op::Mean { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let inv = 1.0 / dim as f64;
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for d in 0..dim {
                            let off = (o * dim + d) * inner;
                            for i in 0..inner {
                                gx[off + i] += gd[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
            Op::ExpMapOrigin { x, kappa } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let sk = kappa.sqrt();
                self.accumulate(grads, *x, |gx| {
                    for (r, row) in xv.data().chunks(c).enumerate() {
                        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let a = sk * n;
                        let s = kernels::tanh_ratio(a);
                        // d s(√κ n)/dn divided by n
                        let slope = kappa * kernels::tanh_ratio_slope(a);
                        let gr = &gd[r * c..(r + 1) * c];
                        let xg: f64 = row.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            gx[r * c + j] += s * gr[j] + slope * xg * row[j];
                        }
                    }
                });
            }
            Op::BallProject { x, kappa } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (r, row) in xv.data().chunks(c).enumerate() {
                        let n2 = row.iter().map(|v| v * v).sum::<f64>();
                        let q = 1.0 / (1.0 + n2 / kappa);
                        let gr = &gd[r * c..(r + 1) * c];
                        let hg: f64 = row.iter().zip(gr).map(|(p, v)| p * v).sum();
                        let coef = 2.0 * q * q / kappa * hg;
                        for j in 0..c {
                            gx[r * c + j] += q * gr[j] - coef * row[j];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// In-place softmax of each length-`c` row.
fn softmax_rows(data: &mut [f64], c: usize) {
    for row in data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

