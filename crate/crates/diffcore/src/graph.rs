use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, DiffError, Result};
use crate::kernels::{gemm, upsample_taps, ConvGeom, Out, View};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var },
    Conv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, batch: usize, transposed: bool },
    Upsample { x: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<T> },
    Binary { a: Var, b: Var, kind: Binary },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    SumTo { x: Var },
    Gather { table: Var, ids: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record: forward values plus enough state for one reverse pass.
///
/// Every operation validates shapes and rejects non-finite inputs. A graph is
/// built for a single forward pass and dropped afterwards.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
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

    /// Row-stochastic attention weights `(B, heads, Lq, Lk)` cached by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        for v in inputs {
            if !self.nodes[v.0].value.all_finite() {
                return Err(DiffError::NonFinite { op });
            }
        }
        Ok(())
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf { param: None }, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf { param: None }, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// `a[..., M, K] · b[K, N] → [..., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}: inner axes differ")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::row_major(self.value(a).data(), 0, m, k),
            View::row_major(self.value(b).data(), 0, k, n),
            T::zero(),
            Out::row_major(&mut out, 0, n),
        );
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// 3D cross-correlation. `x: (B, Cin, D, H, W)`, `w: (Cout, Cin, k, k, k)`, `bias: (Cout)`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.check_finite("conv3d", &ins)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(shape_err("conv3d", format!("input {sx:?} and kernel {sw:?} must be 5-D")));
        }
        if sw[1] != sx[1] {
            return Err(shape_err("conv3d", format!("axis 1: input has {} channels, kernel expects {}", sx[1], sw[1])));
        }
        if sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(shape_err("conv3d", format!("kernel axes 2..5 must be cubic, got {sw:?}")));
        }
        let cout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv3d", format!("bias {:?} vs {cout} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom::forward(sx[1], [sx[2], sx[3], sx[4]], sw[2], stride, pad).ok_or_else(|| {
            shape_err("conv3d", format!("axes 2..5 of {sx:?} too small for kernel {} pad {pad}", sw[2]))
        })?;
        let batch = sx[0];
        let (nin, nout, rows) = (geom.in_len(), geom.out_len(), geom.rows());
        let mut out = vec![T::zero(); batch * cout * nout];
        let chunk = geom.planes_per_chunk();
        let mut cols = vec![T::zero(); rows * chunk * geom.plane()];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..batch {
            let xb = &xd[b * sx[1] * nin..(b + 1) * sx[1] * nin];
            let ob = &mut out[b * cout * nout..(b + 1) * cout * nout];
            let mut d0 = 0;
            while d0 < geom.out_dims[0] {
                let d1 = (d0 + chunk).min(geom.out_dims[0]);
                let ncols = (d1 - d0) * geom.plane();
                geom.im2col(xb, d0, d1, &mut cols[..rows * ncols]);
                gemm(
                    T::one(),
                    View::row_major(wd, 0, cout, rows),
                    View::row_major(&cols, 0, rows, ncols),
                    T::zero(),
                    Out { data: ob, off: d0 * geom.plane(), rs: nout, cs: 1 },
                );
                d0 = d1;
            }
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), batch, nout);
        }
        let value = Tensor::new(&[batch, cout, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]], out)?;
        Ok(self.push(value, Op::Conv { x, w, bias, geom, batch, transposed: false }, &ins))
    }

    /// Transposed 3D convolution. `x: (B, Cin, D, H, W)`, `w: (Cin, Cout, k, k, k)`;
    /// output extent per axis is `(n − 1)·stride − 2·pad + k`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.check_finite("conv_transpose3d", &ins)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sw[0] != sx[1] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input {sx:?} and kernel {sw:?}: axis 1 of input must equal axis 0 of a cubic kernel"),
            ));
        }
        let (cin, cout, k) = (sw[0], sw[1], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose3d", format!("bias {:?} vs {cout} channels", self.shape(b))));
            }
        }
        let mut big = [0; 3];
        for a in 0..3 {
            let full = (sx[2 + a] - 1) * stride + k;
            if full < 2 * pad + 1 {
                return Err(shape_err("conv_transpose3d", format!("axis {}: padding {pad} too large", 2 + a)));
            }
            big[a] = full - 2 * pad;
        }
        let geom = ConvGeom::forward(cout, big, k, stride, pad)
            .filter(|g| g.out_dims == [sx[2], sx[3], sx[4]])
            .ok_or_else(|| shape_err("conv_transpose3d", "inconsistent stride/padding geometry"))?;
        let batch = sx[0];
        let (nsmall, nbig, rows) = (geom.out_len(), geom.in_len(), geom.rows());
        let mut out = vec![T::zero(); batch * cout * nbig];
        let chunk = geom.planes_per_chunk();
        let mut cols = vec![T::zero(); rows * chunk * geom.plane()];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for b in 0..batch {
            let xb = &xd[b * cin * nsmall..(b + 1) * cin * nsmall];
            let ob = &mut out[b * cout * nbig..(b + 1) * cout * nbig];
            let mut d0 = 0;
            while d0 < geom.out_dims[0] {
                let d1 = (d0 + chunk).min(geom.out_dims[0]);
                let ncols = (d1 - d0) * geom.plane();
                gemm(
                    T::one(),
                    View::row_major(wd, 0, cin, rows).t(),
                    View { data: xb, off: d0 * geom.plane(), rows: cin, cols: ncols, rs: nsmall, cs: 1 },
                    T::zero(),
                    Out::row_major(&mut cols[..rows * ncols], 0, ncols),
                );
                geom.col2im(&cols[..rows * ncols], d0, d1, ob);
                d0 = d1;
            }
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), batch, nbig);
        }
        let value = Tensor::new(&[batch, cout, big[0], big[1], big[2]], out)?;
        Ok(self.push(value, Op::Conv { x, w, bias, geom, batch, transposed: true }, &ins))
    }

    /// Trilinear ×2 upsampling of the last three axes of a 5-D tensor (half-pixel centers).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.check_finite("upsample", &[x])?;
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err("upsample", format!("expected 5-D input, got {s:?}")));
        }
        let (td, th, tw) = (upsample_taps(s[2]), upsample_taps(s[3]), upsample_taps(s[4]));
        let (n_in, n_out) = (s[2] * s[3] * s[4], 8 * s[2] * s[3] * s[4]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * n_out];
        for bc in 0..s[0] * s[1] {
            let src = &xd[bc * n_in..(bc + 1) * n_in];
            let dst = &mut out[bc * n_out..(bc + 1) * n_out];
            let mut j = 0;
            for &(d0, d1, ld) in &td {
                for &(h0, h1, lh) in &th {
                    for &(w0, w1, lw) in &tw {
                        let mut acc = 0.0;
                        for (d, wd) in [(d0, 1.0 - ld), (d1, ld)] {
                            for (h, wh) in [(h0, 1.0 - lh), (h1, lh)] {
                                for (w, ww) in [(w0, 1.0 - lw), (w1, lw)] {
                                    acc += wd * wh * ww * src[(d * s[3] + h) * s[4] + w].to_f64_lossy();
                                }
                            }
                        }
                        dst[j] = lit(acc);
                        j += 1;
                    }
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]], out)?;
        Ok(self.push(value, Op::Upsample { x }, &[x]))
    }

    /// Per-sample, per-channel normalization over the spatial axes of `(B, C, ...)`,
    /// followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_finite("instance_norm", &[x, gamma, beta])?;
        let s = self.shape(x).to_vec();
        if s.len() < 3 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(shape_err(
                "instance_norm",
                format!("input {s:?}, gamma {:?}, beta {:?}: affine must match axis 1", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (c, n) = (s[1], s[2..].iter().product::<usize>());
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), n);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| g[(i / n) % c] * h + b[(i / n) % c]).collect();
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Normalization over the last axis with an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("last axis {d} vs gamma {:?}", self.shape(gamma))));
        }
        let (xhat, inv_std) = normalize_rows(self.value(x).data(), d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| g[i % d] * h + b[i % d]).collect();
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.check_finite("leaky_relu", &[x])?;
        let slope = lit::<T>(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        Ok(self.push(value, Op::LeakyRelu { x, slope }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sigmoid", &[x])?;
        let value = self.value(x).map(sigmoid);
        Ok(self.push(value, Op::Sigmoid { x }, &[x]))
    }

    /// `ln(1 + eˣ)` in overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softplus", &[x])?;
        let value = self.value(x).map(softplus);
        Ok(self.push(value, Op::Softplus { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_finite("softmax", &[x])?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = outer_inner(&s, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).fold(T::neg_infinity(), |m, j| m.max(out[idx(j)]));
                let mut z = T::zero();
                for j in 0..n {
                    let e = (out[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// `x − logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", &[x])?;
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("log_softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::LogSoftmax { x }, &[x]))
    }

    /// Multi-head scaled dot-product attention on `(B, L, D)` tensors.
    ///
    /// `q: (B, Lq, Dk)`, `k: (B, Lk, Dk)`, `v: (B, Lk, Dv)`; the head count must
    /// divide `Dk` and `Dv`. With `causal`, query `i` only sees keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        self.check_finite("attention", &[q, k, v])?;
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?} must be 3-D")));
        }
        if sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?} disagree")));
        }
        if heads == 0 || sq[2] % heads != 0 || sv[2] % heads != 0 {
            return Err(shape_err("attention", format!("{heads} heads do not divide widths {} / {}", sq[2], sv[2])));
        }
        if causal && sq[1] != sk[1] {
            return Err(shape_err("attention", "causal attention needs equal query/key lengths"));
        }
        let (b, lq, lk, dk, dv) = (sq[0], sq[1], sk[1], sq[2], sv[2]);
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = lit::<T>(1.0 / (hk as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![T::zero(); b * heads * lq * lk];
        let mut out = vec![T::zero(); b * lq * dv];
        for bi in 0..b {
            for h in 0..heads {
                let w = &mut weights[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                gemm(
                    scale,
                    View { data: qd, off: bi * lq * dk + h * hk, rows: lq, cols: hk, rs: dk, cs: 1 },
                    View { data: kd, off: bi * lk * dk + h * hk, rows: lk, cols: hk, rs: dk, cs: 1 }.t(),
                    T::zero(),
                    Out::row_major(w, 0, lk),
                );
                for i in 0..lq {
                    let row = &mut w[i * lk..(i + 1) * lk];
                    let visible = if causal { i + 1 } else { lk };
                    softmax_in_place(&mut row[..visible]);
                    row[visible..].iter_mut().for_each(|x| *x = T::zero());
                }
                gemm(
                    T::one(),
                    View::row_major(w, 0, lq, lk),
                    View { data: vd, off: bi * lk * dv + h * hv, rows: lk, cols: hv, rs: dv, cs: 1 },
                    T::zero(),
                    Out { data: &mut out, off: bi * lq * dv + h * hv, rs: dv, cs: 1 },
                );
            }
        }
        let value = Tensor::new(&[b, lq, dv], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, weights }, &[q, k, v]))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, op: &'static str) -> Result<Var> {
        self.check_finite(op, &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, format!("{sb:?} is not a trailing sub-shape of {sa:?}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let nb = bd.len();
        let out: Vec<T> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(&self.shape(a).to_vec(), out)?;
        if kind == Binary::Div && !value.all_finite() {
            return Err(DiffError::NonFinite { op });
        }
        Ok(self.push(value, Op::Binary { a, b, kind }, &[a, b]))
    }

    /// Elementwise sum; `b` broadcasts when its shape is a trailing sub-shape of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[x])?;
        let c = lit::<T>(c);
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::Scale { x, c }, &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_finite("add_scalar", &[x])?;
        let c = lit::<T>(c);
        let value = self.value(x).map(|v| v + c);
        Ok(self.push(value, Op::AddScalar { x }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check_finite("concat", xs)?;
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} differ off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_finite("slice", &[x])?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = outer_inner(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Splits `axis` into consecutive parts of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &n in sizes {
            parts.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        if self.shape(x).get(axis) != Some(&start) {
            return Err(shape_err("split", format!("sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x))));
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_finite("reshape", &[x])?;
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check_finite("permute", &[x])?;
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let value = permute_tensor(self.value(x), perm);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Sums every axis from `keep` on; the result has shape `shape[..keep]`.
    pub fn sum_to(&mut self, x: Var, keep: usize) -> Result<Var> {
        self.check_finite("sum", &[x])?;
        let s = self.shape(x).to_vec();
        if keep > s.len() {
            return Err(shape_err("sum", format!("cannot keep {keep} axes of {s:?}")));
        }
        let inner: usize = s[keep..].iter().product();
        let out: Vec<T> = self.value(x).data().chunks(inner.max(1)).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::new(&s[..keep], out)?;
        Ok(self.push(value, Op::SumTo { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.sum_to(x, 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Rows `ids` of a `(V, D)` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_finite("gather", &[table])?;
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather", format!("table must be 2-D, got {s:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err("gather", format!("row {bad} out of range for {} rows", s[0])));
        }
        let d = s[1];
        let td = self.value(table).data();
        let out: Vec<T> = ids.iter().flat_map(|&i| td[i * d..(i + 1) * d].iter().copied()).collect();
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(DiffError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = Gradients { params: BTreeMap::new(), inputs: BTreeMap::new() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Leaf { param } = &node.op {
                match param {
                    Some(id) => out.params.insert(*id, gy),
                    None => out.inputs.insert(i, gy),
                };
                continue;
            }
            self.backprop(node, &gy, &mut grads)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        View::row_major(g, 0, m, n),
                        View::row_major(bv.data(), 0, k, n).t(),
                        T::zero(),
                        Out::row_major(&mut da, 0, k),
                    );
                    accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        View::row_major(av.data(), 0, m, k).t(),
                        View::row_major(g, 0, m, n),
                        T::zero(),
                        Out::row_major(&mut db, 0, n),
                    );
                    accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Conv { x, w, bias, geom, batch, transposed } => {
                self.conv_backward(*x, *w, *bias, geom, *batch, *transposed, g, grads)?;
            }
            Op::Upsample { x } => {
                let s = self.shape(*x).to_vec();
                let (td, th, tw) = (upsample_taps(s[2]), upsample_taps(s[3]), upsample_taps(s[4]));
                let (n_in, n_out) = (s[2] * s[3] * s[4], 8 * s[2] * s[3] * s[4]);
                let mut dx = vec![0.0f64; s[0] * s[1] * n_in];
                for bc in 0..s[0] * s[1] {
                    let src = &g[bc * n_out..(bc + 1) * n_out];
                    let dst = &mut dx[bc * n_in..(bc + 1) * n_in];
                    let mut j = 0;
                    for &(d0, d1, ld) in &td {
                        for &(h0, h1, lh) in &th {
                            for &(w0, w1, lw) in &tw {
                                let gv = src[j].to_f64_lossy();
                                for (d, wd) in [(d0, 1.0 - ld), (d1, ld)] {
                                    for (h, wh) in [(h0, 1.0 - lh), (h1, lh)] {
                                        for (w, ww) in [(w0, 1.0 - lw), (w1, lw)] {
                                            dst[(d * s[3] + h) * s[4] + w] += wd * wh * ww * gv;
                                        }
                                    }
                                }
                                j += 1;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(&s, dx.into_iter().map(lit).collect())?);
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let c = s[1];
                let n: usize = s[2..].iter().product();
                self.norm_backward(*x, *gamma, *beta, xhat, inv_std, g, n, |row| row % c, grads)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                self.norm_backward_last(*x, *gamma, *beta, xhat, inv_std, g, d, grads)?;
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(&gy, &v)| if v > T::zero() { gy } else { gy * *slope }).collect();
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gy, &p)| gy * p * (T::one() - p)).collect();
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(&gy, &v)| gy * sigmoid(v)).collect();
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Softmax { x, axis } => {
                let s = self.shape(*x);
                let (outer, n, inner) = outer_inner(s, *axis);
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| y[idx(j)] * g[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::LogSoftmax { x } => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Attention { q, k, v, heads, weights } => {
                self.attention_backward(*q, *k, *v, *heads, weights, g, grads)?;
            }
            Op::Binary { a, b, kind } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let nb = bd.len();
                if self.wants(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gy)| match kind {
                            Binary::Add | Binary::Sub => gy,
                            Binary::Mul => gy * bd[i % nb],
                            Binary::Div => gy / bd[i % nb],
                        })
                        .collect();
                    accumulate(grads, *a, Tensor::new(self.shape(*a), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); nb];
                    for (i, &gy) in g.iter().enumerate() {
                        let j = i % nb;
                        db[j] += match kind {
                            Binary::Add => gy,
                            Binary::Sub => -gy,
                            Binary::Mul => gy * ad[i],
                            Binary::Div => -gy * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    accumulate(grads, *b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, gy.map(|v| v * *c));
            }
            Op::AddScalar { x } => {
                accumulate(grads, *x, gy.clone());
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + n * inner]);
                        }
                        accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = outer_inner(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, gy.clone().reshape(self.shape(*x))?);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, permute_tensor(gy, &inv));
            }
            Op::SumTo { x } => {
                let s = self.shape(*x);
                let inner = (self.value(*x).len() / g.len().max(1)).max(1);
                let dx = (0..self.value(*x).len()).map(|i| g[i / inner]).collect();
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Gather { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![T::zero(); s[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(s, dt)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        batch: usize,
        transposed: bool,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let rows = geom.rows();
        let chunk = geom.planes_per_chunk();
        let mut cols = vec![T::zero(); rows * chunk * geom.plane()];
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut dx = if want_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![T::zero(); wd.len()] } else { Vec::new() };
        // "small" side: conv output / transposed-conv input; "big" side: the other.
        let (nsmall, nbig) = (geom.out_len(), geom.in_len());
        let wshape = self.shape(w);
        for b in 0..batch {
            if !transposed {
                let cout = wshape[0];
                let xb = &xd[b * geom.channels * nbig..(b + 1) * geom.channels * nbig];
                let gb = &g[b * cout * nsmall..(b + 1) * cout * nsmall];
                let mut d0 = 0;
                while d0 < geom.out_dims[0] {
                    let d1 = (d0 + chunk).min(geom.out_dims[0]);
                    let ncols = (d1 - d0) * geom.plane();
                    let gview = View { data: gb, off: d0 * geom.plane(), rows: cout, cols: ncols, rs: nsmall, cs: 1 };
                    if want_w {
                        geom.im2col(xb, d0, d1, &mut cols[..rows * ncols]);
                        gemm(
                            T::one(),
                            gview,
                            View::row_major(&cols, 0, rows, ncols).t(),
                            T::one(),
                            Out::row_major(&mut dw, 0, rows),
                        );
                    }
                    if want_x {
                        gemm(
                            T::one(),
                            View::row_major(wd, 0, cout, rows).t(),
                            gview,
                            T::zero(),
                            Out::row_major(&mut cols[..rows * ncols], 0, ncols),
                        );
                        let dxb = &mut dx[b * geom.channels * nbig..(b + 1) * geom.channels * nbig];
                        geom.col2im(&cols[..rows * ncols], d0, d1, dxb);
                    }
                    d0 = d1;
                }
            } else {
                let cin = wshape[0];
                let cout = geom.channels;
                let xb = &xd[b * cin * nsmall..(b + 1) * cin * nsmall];
                let gb = &g[b * cout * nbig..(b + 1) * cout * nbig];
                let mut d0 = 0;
                while d0 < geom.out_dims[0] {
                    let d1 = (d0 + chunk).min(geom.out_dims[0]);
                    let ncols = (d1 - d0) * geom.plane();
                    geom.im2col(gb, d0, d1, &mut cols[..rows * ncols]);
                    let cview = View::row_major(&cols, 0, rows, ncols);
                    if want_x {
                        gemm(
                            T::one(),
                            View::row_major(wd, 0, cin, rows),
                            cview,
                            T::zero(),
                            Out { data: &mut dx, off: b * cin * nsmall + d0 * geom.plane(), rs: nsmall, cs: 1 },
                        );
                    }
                    if want_w {
                        gemm(
                            T::one(),
                            View { data: xb, off: d0 * geom.plane(), rows: cin, cols: ncols, rs: nsmall, cs: 1 },
                            cview.t(),
                            T::one(),
                            Out::row_major(&mut dw, 0, rows),
                        );
                    }
                    d0 = d1;
                }
            }
        }
        if want_x {
            accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
        }
        if want_w {
            accumulate(grads, w, Tensor::new(wshape, dw)?);
        }
        if let Some(bv) = bias.filter(|b| self.wants(*b)) {
            let cout = self.shape(bv)[0];
            let n = g.len() / (batch * cout).max(1);
            let mut db = vec![T::zero(); cout];
            for (i, chunk) in g.chunks(n.max(1)).enumerate() {
                db[i % cout] += chunk.iter().copied().sum();
            }
            accumulate(grads, bv, Tensor::new(&[cout], db)?);
        }
        Ok(())
    }

    /// Shared reverse pass for normalizations whose rows are contiguous runs of `n`.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        n: usize,
        channel_of_row: impl Fn(usize) -> usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gam = self.value(gamma).data();
        let c = gam.len();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xhat.len()];
        let nn = lit::<T>(n as f64);
        for row in 0..xhat.len() / n {
            let ch = channel_of_row(row);
            let r = row * n..(row + 1) * n;
            let (gr, hr) = (&g[r.clone()], &xhat[r.clone()]);
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for (&gy, &h) in gr.iter().zip(hr) {
                dgamma[ch] += gy * h;
                dbeta[ch] += gy;
                let d = gy * gam[ch];
                sum_d += d;
                sum_dh += d * h;
            }
            let k = inv_std[row] / nn;
            for ((o, &gy), &h) in dx[r].iter_mut().zip(gr).zip(hr) {
                *o = k * (nn * gy * gam[ch] - sum_d - h * sum_dh);
            }
        }
        if self.wants(x) {
            accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
        }
        if self.wants(gamma) {
            accumulate(grads, gamma, Tensor::new(&[c], dgamma)?);
        }
        if self.wants(beta) {
            accumulate(grads, beta, Tensor::new(&[c], dbeta)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward_last(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        d: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gam = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut dx = vec![T::zero(); xhat.len()];
        let nn = lit::<T>(d as f64);
        for row in 0..xhat.len() / d {
            let r = row * d..(row + 1) * d;
            let (gr, hr) = (&g[r.clone()], &xhat[r.clone()]);
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for j in 0..d {
                dgamma[j] += gr[j] * hr[j];
                dbeta[j] += gr[j];
                let dv = gr[j] * gam[j];
                sum_d += dv;
                sum_dh += dv * hr[j];
            }
            let k = inv_std[row] / nn;
            for j in 0..d {
                dx[row * d + j] = k * (nn * gr[j] * gam[j] - sum_d - hr[j] * sum_dh);
            }
        }
        if self.wants(x) {
            accumulate(grads, x, Tensor::new(self.shape(x), dx)?);
        }
        if self.wants(gamma) {
            accumulate(grads, gamma, Tensor::new(&[d], dgamma)?);
        }
        if self.wants(beta) {
            accumulate(grads, beta, Tensor::new(&[d], dbeta)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        let (b, lq, lk, dk, dv) = (sq[0], sq[1], sk[1], sq[2], sv[2]);
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = lit::<T>(1.0 / (hk as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk_ = vec![T::zero(); kd.len()];
        let mut dv_ = vec![T::zero(); vd.len()];
        let mut ds = vec![T::zero(); lq * lk];
        let need_scores = self.wants(q) || self.wants(k);
        for bi in 0..b {
            for h in 0..heads {
                let p = &weights[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                let gview = View { data: g, off: bi * lq * dv + h * hv, rows: lq, cols: hv, rs: dv, cs: 1 };
                let vview = View { data: vd, off: bi * lk * dv + h * hv, rows: lk, cols: hv, rs: dv, cs: 1 };
                if self.wants(v) {
                    gemm(
                        T::one(),
                        View::row_major(p, 0, lq, lk).t(),
                        gview,
                        T::zero(),
                        Out { data: &mut dv_, off: bi * lk * dv + h * hv, rs: dv, cs: 1 },
                    );
                }
                if !need_scores {
                    continue;
                }
                gemm(T::one(), gview, vview.t(), T::zero(), Out::row_major(&mut ds, 0, lk));
                for i in 0..lq {
                    let (pr, dr) = (&p[i * lk..(i + 1) * lk], &mut ds[i * lk..(i + 1) * lk]);
                    let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                let qview = View { data: qd, off: bi * lq * dk + h * hk, rows: lq, cols: hk, rs: dk, cs: 1 };
                let kview = View { data: kd, off: bi * lk * dk + h * hk, rows: lk, cols: hk, rs: dk, cs: 1 };
                if self.wants(q) {
                    gemm(
                        scale,
                        View::row_major(&ds, 0, lq, lk),
                        kview,
                        T::zero(),
                        Out { data: &mut dq, off: bi * lq * dk + h * hk, rs: dk, cs: 1 },
                    );
                }
                if self.wants(k) {
                    gemm(
                        scale,
                        View::row_major(&ds, 0, lq, lk).t(),
                        qview,
                        T::zero(),
                        Out { data: &mut dk_, off: bi * lk * dk + h * hk, rs: dk, cs: 1 },
                    );
                }
            }
        }
        if self.wants(q) {
            accumulate(grads, q, Tensor::new(sq, dq)?);
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::new(sk, dk_)?);
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::new(sv, dv_)?);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], batch: usize, n: usize) {
    let c = bias.len();
    for b in 0..batch {
        for (ch, &bv) in bias.iter().enumerate() {
            let base = (b * c + ch) * n;
            out[base..base + n].iter_mut().for_each(|v| *v += bv);
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Standardizes contiguous rows of length `n`; returns `(xhat, 1/σ per row)`.
fn normalize_rows<T: Scalar>(x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let nn = lit::<T>(n as f64);
    let eps = lit::<T>(NORM_EPS);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / n.max(1));
    for row in x.chunks(n) {
        let mean = row.iter().copied().sum::<T>() / nn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
        let is = T::one() / (var + eps).sqrt();
        inv.push(is);
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
    }
    (xhat, inv)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let nd = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1; nd];
    for a in (0..nd.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * s[a + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..xd.len() {
        out.push(xd[off]);
        for a in (0..nd).rev() {
            idx[a] += 1;
            off += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            off -= strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}
