use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::{gemm, sc, Scalar, Tensor, TensorError, TensorResult};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        a: Var,
        rows: Vec<usize>,
    },
    Upsample2x(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Resample {
        a: Var,
        taps: Vec<[(u32, T); 4]>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    SigmoidFocal {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        gamma: T,
        alpha: T,
    },
    Linearized {
        input: Var,
        jacobian: Vec<(u32, u32, T)>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward pass is a single reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(mismatch(op, a, b));
        };
    }
    Ok(out)
}

/// Index of the broadcast operand element for every output element.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let src_len: usize = src.iter().product();
    if src == out {
        return (0..total).collect();
    }
    if src_len == 1 {
        return vec![0; total];
    }
    // trailing-suffix broadcast, e.g. [C] onto [N, C]
    if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
        return (0..total).map(|i| i % src_len).collect();
    }
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + n - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut idx = vec![0usize; n];
    let mut res = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        res.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k: T = sc(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c: T = sc(0.044_715);
    let half: T = sc(0.5);
    let one = T::one();
    let inner = k * (x + c * x * x * x);
    // tanh through exp, clamped where exp would overflow
    let t = if inner.abs() > sc(15.0) {
        inner.signum()
    } else {
        let e = (inner + inner).exp();
        (e - one) / (e + one)
    };
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * k * (one + sc::<T>(3.0) * c * x * x);
    (y, dy)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn bce_logits<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()
}

/// Bilinear taps of 2× upsampling (half-pixel centers, edge clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives gradients (for gradient checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: out_shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| x * s).collect();
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| x + s).collect();
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `a · b` for `a: [.., m, k]` and `b: [k, n]` (leading dims of `a` are
    /// folded into rows), or batched `[B, m, k] · [B, k, n]`. With `trans_b`,
    /// `b` is stored as `[n, k]` / `[B, n, k]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (batch, m) = if sb.len() == 3 {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(mismatch("matmul", &sa, &sb));
            }
            (sa[0], sa[1])
        } else {
            (1, sa[..sa.len() - 1].iter().product())
        };
        let r = sb.len() - 2;
        let (kb, n) = if trans_b { (sb[r + 1], sb[r]) } else { (sb[r], sb[r + 1]) };
        if kb != k {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    false,
                    &db[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.matmul_ext(a, b, false)
    }

    /// 2-D convolution of a channel-last `[H, W, Cin]` input with a
    /// `[kh, kw, Cin, Cout]` kernel (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> TensorResult<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[2] != sw[2] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho,
            wo,
        };
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let kdim = kh * kw * cin;
        let mut out = vec![T::zero(); ho * wo * cout];
        let cols = if pointwise {
            gemm(ho * wo, kdim, cout, self.data(x), false, self.data(w), false, &mut out, false);
            None
        } else if cout <= DIRECT_COUT {
            direct_forward(self.data(x), self.data(w), &geom, &mut out);
            None
        } else {
            let cols = im2col(self.data(x), &geom);
            gemm(ho * wo, kdim, cout, &cols, false, self.data(w), false, &mut out, false);
            Some(cols)
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor {
                shape: vec![ho, wo, cout],
                data: out,
            },
            Op::Conv2d { x, w, geom, cols },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    /// Softmax over the last axis. `mask` (one flag per last-axis entry,
    /// shared by all rows) excludes entries: they receive exactly zero weight.
    /// A row with every entry masked is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&n) = shape.last() else {
            return Err(invalid("softmax", &shape, "needs at least one axis"));
        };
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(mismatch("softmax", &shape, &[m.len()]));
            }
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        if n > 0 {
            for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut max = T::neg_infinity();
                for (i, &x) in row.iter().enumerate() {
                    if keep(i) && x > max {
                        max = x;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for (i, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                    if keep(i) {
                        *d = (x - max).exp();
                        sum += *d;
                    }
                }
                let inv = T::one() / sum;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (`[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let inv_c = T::one() / sc::<T>(c as f64);
        let eps: T = sc(eps);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let xh = (row[i] - mean) * rs;
                xhat[r * c + i] = xh;
                out[r * c + i] = xh * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / sc::<T>(d.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(mismatch("reshape", &v.shape, shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(invalid("transpose", &shape, format!("axes {d0},{d1}")));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(d0, d1);
        let perm = transpose_index(&shape, d0, d1);
        let src = self.data(a);
        let data = perm.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Transpose { a, d0, d1 },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TensorResult<Var> {
        let Some(&first) = inputs.first() else {
            return Err(invalid("concat", &[], "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid("narrow", &shape, format!("axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Narrow { a, axis, start },
            rg,
        ))
    }

    /// Gathers rows (first axis).
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(invalid("index_select", &shape, "row index out of range"));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::IndexSelect {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Bilinear 2× upsampling of `[H, W, C]` (half-pixel centers).
    pub fn upsample2x(&mut self, a: Var) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(invalid("upsample2x", &shape, "expected [H, W, C]"));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let src = self.data(a);
        let mut out = vec![T::zero(); 4 * h * w * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (sc::<T>(fy), sc::<T>(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (sc::<T>(fx), sc::<T>(1.0 - fx));
                let dst = &mut out[(oy * 2 * w + ox) * c..(oy * 2 * w + ox + 1) * c];
                let taps = [
                    (y0 * w + x0, gy * gx),
                    (y0 * w + x1, gy * fx),
                    (y1 * w + x0, fy * gx),
                    (y1 * w + x1, fy * fx),
                ];
                for (cell, wt) in taps {
                    let s = &src[cell * c..(cell + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += wt * v;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![2 * h, 2 * w, c],
                data: out,
            },
            Op::Upsample2x(a),
            rg,
        ))
    }

    /// Rows of an embedding table `[V, D]` → `[n, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> TensorResult<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.iter().any(|&i| i >= shape[0]) {
            return Err(invalid("embedding", &shape, "index out of range"));
        }
        let d = shape[1];
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity (same node) when not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let keep = sc::<T>(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.masked_scale(a, mask)
    }

    /// Elementwise product with a fixed mask (no gradient to the mask).
    pub fn masked_scale(&mut self, a: Var, mask: Vec<T>) -> Var {
        let v = self.value(a);
        assert_eq!(mask.len(), v.len(), "mask length");
        let data = v.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(t, Op::Dropout { a, mask }, rg)
    }

    /// Linear resampling of the spatial cells of `[H, W, C]`: output cell `i`
    /// is `Σ w · input_cell` over its four taps (`out_h × out_w` cells).
    pub fn resample(
        &mut self,
        a: Var,
        out_hw: (usize, usize),
        taps: Vec<[(u32, T); 4]>,
    ) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || taps.len() != out_hw.0 * out_hw.1 {
            return Err(invalid("resample", &shape, "tap count does not match output"));
        }
        let cells = shape[0] * shape[1];
        let c = shape[2];
        if taps.iter().flatten().any(|&(i, _)| i as usize >= cells) {
            return Err(invalid("resample", &shape, "tap out of range"));
        }
        let src = self.data(a);
        let mut out = vec![T::zero(); taps.len() * c];
        for (o, tap) in taps.iter().enumerate() {
            let dst = &mut out[o * c..(o + 1) * c];
            for &(i, wt) in tap {
                if wt == T::zero() {
                    continue;
                }
                let s = &src[i as usize * c..(i as usize + 1) * c];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += wt * v;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![out_hw.0, out_hw.1, c],
                data: out,
            },
            Op::Resample { a, taps },
            rg,
        ))
    }

    /// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)` as a scalar.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    ) -> TensorResult<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let x = self.data(logits);
        let mut s = T::zero();
        for i in 0..n {
            if weights[i] != T::zero() {
                s += weights[i] * bce_logits(x[i], targets[i]);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// `Σ wᵢ · FL(xᵢ, tᵢ)` with the sigmoid focal loss
    /// `FL = α_t (1 − p_t)^γ · BCE`, valid for soft targets in `[0, 1]`.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        gamma: f64,
        alpha: f64,
    ) -> TensorResult<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(mismatch("sigmoid_focal", self.shape(logits), &[targets.len()]));
        }
        let (gamma, alpha) = (sc::<T>(gamma), sc::<T>(alpha));
        let x = self.data(logits);
        let mut s = T::zero();
        for i in 0..n {
            if weights[i] != T::zero() {
                s += weights[i] * focal_value(x[i], targets[i], gamma, alpha);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SigmoidFocal {
                logits,
                targets,
                weights,
                gamma,
                alpha,
            },
            rg,
        ))
    }

    /// Node with a precomputed value and sparse Jacobian `(out, in, ∂out/∂in)`
    /// with respect to `input`; used for operations differentiated outside the
    /// tape (polygon GIoU).
    pub fn linearized(
        &mut self,
        input: Var,
        value: Tensor<T>,
        jacobian: Vec<(u32, u32, T)>,
    ) -> TensorResult<Var> {
        let n_in = self.value(input).len();
        if jacobian
            .iter()
            .any(|&(o, i, _)| o as usize >= value.len() || i as usize >= n_in)
        {
            return Err(invalid("linearized", self.shape(input), "jacobian index out of range"));
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::Linearized { input, jacobian }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every trainable parameter reached by the backward pass.
    pub fn param_grads<'a>(&self, grads: &'a Gradients<T>) -> Vec<(ParamId, &'a [T])> {
        let mut out: Vec<(ParamId, &[T])> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.acc_broadcast(*a, out.shape(), g, grads, |x| x);
                if neg {
                    self.acc_broadcast(*b, out.shape(), g, grads, |x| -x);
                } else {
                    self.acc_broadcast(*b, out.shape(), g, grads, |x| x);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let ia = broadcast_index(out.shape(), &sa);
                let ib = broadcast_index(out.shape(), &sb);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let ga = self.grad_buf(*a, grads);
                    for k in 0..g.len() {
                        ga[ia[k]] += g[k] * db[ib[k]];
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(*b, grads);
                    for k in 0..g.len() {
                        gb[ib[k]] += g[k] * da[ia[k]];
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_same(*a, grads, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc_same(*a, grads, |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let ga = self.grad_buf(*a, grads);
                    for bi in 0..*batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &db[bi * k * n..(bi + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gs, false, bs, !*trans_b, &mut ga[bi * m * k..(bi + 1) * m * k], true);
                    }
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(*b, grads);
                    for bi in 0..*batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gs, true, as_, false, dst, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, as_, true, gs, false, dst, true);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let kdim = geom.kh * geom.kw * geom.cin;
                let rows = geom.ho * geom.wo;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                if !pointwise && cols.is_none() {
                    let (xd, wd) = (self.data(*x), self.data(*w));
                    if self.rg(*w) {
                        direct_backward_w(xd, g, geom, self.grad_buf(*w, grads));
                    }
                    if self.rg(*x) {
                        direct_backward_x(wd, g, geom, self.grad_buf(*x, grads));
                    }
                    return;
                }
                if self.rg(*w) {
                    let src: &[T] = cols.as_deref().unwrap_or_else(|| self.data(*x));
                    let gw = self.grad_buf(*w, grads);
                    gemm(kdim, rows, geom.cout, src, true, g, false, gw, true);
                }
                if self.rg(*x) {
                    let wd = self.data(*w);
                    if cols.is_none() {
                        let gx = self.grad_buf(*x, grads);
                        gemm(rows, geom.cout, kdim, g, false, wd, true, gx, true);
                    } else {
                        let mut dcols = vec![T::zero(); rows * kdim];
                        gemm(rows, geom.cout, kdim, g, false, wd, true, &mut dcols, false);
                        let gx = self.grad_buf(*x, grads);
                        col2im(&dcols, geom, gx);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_parts(x[i]).1;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        } else if x[i] < T::zero() {
                            ga[i] -= g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.data();
                let n = *out.shape().last().unwrap();
                self.acc_same(*a, grads, |ga| {
                    for ((yr, gr), dr) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *out.shape().last().unwrap();
                let gm = self.data(*gamma);
                if self.rg(*gamma) {
                    let gg = self.grad_buf(*gamma, grads);
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for i in 0..c {
                            gg[i] += gr[i] * xr[i];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = self.grad_buf(*beta, grads);
                    for gr in g.chunks_exact(c) {
                        for i in 0..c {
                            gb[i] += gr[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = self.grad_buf(*x, grads);
                    let inv_c = T::one() / sc::<T>(c as f64);
                    let mut dxh = vec![T::zero(); c];
                    for r in 0..rstd.len() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..c {
                            dxh[i] = gr[i] * gm[i];
                            s1 += dxh[i];
                            s2 += dxh[i] * xr[i];
                        }
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for i in 0..c {
                            dst[i] += rstd[r] * (dxh[i] - inv_c * (s1 + xr[i] * s2));
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc_same(*a, grads, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let s = g[0] / sc::<T>(n as f64);
                self.acc_same(*a, grads, |ga| ga.iter_mut().for_each(|d| *d += s));
            }
            Op::Transpose { a, d0, d1 } => {
                let perm = transpose_index(self.shape(*a), *d0, *d1);
                self.acc_same(*a, grads, |ga| {
                    for (k, &i) in perm.iter().enumerate() {
                        ga[i] += g[k];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let gv = self.grad_buf(v, grads);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &s) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let len = out.shape()[*axis] * inner;
                let start = *start;
                self.acc_same(*a, grads, |ga| {
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        for (d, &s) in ga[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::IndexSelect { a, rows } => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                self.acc_same(*a, grads, |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &s) in ga[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&g[k * inner..(k + 1) * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a).to_vec();
                let (h, w, c) = (s[0], s[1], s[2]);
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                self.acc_same(*a, grads, |ga| {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let (fy, gy) = (sc::<T>(fy), sc::<T>(1.0 - fy));
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let (fx, gx) = (sc::<T>(fx), sc::<T>(1.0 - fx));
                            let src = &g[(oy * 2 * w + ox) * c..(oy * 2 * w + ox + 1) * c];
                            let taps = [
                                (y0 * w + x0, gy * gx),
                                (y0 * w + x1, gy * fx),
                                (y1 * w + x0, fy * gx),
                                (y1 * w + x1, fy * fx),
                            ];
                            for (cell, wt) in taps {
                                for (d, &v) in ga[cell * c..(cell + 1) * c].iter_mut().zip(src) {
                                    *d += wt * v;
                                }
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                self.acc_same(*table, grads, |gt| {
                    for (k, &i) in indices.iter().enumerate() {
                        for (dst, &s) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *dst += s;
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.acc_same(*a, grads, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Resample { a, taps } => {
                let c = *self.shape(*a).last().unwrap();
                self.acc_same(*a, grads, |ga| {
                    for (o, tap) in taps.iter().enumerate() {
                        let src = &g[o * c..(o + 1) * c];
                        for &(i, wt) in tap {
                            if wt == T::zero() {
                                continue;
                            }
                            let i = i as usize;
                            for (d, &v) in ga[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *d += wt * v;
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let x = self.data(*logits);
                let s = g[0];
                self.acc_same(*logits, grads, |gl| {
                    for i in 0..x.len() {
                        if weights[i] != T::zero() {
                            gl[i] += s * weights[i] * (sigmoid(x[i]) - targets[i]);
                        }
                    }
                });
            }
            Op::SigmoidFocal {
                logits,
                targets,
                weights,
                gamma,
                alpha,
            } => {
                let x = self.data(*logits);
                let s = g[0];
                self.acc_same(*logits, grads, |gl| {
                    for i in 0..x.len() {
                        if weights[i] != T::zero() {
                            gl[i] += s * weights[i] * focal_grad(x[i], targets[i], *gamma, *alpha);
                        }
                    }
                });
            }
            Op::Linearized { input, jacobian } => {
                self.acc_same(*input, grads, |gi| {
                    for &(o, i, d) in jacobian {
                        gi[i as usize] += g[o as usize] * d;
                    }
                });
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc_same(&self, v: Var, grads: &mut [Option<Vec<T>>], f: impl FnOnce(&mut [T])) {
        if self.rg(v) {
            f(self.grad_buf(v, grads));
        }
    }

    fn acc_broadcast(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(T) -> T,
    ) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v).to_vec();
        let buf = self.grad_buf(v, grads);
        if shape == out_shape {
            buf.iter_mut().zip(g).for_each(|(d, &x)| *d += f(x));
        } else {
            let idx = broadcast_index(out_shape, &shape);
            for (k, &i) in idx.iter().enumerate() {
                buf[i] += f(g[k]);
            }
        }
    }
}

/// `x^e` with the common small integer exponents done by multiplication.
#[inline]
fn pow_fast<T: Scalar>(x: T, e: T) -> T {
    if e == T::zero() {
        T::one()
    } else if e == T::one() {
        x
    } else if e == sc(2.0) {
        x * x
    } else {
        x.powf(e)
    }
}

fn focal_value<T: Scalar>(x: T, t: T, gamma: T, alpha: T) -> T {
    let one = T::one();
    let p = sigmoid(x);
    let pt = p * t + (one - p) * (one - t);
    let at = alpha * t + (one - alpha) * (one - t);
    at * pow_fast(one - pt, gamma) * bce_logits(x, t)
}

fn focal_grad<T: Scalar>(x: T, t: T, gamma: T, alpha: T) -> T {
    let one = T::one();
    let p = sigmoid(x);
    let pt = p * t + (one - p) * (one - t);
    let at = alpha * t + (one - alpha) * (one - t);
    let m = one - pt;
    let ce = bce_logits(x, t);
    let dm = -(t + t - one) * p * (one - p);
    let mod_grad = if gamma == T::zero() || m <= T::zero() {
        T::zero()
    } else {
        gamma * pow_fast(m, gamma - one) * dm * ce
    };
    at * (mod_grad + pow_fast(m, gamma) * (p - t))
}

fn transpose_index(shape: &[usize], d0: usize, d1: usize) -> Vec<usize> {
    // for each output element (in output order) the source offset
    let n = shape.len();
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut out_strides = strides.clone();
    out_strides.swap(d0, d1);
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; n];
    let mut res = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        res.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    res
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kdim = g.kh * g.kw * g.cin;
    let mut cols = vec![T::zero(); g.ho * g.wo * kdim];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Output channel limit of the direct (im2col-free) convolution kernels.
const DIRECT_COUT: usize = 8;

/// Calls `f(out_pixel, in_pixel, len, tap)` for every run of consecutive
/// output pixels of one row that see the same kernel tap; along a run the
/// input pixel advances by the stride.
#[inline]
fn for_each_span(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    for oy in 0..g.ho {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            for kx in 0..g.kw {
                // ix = ox·stride + kx − pad must land in [0, w)
                let lo = (g.pad.saturating_sub(kx)).div_ceil(g.stride);
                let hi_num = g.w as isize - 1 + g.pad as isize - kx as isize;
                if hi_num < 0 {
                    continue;
                }
                let hi = (hi_num as usize / g.stride + 1).min(g.wo);
                if lo >= hi {
                    continue;
                }
                let ix = lo * g.stride + kx - g.pad;
                f(oy * g.wo + lo, iy as usize * g.w + ix, hi - lo, ky * g.kw + kx);
            }
        }
    }
}

/// Copies `rows` vectors of width `n` into `L`-wide zero-padded rows.
fn pad_rows<T: Scalar, const L: usize>(src: &[T], n: usize) -> Vec<T> {
    let rows = src.len() / n;
    let mut p = vec![T::zero(); rows * L];
    for (d, s) in p.chunks_exact_mut(L).zip(src.chunks_exact(n)) {
        d[..n].copy_from_slice(s);
    }
    p
}

fn direct_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    if g.cout <= 4 {
        direct_forward_l::<T, 4>(x, w, g, out)
    } else {
        direct_forward_l::<T, 8>(x, w, g, out)
    }
}

fn direct_forward_l<T: Scalar, const L: usize>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let wp = pad_rows::<T, L>(w, g.cout);
    let mut acc = vec![T::zero(); g.ho * g.wo * L];
    let (cin, st) = (g.cin, g.stride);
    for_each_span(g, |o, i, len, tap| {
        let wt = &wp[tap * cin * L..(tap + 1) * cin * L];
        for p in 0..len {
            let a: &mut [T; L] = (&mut acc[(o + p) * L..(o + p + 1) * L]).try_into().unwrap();
            let xin = &x[(i + p * st) * cin..(i + p * st + 1) * cin];
            for (wr, &xv) in wt.chunks_exact(L).zip(xin) {
                for j in 0..L {
                    a[j] += xv * wr[j];
                }
            }
        }
    });
    for (o, a) in out.chunks_exact_mut(g.cout).zip(acc.chunks_exact(L)) {
        o.copy_from_slice(&a[..g.cout]);
    }
}

fn direct_backward_w<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeom, gw: &mut [T]) {
    if g.cout <= 4 {
        direct_backward_w_l::<T, 4>(x, gy, g, gw)
    } else {
        direct_backward_w_l::<T, 8>(x, gy, g, gw)
    }
}

fn direct_backward_w_l<T: Scalar, const L: usize>(x: &[T], gy: &[T], g: &ConvGeom, gw: &mut [T]) {
    let gp = pad_rows::<T, L>(gy, g.cout);
    let (cin, st) = (g.cin, g.stride);
    let mut acc = vec![T::zero(); g.kh * g.kw * cin * L];
    for_each_span(g, |o, i, len, tap| {
        let at = &mut acc[tap * cin * L..(tap + 1) * cin * L];
        for p in 0..len {
            let d: &[T; L] = (&gp[(o + p) * L..(o + p + 1) * L]).try_into().unwrap();
            let xin = &x[(i + p * st) * cin..(i + p * st + 1) * cin];
            for (r, &xv) in at.chunks_exact_mut(L).zip(xin) {
                for j in 0..L {
                    r[j] += xv * d[j];
                }
            }
        }
    });
    for (dst, src) in gw.chunks_exact_mut(g.cout).zip(acc.chunks_exact(L)) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn direct_backward_x<T: Scalar>(w: &[T], gy: &[T], g: &ConvGeom, gx: &mut [T]) {
    if g.cout <= 4 {
        direct_backward_x_l::<T, 4>(w, gy, g, gx)
    } else {
        direct_backward_x_l::<T, 8>(w, gy, g, gx)
    }
}

fn direct_backward_x_l<T: Scalar, const L: usize>(w: &[T], gy: &[T], g: &ConvGeom, gx: &mut [T]) {
    let wp = pad_rows::<T, L>(w, g.cout);
    let gp = pad_rows::<T, L>(gy, g.cout);
    let (cin, st) = (g.cin, g.stride);
    for_each_span(g, |o, i, len, tap| {
        let wt = &wp[tap * cin * L..(tap + 1) * cin * L];
        for p in 0..len {
            let d: &[T; L] = (&gp[(o + p) * L..(o + p + 1) * L]).try_into().unwrap();
            let gin = &mut gx[(i + p * st) * cin..(i + p * st + 1) * cin];
            for (v, wr) in gin.iter_mut().zip(wt.chunks_exact(L)) {
                let mut s = T::zero();
                for j in 0..L {
                    s += d[j] * wr[j];
                }
                *v += s;
            }
        }
    });
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let kdim = g.kh * g.kw * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Gradients from one backward pass, retained for leaves and parameters.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type G = Graph<f64>;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference check of `d f / d inputs`.
    fn grad_check(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut G, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = G::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eps = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).map(|x| x.to_vec()).unwrap_or(vec![0.0; t.len()]);
            for k in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = G::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == vi {
                                u.data_mut()[k] += delta;
                            }
                            g.variable(u)
                        })
                        .collect();
                    let o = f(&mut g, &vars);
                    g.value(o).item()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= tol, "input {vi} elem {k}: analytic {a} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn softmax_uniform_and_sigmoid_slope() {
        let mut g = G::new();
        let x = g.variable(Tensor::full(&[5], 3.0));
        let s = g.softmax(x, None).unwrap();
        assert!(g.data(s).iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let mut g = G::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap()[0], 0.25);
    }

    #[test]
    fn masked_softmax_zero_weight() {
        let mut g = G::new();
        let x = g.variable(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(x, Some(vec![true, false, true])).unwrap();
        let d = g.data(s);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[4], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        let none = g.softmax(x, Some(vec![false; 3])).unwrap();
        assert!(g.data(none).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = G::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let e = g.add(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4]"), "{e}");
        let e = g.matmul(a, a).unwrap_err().to_string();
        assert!(e.contains("[2, 3]"), "{e}");
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = G::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = g.variable(rand_tensor(&mut rng, &[10]));
        assert_eq!(g.dropout(a, 0.5, false, &mut rng), a);
        let d = g.dropout(a, 0.5, true, &mut rng);
        assert_ne!(d, a);
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[3, 1])];
        grad_check(
            inputs,
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let b = g.mul(a, v[2]).unwrap();
                let c = g.sub(b, v[1]).unwrap();
                let d = g.gelu(c);
                let e = g.tanh(d);
                let f = g.sigmoid(e);
                let h = g.scale(f, 1.7);
                let h = g.add_scalar(h, 0.3);
                let h = g.mul(h, h).unwrap();
                g.mean(h)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[2, 5, 4]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5, 3]),
        ];
        grad_check(
            inputs,
            |g, v| {
                let s = g.matmul_ext(v[0], v[1], true).unwrap(); // [2,3,5]
                let p = g.softmax(s, Some(vec![true, true, false, true, true])).unwrap();
                let n = g.layer_norm(p, v[2], v[3], 1e-5).unwrap();
                let m = g.matmul(n, v[4]).unwrap(); // [2,3,3]
                let t = g.transpose(m, 0, 2).unwrap();
                let r = g.reshape(t, &[9, 2]).unwrap();
                let q = g.mul(r, r).unwrap();
                g.sum(q)
            },
            1e-6,
        );
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
        grad_check(
            inputs,
            |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                let m = g.tanh(m);
                g.sum(m)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_upsample_resample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, &[5, 4, 2]),
            rand_tensor(&mut rng, &[3, 3, 2, 3]),
            rand_tensor(&mut rng, &[1, 1, 3, 2]),
            rand_tensor(&mut rng, &[2, 2, 2, 2]),
        ];
        grad_check(
            inputs,
            |g, v| {
                let c = g.conv2d(v[0], v[1], 1, 1).unwrap(); // [5,4,3]
                let c = g.gelu(c);
                let p = g.conv2d(c, v[2], 1, 0).unwrap(); // [5,4,2]
                let d = g.conv2d(p, v[3], 2, 0).unwrap(); // [2,2,2]
                let u = g.upsample2x(d).unwrap(); // [4,4,2]
                let taps = (0..4)
                    .map(|i| [(i as u32, 0.5), ((i + 3) as u32, 0.25), (15, 0.25), (0, 0.0)])
                    .collect();
                let r = g.resample(u, (2, 2), taps).unwrap();
                let q = g.mul(r, r).unwrap();
                let s1 = g.sum(q);
                let q2 = g.mul(u, u).unwrap();
                let s2 = g.mean(q2);
                g.add(s1, s2).unwrap()
            },
            1e-6,
        );
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
        let (kh, kw, cout) = (w.shape[0], w.shape[1], w.shape[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data[(iy as usize * wd + ix as usize) * cin + ci];
                            for co in 0..cout {
                                out[(oy * wo + ox) * cout + co] += xv * w.data[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_paths_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (hw, k, cin, cout, stride, pad) in [
            ((9, 7), 3, 3, 5, 1, 1),
            ((9, 7), 3, 3, 12, 1, 1),
            ((10, 11), 3, 4, 8, 2, 1),
            ((10, 11), 2, 4, 9, 2, 0),
            ((6, 6), 1, 5, 3, 1, 0),
            ((6, 6), 1, 5, 20, 1, 0),
        ] {
            let x = rand_tensor(&mut rng, &[hw.0, hw.1, cin]);
            let w = rand_tensor(&mut rng, &[k, k, cin, cout]);
            let want = naive_conv(&x, &w, stride, pad);
            let mut g = G::new();
            let (xv, wv) = (g.constant(x), g.constant(w));
            let y = g.conv2d(xv, wv, stride, pad).unwrap();
            for (a, b) in g.data(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_conv_shapes() {
        let mut g = G::new();
        let x = g.constant(Tensor::zeros(&[104, 128, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 4]));
        let y = g.conv2d(x, w, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[52, 64, 4]);
        let mut g = G::new();
        let x = g.constant(Tensor::zeros(&[13, 16, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 4]));
        let y = g.conv2d(x, w, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[6, 8, 4]);
    }

    #[test]
    fn concat_narrow_select_embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 2]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[5, 2]),
        ];
        grad_check(
            inputs,
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 0).unwrap(); // [7,2]
                let c2 = g.concat(&[c, c], 1).unwrap(); // [7,4]
                let n = g.narrow(c2, 1, 1, 2).unwrap();
                let s = g.index_select(n, &[6, 0, 0, 3]).unwrap();
                let e = g.embedding(v[2], &[4, 1, 1, 0]).unwrap();
                let m = g.mul(s, e).unwrap();
                let a = g.abs(m);
                g.sum(a)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[12]);
        let t: Vec<f64> = (0..12).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
        let w: Vec<f64> = (0..12).map(|i| if i == 4 { 0.0 } else { 0.5 + i as f64 * 0.1 }).collect();
        let (t2, w2) = (t.clone(), w.clone());
        grad_check(vec![x.clone()], move |g, v| g.bce_with_logits(v[0], t2.clone(), w2.clone()).unwrap(), 1e-6);
        let (t2, w2) = (t.clone(), w.clone());
        grad_check(vec![x.clone()], move |g, v| g.sigmoid_focal(v[0], t2.clone(), w2.clone(), 2.0, 0.25).unwrap(), 1e-6);
        grad_check(vec![x], move |g, v| g.sigmoid_focal(v[0], t.clone(), w.clone(), 1.5, 0.6).unwrap(), 1e-6);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut g = G::new();
        let x = g.variable(Tensor::new(vec![4], vec![-2.0, -0.1, 0.7, 3.0]).unwrap());
        let t = vec![0.0, 1.0, 1.0, 0.0];
        let w = vec![1.0; 4];
        let f = g.sigmoid_focal(x, t.clone(), w.clone(), 0.0, 0.5).unwrap();
        let b = g.bce_with_logits(x, t, w).unwrap();
        assert!((g.value(f).item() - 0.5 * g.value(b).item()).abs() < 1e-15);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = rand_tensor(&mut rng, &[6]);
        let run = |which: u8| {
            let mut g = G::new();
            let x = g.variable(xt.clone());
            let a = g.tanh(x);
            let l1 = g.sum(a);
            let b = g.mul(x, x).unwrap();
            let l2 = g.mean(b);
            let out = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            g.backward(out).unwrap().get(x).unwrap().to_vec()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        for i in 0..6 {
            assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn linearized_node_propagates() {
        let mut g = G::new();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g
            .linearized(x, Tensor::new(vec![1], vec![5.0]).unwrap(), vec![(0, 0, 3.0), (0, 1, -1.0)])
            .unwrap();
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[3.0, -1.0]);
    }
}
