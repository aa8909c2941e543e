use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_forward, Dims};
use super::{gemm, Real, Tensor, View};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Backward rule of a user-defined op: `(input values, output value, output gradient)`
/// to one gradient buffer per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        // im2col buffers per batch item; empty for 1x1 kernels
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        c: Var,
        ta: bool,
        tc: bool,
        alpha: T,
        dims: (usize, usize, usize),
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
    },
    AvgPool(Var),
    L2Norm {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Scale {
        s: Var,
        x: Var,
    },
    Mul(Var, Var),
    Sum(Var),
    Combine {
        a: Var,
        wa: T,
        b: Var,
        wb: T,
    },
    Precomputed {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; gradients flow back in reverse.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
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
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input; it participates in differentiation iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ---- forward ops ----

    /// Same-padded stride-1 cross-correlation: `x [B,Cin,L]`, `w [Cout,Cin,K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(mismatch(format!("conv1d expects [B,Cin,L], [Cout,Cin,K], [Cout]; got {xs:?}, {ws:?}, {bs:?}")));
        }
        let (bn, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if wcin != cin || bs[0] != cout {
            return Err(mismatch(format!("conv1d channel mismatch: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if k % 2 == 0 {
            return Err(mismatch(format!("conv1d kernel size must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let ck = cin * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); bn * ck * l] };
        let mut y = vec![T::zero(); bn * cout * l];
        for bi in 0..bn {
            for (co, row) in y[bi * cout * l..(bi + 1) * cout * l].chunks_mut(l).enumerate() {
                row.fill(bv[co]);
            }
            let (src, src_view) = if k == 1 {
                (xv, View::row_major(bi * cin * l, l))
            } else {
                let c = &mut cols[bi * ck * l..(bi + 1) * ck * l];
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for kk in 0..k {
                        let crow = &mut c[(ci * k + kk) * l..(ci * k + kk + 1) * l];
                        // crow[t] = xrow[t + kk - pad]
                        let lo = pad.saturating_sub(kk);
                        let hi = (l + pad).saturating_sub(kk).min(l);
                        if lo < hi {
                            crow[lo..hi].copy_from_slice(&xrow[lo + kk - pad..hi + kk - pad]);
                        }
                    }
                }
                (&cols[..], View::row_major(bi * ck * l, l))
            };
            gemm(
                cout,
                ck,
                l,
                T::one(),
                wv,
                View::row_major(0, ck),
                src,
                src_view,
                T::one(),
                &mut y,
                View::row_major(bi * cout * l, l),
            );
        }
        if !self.nodes[w.0].requires_grad {
            cols = Vec::new();
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[bn, cout, l], y)?, Op::Conv1d { x, w, b, k, cols }, rg))
    }

    /// Per-channel normalisation over `(B, L)` of `x [B,C,L]`.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>, mode: BnMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(mismatch(format!("batchnorm1d expects [B,C,L], got {xs:?}")));
        }
        let (bn, c, l) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c || state.running_var.len() != c {
            return Err(mismatch(format!("batchnorm1d parameters must have {c} channels")));
        }
        let n = bn * l;
        let train = mode == BnMode::Train;
        if train && n < 2 {
            return Err(Error::DegenerateBatch(format!("batch-norm training needs B*L >= 2, got {n}")));
        }
        let eps = T::lit(state.eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let nf = T::from_usize(n).unwrap();
        for ch in 0..c {
            let rows = (0..bn).map(|bi| (bi * c + ch) * l);
            let (mean, var) = if train {
                let mut s = T::zero();
                for r in rows.clone() {
                    s += xv[r..r + l].iter().copied().sum::<T>();
                }
                let mean = s / nf;
                let mut ss = T::zero();
                for r in rows.clone() {
                    ss += xv[r..r + l].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = ss / nf;
                let m = T::lit(state.momentum);
                let unbiased = ss / T::from_usize(n - 1).unwrap();
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                (mean, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for r in rows {
                for i in r..r + l {
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
        }
        let mut y = xhat.clone();
        for bi in 0..bn {
            for ch in 0..c {
                let r = (bi * c + ch) * l;
                for v in &mut y[r..r + l] {
                    *v = g[ch] * *v + be[ch];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// `x [B,F] · w [F,G] + b [G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(mismatch(format!("linear expects [B,F], [F,G], [G]; got {xs:?}, {ws:?}, {bs:?}")));
        }
        let (bn, f, g) = (xs[0], xs[1], ws[1]);
        let bv = self.value(b).data();
        let mut y: Vec<T> = (0..bn).flat_map(|_| bv.iter().copied()).collect();
        gemm(
            bn,
            f,
            g,
            T::one(),
            self.value(x).data(),
            View::row_major(0, f),
            self.value(w).data(),
            View::row_major(0, g),
            T::one(),
            &mut y,
            View::row_major(0, g),
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[bn, g], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched `alpha · op(a) · op(c)` where `op` optionally transposes the last two axes.
    pub fn matmul_batched(&mut self, a: Var, c: Var, ta: bool, tc: bool, alpha: T) -> Result<Var> {
        let (as_, cs) = (self.shape(a), self.shape(c));
        if as_.len() != 3 || cs.len() != 3 || as_[0] != cs[0] {
            return Err(mismatch(format!("matmul_batched expects [B,M,N], [B,N,P]; got {as_:?}, {cs:?}")));
        }
        let bn = as_[0];
        let (m, n) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (n2, p) = if tc { (cs[2], cs[1]) } else { (cs[1], cs[2]) };
        if n != n2 {
            return Err(mismatch(format!("matmul_batched inner dims differ: {as_:?}{} x {cs:?}{}", if ta { "ᵀ" } else { "" }, if tc { "ᵀ" } else { "" })));
        }
        let mut y = vec![T::zero(); bn * m * p];
        let av = self.value(a).data();
        let cv = self.value(c).data();
        for bi in 0..bn {
            gemm(
                m,
                n,
                p,
                alpha,
                av,
                op_view(bi * m * n, m, n, ta),
                cv,
                op_view(bi * n * p, n, p, tc),
                T::zero(),
                &mut y,
                View::row_major(bi * m * p, p),
            );
        }
        let rg = self.rg(&[a, c]);
        Ok(self.push(
            Tensor::new(&[bn, m, p], y)?,
            Op::Matmul {
                a,
                c,
                ta,
                tc,
                alpha,
                dims: (m, n, p),
            },
            rg,
        ))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = *v.shape().last().unwrap();
        let mut y = v.data().to_vec();
        for row in y.chunks_mut(w) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|e| *e = *e - mx);
            T::exp_inplace(row);
            let s: f64 = row.iter().map(|e| e.to_f64().unwrap_or(f64::NAN)).sum();
            let inv = T::lit(1.0 / s);
            for e in row.iter_mut() {
                *e *= inv;
            }
        }
        let t = Tensor::new(v.shape(), y).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Self-attention `v · softmax_rows(scale · qᵀk)ᵀ` with `q, k: [B,D,L]`, `v: [B,C,L]`.
    ///
    /// Same value as `matmul_batched(v, softmax_lastdim(matmul_batched(q, k, true, false, scale)), false, true, 1)`,
    /// but the `[B,L,L]` weights are never stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let dims = self.attention_dims(q, k, v)?;
        let y = attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), &dims, scale);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::new(&[dims.b, dims.c, dims.l], y)?, Op::Attention { q, k, v, scale }, rg))
    }

    /// Query-major attention weights `[B,L,L]` (rows sum to one) for inspection.
    pub fn attention_weights(&self, q: Var, k: Var, scale: T) -> Result<Tensor<T>> {
        let (qs, ks) = (self.shape(q), self.shape(k));
        if qs.len() != 3 || qs != ks || q == k {
            return Err(mismatch(format!("attention weights expect distinct q,k [B,D,L]; got {qs:?}, {ks:?}")));
        }
        let dims = Dims {
            b: qs[0],
            d: qs[1],
            c: 0,
            l: qs[2],
        };
        let w = super::attention::attention_weights(self.value(q).data(), self.value(k).data(), &dims, scale);
        Tensor::new(&[dims.b, dims.l, dims.l], w)
    }

    fn attention_dims(&self, q: Var, k: Var, v: Var) -> Result<Dims> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || qs != ks || vs.len() != 3 || vs[0] != qs[0] || vs[2] != qs[2] {
            return Err(mismatch(format!("attention expects q,k [B,D,L] and v [B,C,L]; got {qs:?}, {ks:?}, {vs:?}")));
        }
        if q == k || k == v || q == v {
            return Err(mismatch("attention inputs must be distinct tape values".into()));
        }
        Ok(Dims {
            b: qs[0],
            d: qs[1],
            c: vs[1],
            l: qs[2],
        })
    }

    /// Mean over the last axis: `[B,C,L] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 3 {
            return Err(mismatch(format!("global_avg_pool expects [B,C,L], got {:?}", v.shape())));
        }
        let (bn, c, l) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let lf = T::from_usize(l).unwrap();
        let y = v.data().chunks(l).map(|r| r.iter().copied().sum::<T>() / lf).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[bn, c], y)?, Op::AvgPool(x), rg))
    }

    /// Row-wise `x / max(‖x‖, eps)` on `[B,F]`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(mismatch(format!("l2_normalize expects [B,F], got {:?}", v.shape())));
        }
        let f = v.shape()[1];
        let mut y = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.shape()[0]);
        for row in y.chunks_mut(f) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let d = n.max(eps);
            for e in row.iter_mut() {
                *e = *e / d;
            }
            norms.push(n);
        }
        let t = Tensor::new(v.shape(), y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Norm { x, norms, eps }, rg))
    }

    /// Concatenation along axis 1; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| mismatch("concat of nothing".into()))?).to_vec();
        if first.len() < 2 {
            return Err(mismatch(format!("concat needs rank >= 2, got {first:?}")));
        }
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(mismatch(format!("concat shapes disagree: {first:?} vs {s:?}")));
            }
            total += s[1];
        }
        let bn = first[0];
        let mut y = Vec::with_capacity(bn * total * inner);
        for bi in 0..bn {
            for &v in xs {
                let t = self.value(v);
                let blk = t.shape()[1] * inner;
                y.extend_from_slice(&t.data()[bi * blk..(bi + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Concat(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(format!("add shapes differ: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let y = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(va.shape(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `s · x` for a one-element `s`.
    pub fn scale(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch(format!("scale factor must have one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| sv * a).collect())?;
        let rg = self.rg(&[s, x]);
        Ok(self.push(t, Op::Scale { s, x }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(format!("mul shapes differ: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let y = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(va.shape(), y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `wa·a + wb·b` for one-element `a`, `b`.
    pub fn combine(&mut self, a: Var, wa: T, b: Var, wb: T) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(mismatch("combine takes scalars".into()));
        }
        let y = wa * self.value(a).item() + wb * self.value(b).item();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(y), Op::Combine { a, wa, b, wb }, rg))
    }

    /// Scalar whose gradient with respect to each input was computed alongside its value.
    pub fn precomputed(&mut self, inputs: &[Var], value: T, grads: Vec<Vec<T>>) -> Result<Var> {
        if grads.len() != inputs.len() || inputs.iter().zip(&grads).any(|(v, g)| self.value(*v).len() != g.len()) {
            return Err(mismatch("precomputed gradients must match their inputs".into()));
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Precomputed {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        ))
    }

    /// Arbitrary op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    // ---- reverse pass ----

    /// Back-propagates from the scalar `root`; previous gradients are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(mismatch(format!("backward root must be scalar, got {:?}", self.shape(root))));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &[T]) {
        let Tape { nodes, grads } = self;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, k, cols } => {
                let (bn, cin, l) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let cout = shp(*w)[0];
                let (k, ck) = (*k, cin * *k);
                let pad = (k - 1) / 2;
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for bi in 0..bn {
                        for co in 0..cout {
                            let r = (bi * cout + co) * l;
                            gb[co] += dy[r..r + l].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(gw) = grad_buf(nodes, grads, *w) {
                    let (src, stride) = if k == 1 { (val(*x), cin * l) } else { (&cols[..], ck * l) };
                    for bi in 0..bn {
                        gemm(
                            cout,
                            l,
                            ck,
                            T::one(),
                            dy,
                            View::row_major(bi * cout * l, l),
                            src,
                            View::transposed(bi * stride, l),
                            T::one(),
                            gw,
                            View::row_major(0, ck),
                        );
                    }
                }
                let wv = val(*w);
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    if k == 1 {
                        for bi in 0..bn {
                            gemm(
                                cin,
                                cout,
                                l,
                                T::one(),
                                wv,
                                View::transposed(0, ck),
                                dy,
                                View::row_major(bi * cout * l, l),
                                T::one(),
                                gx,
                                View::row_major(bi * cin * l, l),
                            );
                        }
                    } else {
                        let mut dcol = vec![T::zero(); ck * l];
                        for bi in 0..bn {
                            gemm(
                                ck,
                                cout,
                                l,
                                T::one(),
                                wv,
                                View::transposed(0, ck),
                                dy,
                                View::row_major(bi * cout * l, l),
                                T::zero(),
                                &mut dcol,
                                View::row_major(0, l),
                            );
                            for ci in 0..cin {
                                let gxrow = &mut gx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                                for kk in 0..k {
                                    let drow = &dcol[(ci * k + kk) * l..(ci * k + kk + 1) * l];
                                    let lo = pad.saturating_sub(kk);
                                    let hi = (l + pad).saturating_sub(kk).min(l);
                                    for t in lo..hi {
                                        gxrow[t + kk - pad] += drow[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (bn, c, l) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let g = val(*gamma);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..bn {
                    for ch in 0..c {
                        let r = (bi * c + ch) * l;
                        for i in r..r + l {
                            dg[ch] += dy[i] * xhat[i];
                            db[ch] += dy[i];
                        }
                    }
                }
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    let nf = T::from_usize(bn * l).unwrap();
                    for ch in 0..c {
                        let scale = g[ch] * inv_std[ch];
                        for bi in 0..bn {
                            let r = (bi * c + ch) * l;
                            for i in r..r + l {
                                gx[i] += if *train {
                                    scale * (dy[i] - db[ch] / nf - xhat[i] * dg[ch] / nf)
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                }
                if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                    gg.iter_mut().zip(&dg).for_each(|(a, &d)| *a += d);
                }
                if let Some(gb) = grad_buf(nodes, grads, *beta) {
                    gb.iter_mut().zip(&db).for_each(|(a, &d)| *a += d);
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for ((g, &o), &d) in gx.iter_mut().zip(out).zip(dy) {
                        if o > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (bn, f) = (shp(*x)[0], shp(*x)[1]);
                let g = shp(*w)[1];
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for row in dy.chunks(g) {
                        gb.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                }
                let xv = val(*x);
                if let Some(gw) = grad_buf(nodes, grads, *w) {
                    gemm(f, bn, g, T::one(), xv, View::transposed(0, f), dy, View::row_major(0, g), T::one(), gw, View::row_major(0, g));
                }
                let wv = val(*w);
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    gemm(bn, g, f, T::one(), dy, View::row_major(0, g), wv, View::transposed(0, g), T::one(), gx, View::row_major(0, f));
                }
            }
            Op::Matmul {
                a,
                c,
                ta,
                tc,
                alpha,
                dims: (m, n, p),
            } => {
                let (m, n, p) = (*m, *n, *p);
                let bn = shp(*a)[0];
                let cv = val(*c);
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for bi in 0..bn {
                        // d op(a) = alpha · dy · op(c)ᵀ
                        gemm(
                            m,
                            p,
                            n,
                            *alpha,
                            dy,
                            View::row_major(bi * m * p, p),
                            cv,
                            swap(op_view(bi * n * p, n, p, *tc)),
                            T::one(),
                            ga,
                            op_view(bi * m * n, m, n, *ta),
                        );
                    }
                }
                let av = val(*a);
                if let Some(gc) = grad_buf(nodes, grads, *c) {
                    for bi in 0..bn {
                        // d op(c) = alpha · op(a)ᵀ · dy
                        gemm(
                            n,
                            m,
                            p,
                            *alpha,
                            av,
                            swap(op_view(bi * m * n, m, n, *ta)),
                            dy,
                            View::row_major(bi * m * p, p),
                            T::one(),
                            gc,
                            op_view(bi * n * p, n, p, *tc),
                        );
                    }
                }
            }
            Op::Softmax(x) => {
                let out = node.value.data();
                let w = *node.value.shape().last().unwrap();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for ((g, y), d) in gx.chunks_mut(w).zip(out.chunks(w)).zip(dy.chunks(w)) {
                        let dot = y.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..w {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, scale } => {
                let (qs, vs) = (shp(*q), shp(*v));
                let dims = Dims {
                    b: qs[0],
                    d: qs[1],
                    c: vs[1],
                    l: qs[2],
                };
                // the three inputs are distinct nodes (checked at forward), so their
                // buffers can be lifted out of `grads` and restored afterwards
                let mut lift = |v: Var| -> Option<Vec<T>> {
                    nodes[v.0].requires_grad.then(|| grads[v.0].take().unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()]))
                };
                let (mut gq, mut gk, mut gv) = (lift(*q), lift(*k), lift(*v));
                attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    dy,
                    &dims,
                    *scale,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if g.is_some() {
                        grads[var.0] = g;
                    }
                }
            }
            Op::AvgPool(x) => {
                let l = shp(*x)[2];
                let lf = T::from_usize(l).unwrap();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for (row, &d) in gx.chunks_mut(l).zip(dy) {
                        let v = d / lf;
                        row.iter_mut().for_each(|a| *a += v);
                    }
                }
            }
            Op::L2Norm { x, norms, eps } => {
                let f = shp(*x)[1];
                let out = node.value.data();
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    for (((g, y), d), &n) in gx.chunks_mut(f).zip(out.chunks(f)).zip(dy.chunks(f)).zip(norms) {
                        if n > *eps {
                            let dot = y.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..f {
                                g[j] += (d[j] - y[j] * dot) / n;
                            }
                        } else {
                            for j in 0..f {
                                g[j] += d[j] / *eps;
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let (bn, total) = (s[0], s[1]);
                let mut ch0 = 0;
                for &v in xs {
                    let c = shp(v)[1];
                    if let Some(gx) = grad_buf(nodes, grads, v) {
                        for bi in 0..bn {
                            let src = &dy[(bi * total + ch0) * inner..(bi * total + ch0 + c) * inner];
                            let dst = &mut gx[bi * c * inner..(bi + 1) * c * inner];
                            dst.iter_mut().zip(src).for_each(|(a, &d)| *a += d);
                        }
                    }
                    ch0 += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = grad_buf(nodes, grads, v) {
                        g.iter_mut().zip(dy).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Scale { s, x } => {
                let sv = val(*s)[0];
                let xv = val(*x);
                if let Some(gs) = grad_buf(nodes, grads, *s) {
                    gs[0] += xv.iter().zip(dy).map(|(&a, &d)| a * d).sum::<T>();
                }
                if let Some(gx) = grad_buf(nodes, grads, *x) {
                    gx.iter_mut().zip(dy).for_each(|(a, &d)| *a += sv * d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for ((g, &o), &d) in ga.iter_mut().zip(bv).zip(dy) {
                        *g += o * d;
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for ((g, &o), &d) in gb.iter_mut().zip(av).zip(dy) {
                        *g += o * d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = grad_buf(nodes, grads, *x) {
                    g.iter_mut().for_each(|a| *a += dy[0]);
                }
            }
            Op::Combine { a, wa, b, wb } => {
                if let Some(g) = grad_buf(nodes, grads, *a) {
                    g[0] += *wa * dy[0];
                }
                if let Some(g) = grad_buf(nodes, grads, *b) {
                    g[0] += *wb * dy[0];
                }
            }
            Op::Precomputed { inputs, grads: pg } => {
                for (&v, pgv) in inputs.iter().zip(pg) {
                    if let Some(g) = grad_buf(nodes, grads, v) {
                        g.iter_mut().zip(pgv).for_each(|(a, &d)| *a += dy[0] * d);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gs = backward(&vals, &node.value, dy);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(g) = grad_buf(nodes, grads, v) {
                        g.iter_mut().zip(&gv).for_each(|(a, &d)| *a += d);
                    }
                }
            }
        }
    }
}

/// Gradient buffer of an input, allocated on first use; `None` if it needs no gradient.
fn grad_buf<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// View of the `rows x cols` operand `op(M)` inside a batch slab starting at `off`,
/// where `M` is stored row-major as `rows x cols` (or `cols x rows` when transposed).
fn op_view(off: usize, rows: usize, cols: usize, transposed: bool) -> View {
    if transposed {
        View::transposed(off, rows)
    } else {
        View::row_major(off, cols)
    }
}

fn swap(v: View) -> View {
    View {
        off: v.off,
        rs: v.cs,
        cs: v.rs,
    }
}
