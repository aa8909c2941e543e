//! Fused scaled dot-product self-attention kernels.
//!
//! For one sample with `q, k: [D,L]` and `v: [C,L]` the op computes
//! `A = softmax_rows(scale · qᵀk)` (`[L,L]`, rows = queries) and `out = v·Aᵀ`.
//! Internally the weights are held key-major (`P = Aᵀ`) so every large gemm
//! operand is read in a packing-friendly layout, and nothing of size `L²` is
//! kept between forward and backward: the weights are recomputed per sample.

use super::{gemm, Real, View};

const BLOCK: usize = 32;

/// `dst[c][r] = src[r][c]` for a row-major `rows x cols` source.
pub(crate) fn transpose_into<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Key-major attention weights `p[j][i] = A[i][j]` of one sample.
fn weights<T: Real>(q: &[T], k: &[T], d: usize, l: usize, scale: T, p: &mut [T], colmax: &mut [T], colsum: &mut [f64]) {
    // p = scale · kᵀ q
    gemm(l, d, l, scale, k, View::transposed(0, l), q, View::row_major(0, l), T::zero(), p, View::row_major(0, l));
    colmax.fill(T::neg_infinity());
    for row in p.chunks_exact(l) {
        for (m, &s) in colmax.iter_mut().zip(row) {
            *m = m.max(s);
        }
    }
    // column sums in double precision keep long rows normalised in f32
    colsum.fill(0.0);
    for row in p.chunks_exact_mut(l) {
        for (s, &m) in row.iter_mut().zip(colmax.iter()) {
            *s = *s - m;
        }
        T::exp_inplace(row);
        for (z, &e) in colsum.iter_mut().zip(row.iter()) {
            *z += e.to_f64().unwrap_or(f64::NAN);
        }
    }
    for (inv, &z) in colmax.iter_mut().zip(colsum.iter()) {
        *inv = T::lit(1.0 / z);
    }
    for row in p.chunks_exact_mut(l) {
        for (s, &z) in row.iter_mut().zip(colmax.iter()) {
            *s *= z;
        }
    }
}

pub(crate) struct Dims {
    pub b: usize,
    pub d: usize,
    pub c: usize,
    pub l: usize,
}

/// Query-major weights `[B,L,L]` (rows sum to one).
pub(crate) fn attention_weights<T: Real>(q: &[T], k: &[T], dims: &Dims, scale: T) -> Vec<T> {
    let Dims { b, d, l, .. } = *dims;
    let mut out = vec![T::zero(); b * l * l];
    let mut p = vec![T::zero(); l * l];
    let (mut m, mut z) = (vec![T::zero(); l], vec![0.0; l]);
    for bi in 0..b {
        let (qs, ks) = (&q[bi * d * l..(bi + 1) * d * l], &k[bi * d * l..(bi + 1) * d * l]);
        weights(qs, ks, d, l, scale, &mut p, &mut m, &mut z);
        transpose_into(&p, l, l, &mut out[bi * l * l..(bi + 1) * l * l]);
    }
    out
}

pub(crate) fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], dims: &Dims, scale: T) -> Vec<T> {
    let Dims { b, d, c, l } = *dims;
    let mut out = vec![T::zero(); b * c * l];
    let mut p = vec![T::zero(); l * l];
    let (mut m, mut z) = (vec![T::zero(); l], vec![0.0; l]);
    for bi in 0..b {
        let (qs, ks) = (&q[bi * d * l..(bi + 1) * d * l], &k[bi * d * l..(bi + 1) * d * l]);
        weights(qs, ks, d, l, scale, &mut p, &mut m, &mut z);
        // out = v · p
        gemm(
            c,
            l,
            l,
            T::one(),
            v,
            View::row_major(bi * c * l, l),
            &p,
            View::row_major(0, l),
            T::zero(),
            &mut out,
            View::row_major(bi * c * l, l),
        );
    }
    out
}

/// Gradients with respect to `q`, `k`, `v`; each is accumulated only if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    dims: &Dims,
    scale: T,
    mut gq: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gv: Option<&mut [T]>,
) {
    let Dims { b, d, c, l } = *dims;
    let mut p = vec![T::zero(); l * l];
    let mut dp = vec![T::zero(); l * l];
    let mut tmp = vec![T::zero(); l * l];
    let (mut m, mut z) = (vec![T::zero(); l], vec![0.0; l]);
    let need_s = gq.is_some() || gk.is_some();
    for bi in 0..b {
        let (qo, vo) = (bi * d * l, bi * c * l);
        weights(&q[qo..qo + d * l], &k[qo..qo + d * l], d, l, scale, &mut p, &mut m, &mut z);
        if let Some(gv) = gv.as_deref_mut() {
            // dv = dout · pᵀ
            transpose_into(&p, l, l, &mut tmp);
            gemm(c, l, l, T::one(), dout, View::row_major(vo, l), &tmp, View::row_major(0, l), T::one(), gv, View::row_major(vo, l));
        }
        if !need_s {
            continue;
        }
        // dp = vᵀ · dout
        gemm(l, c, l, T::one(), v, View::transposed(vo, l), dout, View::row_major(vo, l), T::zero(), &mut dp, View::row_major(0, l));
        // column softmax backward: ds[j][i] = p[j][i] (dp[j][i] - Σ_j' p[j'][i] dp[j'][i])
        m.fill(T::zero());
        for (pr, dr) in p.chunks_exact(l).zip(dp.chunks_exact(l)) {
            for ((s, &pv), &dv) in m.iter_mut().zip(pr).zip(dr) {
                *s += pv * dv;
            }
        }
        for (pr, dr) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
            for ((dv, &pv), &s) in dr.iter_mut().zip(pr).zip(m.iter()) {
                *dv = pv * (*dv - s);
            }
        }
        // dp now holds ds (key-major); s = scale · kᵀ q
        if let Some(gq) = gq.as_deref_mut() {
            gemm(d, l, l, scale, k, View::row_major(qo, l), &dp, View::row_major(0, l), T::one(), gq, View::row_major(qo, l));
        }
        if let Some(gk) = gk.as_deref_mut() {
            transpose_into(&dp, l, l, &mut tmp);
            gemm(d, l, l, scale, q, View::row_major(qo, l), &tmp, View::row_major(0, l), T::one(), gk, View::row_major(qo, l));
        }
    }
}
