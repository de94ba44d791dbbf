//! Raw math shared by the autodiff graph and the cache-based inference path.
//! Keeping one set of kernels means the two paths agree bit-for-bit.

use super::scalar::Scalar;

/// `c[m,n] = a[m,k] × b[k,n]`, row-major. i-k-j loop order so the inner loop
/// runs along contiguous rows and vectorizes.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == F::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_il * b_v;
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] × b[k,n]ᵀ`: rows of `a` dotted with rows of `b`.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = F::zero();
            for (&a_v, &b_v) in a_row.iter().zip(b_row) {
                acc += a_v * b_v;
            }
            c[i * k + l] = acc;
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ × b[m,n]`: accumulated outer products.
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == F::zero() {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_il * b_v;
            }
        }
    }
    c
}

pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn silu<F: Scalar>(t: F) -> F {
    t / (F::one() + (-t).exp())
}

pub fn silu_prime<F: Scalar>(t: F) -> F {
    let s = F::one() / (F::one() + (-t).exp());
    s * (F::one() + t * (F::one() - s))
}

pub const RMSNORM_EPS: f64 = 1e-6;

/// Row-wise RMS normalization with an elementwise gain. Returns the output
/// and the per-row `1/rms` needed by the backward pass.
pub fn rmsnorm_rows<F: Scalar>(x: &[F], gain: &[F], rows: usize, d: usize) -> (Vec<F>, Vec<F>) {
    debug_assert_eq!(x.len(), rows * d);
    debug_assert_eq!(gain.len(), d);
    let eps = F::from_f64(RMSNORM_EPS);
    let mut y = vec![F::zero(); rows * d];
    let mut inv_rms = vec![F::zero(); rows];
    let dn = F::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut sumsq = F::zero();
        for &v in xr {
            sumsq += v * v;
        }
        let inv = F::one() / (sumsq / dn + eps).sqrt();
        inv_rms[r] = inv;
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            yr[j] = gain[j] * xr[j] * inv;
        }
    }
    (y, inv_rms)
}

/// Gradient of [`rmsnorm_rows`] with respect to the input and the gain.
pub fn rmsnorm_backward<F: Scalar>(
    x: &[F],
    gain: &[F],
    inv_rms: &[F],
    dy: &[F],
    rows: usize,
    d: usize,
) -> (Vec<F>, Vec<F>) {
    let dn = F::from_f64(d as f64);
    let mut dx = vec![F::zero(); rows * d];
    let mut dgain = vec![F::zero(); d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let inv = inv_rms[r];
        let mut dot = F::zero();
        for j in 0..d {
            dot += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
        let scale = inv * inv * inv * dot / dn;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = dyr[j] * gain[j] * inv - xr[j] * scale;
        }
    }
    (dx, dgain)
}

/// Rotates consecutive pairs within each head by `pos · base^(−2j/head_dim)`.
/// `sign = -1` applies the inverse rotation (used by the backward pass).
pub fn rope_rows<F: Scalar>(
    x: &[F],
    positions: &[usize],
    heads: usize,
    base: f64,
    sign: f64,
) -> Vec<F> {
    let rows = positions.len();
    debug_assert_eq!(x.len() % rows.max(1), 0);
    let d = if rows == 0 { 0 } else { x.len() / rows };
    let head_dim = d / heads.max(1);
    debug_assert_eq!(head_dim % 2, 0, "rope needs an even head dimension");
    let mut y = x.to_vec();
    for (r, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            let off = r * d + h * head_dim;
            for j in 0..head_dim / 2 {
                let angle =
                    sign * pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
                let (sin, cos) = (F::from_f64(angle.sin()), F::from_f64(angle.cos()));
                let a = x[off + 2 * j];
                let b = x[off + 2 * j + 1];
                y[off + 2 * j] = a * cos - b * sin;
                y[off + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    y
}

/// Numerically-stable softmax over a slice, in place. An all-`-inf` slice
/// becomes all zeros (the fully-masked-row convention).
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        for v in row.iter_mut() {
            *v = F::zero();
        }
        return;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn logsumexp<F: Scalar>(row: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return F::neg_infinity();
    }
    let mut sum = F::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Attention masks. `Causal` allows keys at or before the query position,
/// `Full` allows everything, `Explicit` is an arbitrary allow matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttnMask {
    Causal,
    Full,
    Explicit { rows: usize, cols: usize, allow: Vec<bool> },
}

impl AttnMask {
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match self {
            AttnMask::Causal => k <= q,
            AttnMask::Full => true,
            AttnMask::Explicit { cols, allow, .. } => allow[q * cols + k],
        }
    }
}

/// Multi-head softmax attention over full sequences. Returns the output
/// `[rows, d]` and the attention probabilities `[heads, rows, rows]` for the
/// backward pass. Fully-masked query rows produce zero output.
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    rows: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<F>, Vec<F>) {
    let head_dim = d / heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = vec![F::zero(); rows * d];
    let mut probs = vec![F::zero(); heads * rows * rows];
    let mut scores = vec![F::zero(); rows];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..rows {
            let qi = &q[i * d + off..i * d + off + head_dim];
            for (j, score) in scores.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    let kj = &k[j * d + off..j * d + off + head_dim];
                    let mut dot = F::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        dot += a * b;
                    }
                    *score = dot * scale;
                } else {
                    *score = F::neg_infinity();
                }
            }
            softmax_in_place(&mut scores);
            let p_row = &mut probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            p_row.copy_from_slice(&scores);
            let out_row = &mut out[i * d + off..i * d + off + head_dim];
            for (j, &p) in p_row.iter().enumerate() {
                if p == F::zero() {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + head_dim];
                for (o, &vv) in out_row.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to q, k, v.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    d_out: &[F],
    rows: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let head_dim = d / heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut dq = vec![F::zero(); rows * d];
    let mut dk = vec![F::zero(); rows * d];
    let mut dv = vec![F::zero(); rows * d];
    let mut dp = vec![F::zero(); rows];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..rows {
            let p_row = &probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            let do_row = &d_out[i * d + off..i * d + off + head_dim];
            // dP = dO · Vᵀ and dV += Pᵀ · dO, restricted to this head.
            let mut dot_dp_p = F::zero();
            for j in 0..rows {
                let p = p_row[j];
                if p == F::zero() {
                    dp[j] = F::zero();
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + head_dim];
                let mut acc = F::zero();
                for (&g, &vv) in do_row.iter().zip(vj) {
                    acc += g * vv;
                }
                dp[j] = acc;
                dot_dp_p += acc * p;
                let dv_row = &mut dv[j * d + off..j * d + off + head_dim];
                for (dvv, &g) in dv_row.iter_mut().zip(do_row) {
                    *dvv += p * g;
                }
            }
            // dS = P ⊙ (dP − Σ dP⊙P); dQ += dS·K·scale; dK += dSᵀ·Q·scale.
            let qi = &q[i * d + off..i * d + off + head_dim];
            for j in 0..rows {
                let p = p_row[j];
                if p == F::zero() {
                    continue;
                }
                let ds = p * (dp[j] - dot_dp_p) * scale;
                if ds == F::zero() {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + head_dim];
                let dq_row = &mut dq[i * d + off..i * d + off + head_dim];
                for (dqv, &kv) in dq_row.iter_mut().zip(kj) {
                    *dqv += ds * kv;
                }
                let dk_row = &mut dk[j * d + off..j * d + off + head_dim];
                for (dkv, &qv) in dk_row.iter_mut().zip(qi) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
