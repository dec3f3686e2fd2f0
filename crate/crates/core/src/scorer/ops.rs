//! Dense row-major kernels with their backward passes.

use rand::Rng as _;

use crate::seed::Rng;

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Eight independent lanes so the loop vectorizes; summation order is fixed.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f32>() + tail
}

const TR: usize = 4;
const TC: usize = 8;

/// `c[m, n] += a[m, k] @ b[k, n]`, in 4x8 register tiles.
fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + TR <= m {
        let rows: [&[f32]; TR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + TC <= n {
            let mut acc = [[0.0f32; TC]; TR];
            for p in 0..k {
                let bp: &[f32; TC] = b[p * n + j..p * n + j + TC].try_into().unwrap();
                for r in 0..TR {
                    let av = rows[r][p];
                    for t in 0..TC {
                        acc[r][t] += av * bp[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                axpy(1.0, row, &mut c[(i + r) * n + j..(i + r) * n + j + TC]);
            }
            j += TC;
        }
        for r in 0..TR {
            for jj in j..n {
                c[(i + r) * n + jj] += (0..k).map(|p| rows[r][p] * b[p * n + jj]).sum::<f32>();
            }
        }
        i += TR;
    }
    for r in i..m {
        let cr = &mut c[r * n..(r + 1) * n];
        for (p, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], cr);
        }
    }
}

/// `c[m, n] += a[k, m]^T @ b[k, n]`.
fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], k: usize, m: usize, n: usize) {
    let mut p = 0;
    while p + TR <= m {
        let mut j = 0;
        while j + TC <= n {
            let mut acc = [[0.0f32; TC]; TR];
            for i in 0..k {
                let ap: &[f32; TR] = a[i * m + p..i * m + p + TR].try_into().unwrap();
                let bi: &[f32; TC] = b[i * n + j..i * n + j + TC].try_into().unwrap();
                for r in 0..TR {
                    for t in 0..TC {
                        acc[r][t] += ap[r] * bi[t];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                axpy(1.0, row, &mut c[(p + r) * n + j..(p + r) * n + j + TC]);
            }
            j += TC;
        }
        for r in p..p + TR {
            for jj in j..n {
                c[r * n + jj] += (0..k).map(|i| a[i * m + r] * b[i * n + jj]).sum::<f32>();
            }
        }
        p += TR;
    }
    for r in p..m {
        let cr = &mut c[r * n..(r + 1) * n];
        for i in 0..k {
            axpy(a[i * m + r], &b[i * n..(i + 1) * n], cr);
        }
    }
}

fn transpose(w: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; w.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// `x[rows, inp] @ w[inp, out] + b`.
pub(crate) fn linear(x: &[f32], rows: usize, w: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let inp = w.len() / out;
    debug_assert_eq!(x.len(), rows * inp);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm_nn(x, w, &mut y, rows, inp, out);
    y
}

/// `dx += dy @ w^T`.
pub(crate) fn linear_input_grad(dy: &[f32], rows: usize, w: &[f32], out: usize, dx: &mut [f32]) {
    let inp = w.len() / out;
    if rows < TR {
        for i in 0..rows {
            let dyi = &dy[i * out..(i + 1) * out];
            for p in 0..inp {
                dx[i * inp + p] += dot(dyi, &w[p * out..(p + 1) * out]);
            }
        }
        return;
    }
    gemm_nn(dy, &transpose(w, inp, out), dx, rows, out, inp);
}

/// `dw += x^T @ dy`, `db += sum_rows(dy)`.
pub(crate) fn linear_param_grad(
    x: &[f32],
    dy: &[f32],
    rows: usize,
    out: usize,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let inp = dw.len() / out;
    for i in 0..rows {
        axpy(1.0, &dy[i * out..(i + 1) * out], db);
    }
    gemm_tn(&x[..rows * inp], &dy[..rows * out], dw, rows, inp, out);
}

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn layer_norm(x: &[f32], d: usize, g: &[f32], b: &[f32]) -> (Vec<f32>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let mean = xi.iter().sum::<f32>() / d as f32;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for k in 0..d {
            let h = (xi[k] - mean) * inv;
            xhat[i * d + k] = h;
            y[i * d + k] = h * g[k] + b[k];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates `dg`, `db`.
pub(crate) fn layer_norm_backward(
    dy: &[f32],
    cache: &LnCache,
    g: &[f32],
    dg: &mut [f32],
    db: &mut [f32],
) -> Vec<f32> {
    let d = g.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for k in 0..d {
            dg[k] += dyi[k] * xh[k];
            db[k] += dyi[k];
            dxhat[k] = dyi[k] * g[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f32;
        let inv = cache.inv_std[i];
        for k in 0..d {
            dx[i * d + k] = inv * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Inverted-dropout mask: each entry is `0` or `1 / (1 - p)`.
pub(crate) fn dropout_mask(len: usize, p: f32, rng: &mut Rng) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn mul_in_place(x: &mut [f32], mask: &[f32]) {
    for (a, m) in x.iter_mut().zip(mask) {
        *a *= m;
    }
}
