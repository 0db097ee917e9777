//! Slice-level kernels for the ops whose ndarray formulation is dominated by
//! per-row iterator overhead.

use ndarray::Array2;

use super::tape::softmax_in_place;

pub(crate) const LN_EPS: f64 = 1e-5;

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn standard(a: &Array2<f64>) -> std::borrow::Cow<'_, Array2<f64>> {
    if a.is_standard_layout() {
        std::borrow::Cow::Borrowed(a)
    } else {
        std::borrow::Cow::Owned(a.as_standard_layout().into_owned())
    }
}

pub(crate) fn add_bias(x: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let x = standard(x);
    let b = slice(bias);
    let cols = b.len();
    let mut out = Vec::with_capacity(x.len());
    for row in slice(&x).chunks_exact(cols) {
        out.extend(row.iter().zip(b).map(|(v, b)| v + b));
    }
    Array2::from_shape_vec(x.dim(), out).expect("shape")
}

pub(crate) fn column_sums(g: &Array2<f64>) -> Array2<f64> {
    let g = standard(g);
    let cols = g.ncols();
    let mut out = vec![0.0; cols];
    for row in slice(&g).chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Array2::from_shape_vec((1, cols), out).expect("shape")
}

pub(crate) struct LayerNormOut {
    pub y: Array2<f64>,
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> LayerNormOut {
    let x = standard(x);
    let (rows, cols) = x.dim();
    let (g, b) = (slice(gamma), slice(beta));
    let mut xhat = vec![0.0; rows * cols];
    let mut y = vec![0.0; rows * cols];
    let mut rstd = Vec::with_capacity(rows);
    let n = cols as f64;
    for ((xr, hr), yr) in slice(&x)
        .chunks_exact(cols)
        .zip(xhat.chunks_exact_mut(cols))
        .zip(y.chunks_exact_mut(cols))
    {
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..cols {
            let h = (xr[j] - mean) * rs;
            hr[j] = h;
            yr[j] = h * g[j] + b[j];
        }
    }
    LayerNormOut {
        y: Array2::from_shape_vec((rows, cols), y).expect("shape"),
        xhat: Array2::from_shape_vec((rows, cols), xhat).expect("shape"),
        rstd,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    g: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &[f64],
    gamma: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let g = standard(g);
    let (rows, cols) = g.dim();
    let gm = slice(gamma);
    let n = cols as f64;
    let mut dx = vec![0.0; rows * cols];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for (((gr, hr), dr), &rs) in slice(&g)
        .chunks_exact(cols)
        .zip(slice(xhat).chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
        .zip(rstd)
    {
        let mut sum = 0.0;
        let mut dot = 0.0;
        for j in 0..cols {
            dbeta[j] += gr[j];
            dgamma[j] += gr[j] * hr[j];
            let d = gr[j] * gm[j];
            dxhat[j] = d;
            sum += d;
            dot += d * hr[j];
        }
        let c = rs / n;
        for j in 0..cols {
            dr[j] = c * (n * dxhat[j] - sum - hr[j] * dot);
        }
    }
    (
        Array2::from_shape_vec((rows, cols), dx).expect("shape"),
        Array2::from_shape_vec((1, cols), dgamma).expect("shape"),
        Array2::from_shape_vec((1, cols), dbeta).expect("shape"),
    )
}

/// Attention probabilities are stored flat as `[group][head][query][key]`.
pub(crate) fn attention_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    seq_len: usize,
    heads: usize,
) -> (Array2<f64>, Vec<f64>) {
    let (q, k, v) = (standard(q), standard(k), standard(v));
    let (rows, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (slice(&q), slice(&k), slice(&v));
    let groups = rows / seq_len;
    let mut probs = vec![0.0; groups * heads * seq_len * seq_len];
    let mut out = vec![0.0; rows * d];
    for gi in 0..groups {
        let base = gi * seq_len;
        for h in 0..heads {
            let off = h * dh;
            let pblock = &mut probs[(gi * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
            for i in 0..seq_len {
                let qi = &qs[(base + i) * d + off..][..dh];
                let prow = &mut pblock[i * seq_len..][..seq_len];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &ks[(base + j) * d + off..][..dh];
                    *p = dotp(qi, kj) * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(base + i) * d + off..][..dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &vs[(base + j) * d + off..][..dh];
                    axpy(p, vj, orow);
                }
            }
        }
    }
    (Array2::from_shape_vec((rows, d), out).expect("shape"), probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    g: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[f64],
    seq_len: usize,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (g, q, k, v) = (standard(g), standard(q), standard(k), standard(v));
    let (rows, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (gs, qs, ks, vs) = (slice(&g), slice(&q), slice(&k), slice(&v));
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut ds = vec![0.0; seq_len];
    for gi in 0..rows / seq_len {
        let base = gi * seq_len;
        for h in 0..heads {
            let off = h * dh;
            let pblock = &probs[(gi * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
            for i in 0..seq_len {
                let prow = &pblock[i * seq_len..][..seq_len];
                let gi_row = &gs[(base + i) * d + off..][..dh];
                // dP_ij = g_i · v_j ; dV_j += P_ij g_i
                let mut dot = 0.0;
                for j in 0..seq_len {
                    let vj = &vs[(base + j) * d + off..][..dh];
                    let dp = dotp(gi_row, vj);
                    ds[j] = dp;
                    dot += dp * prow[j];
                    axpy(prow[j], gi_row, &mut dv[(base + j) * d + off..][..dh]);
                }
                let qi = &qs[(base + i) * d + off..][..dh];
                for j in 0..seq_len {
                    let s = prow[j] * (ds[j] - dot) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &ks[(base + j) * d + off..][..dh];
                    axpy(s, kj, &mut dq[(base + i) * d + off..][..dh]);
                    axpy(s, qi, &mut dk[(base + j) * d + off..][..dh]);
                }
            }
        }
    }
    (
        Array2::from_shape_vec((rows, d), dq).expect("shape"),
        Array2::from_shape_vec((rows, d), dk).expect("shape"),
        Array2::from_shape_vec((rows, d), dv).expect("shape"),
    )
}

#[inline]
fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}
