//! Slice-level kernels shared by the graph ops and by non-differentiable callers.

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one contiguous row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Saved state of a layer-norm forward: normalized rows and reciprocal std per row.
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Multi-head scaled dot-product attention over `batch` independent sequences of
/// length `seq`. Inputs are `[batch·seq, heads·head_dim]`. `key_mask[b·seq + j]`
/// false removes key `j` of sequence `b` from every query's support.
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn prob_index(&self, b: usize, h: usize, i: usize, j: usize) -> usize {
        ((b * self.heads + h) * self.seq + i) * self.seq + j
    }
}

/// Returns the attention output and the probability tensor `[batch, heads, seq, seq]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    key_mask: Option<&[bool]>,
    s: &AttentionShape,
) -> (Vec<f64>, Vec<f64>) {
    let width = s.width();
    let scale = 1.0 / (s.head_dim as f64).sqrt();
    let mut probs = vec![0.0; s.batch * s.heads * s.seq * s.seq];
    let mut out = vec![0.0; q.len()];
    let mut scores = vec![0.0; s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * s.head_dim;
            for i in 0..s.seq {
                let qi = &q[(b * s.seq + i) * width + off..][..s.head_dim];
                for (j, score) in scores.iter_mut().enumerate() {
                    let allowed = key_mask.map_or(true, |m| m[b * s.seq + j]);
                    *score = if allowed {
                        let kj = &k[(b * s.seq + j) * width + off..][..s.head_dim];
                        dot(qi, kj) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_row(&mut scores);
                let base = s.prob_index(b, h, i, 0);
                probs[base..base + s.seq].copy_from_slice(&scores);
                let orow = &mut out[(b * s.seq + i) * width + off..][..s.head_dim];
                for (j, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[(b * s.seq + j) * width + off..][..s.head_dim];
                    for (o, vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates gradients of `q`, `k`, `v` given the upstream gradient `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: &AttentionShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let width = s.width();
    let scale = 1.0 / (s.head_dim as f64).sqrt();
    let mut dp = vec![0.0; s.seq];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * s.head_dim;
            for i in 0..s.seq {
                let row = (b * s.seq + i) * width + off;
                let doi = &dout[row..row + s.head_dim];
                let base = s.prob_index(b, h, i, 0);
                let p = &probs[base..base + s.seq];
                for j in 0..s.seq {
                    let vrow = (b * s.seq + j) * width + off;
                    dp[j] = if p[j] == 0.0 {
                        0.0
                    } else {
                        dot(doi, &v[vrow..vrow + s.head_dim])
                    };
                    if p[j] != 0.0 {
                        for (g, d) in dv[vrow..vrow + s.head_dim].iter_mut().zip(doi) {
                            *g += p[j] * d;
                        }
                    }
                }
                let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..s.seq {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let krow = (b * s.seq + j) * width + off;
                    for t in 0..s.head_dim {
                        dq[row + t] += ds * k[krow + t];
                        dk[krow + t] += ds * q[row + t];
                    }
                }
            }
        }
    }
}
