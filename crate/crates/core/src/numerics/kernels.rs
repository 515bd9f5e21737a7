//! Dense loops shared by forward and backward passes. All matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `a[k,m]ᵀ · b[k,n]`, accumulated into `out[m,n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place max-subtracted softmax of one contiguous row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Grouped multi-head attention over contiguous token groups.
///
/// Rows `[g*group, (g+1)*group)` of `q`, `k`, `v` (each `[n, d]`) attend only to each
/// other. `masks[g]`, when present, is an additive `group × group` bias. Returns the
/// `[n, d]` output and the attention probabilities laid out `[group_idx][head][i][j]`.
pub(crate) fn grouped_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttentionLayout,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let group = layout.group;
    let n_groups = layout.n_groups();
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut out = vec![0.0; layout.tokens * d];
    let mut probs = vec![0.0; n_groups * heads * group * group];
    for g in 0..n_groups {
        let base = g * group;
        let mask = layout.masks.get(g).and_then(|m| m.as_deref());
        for h in 0..heads {
            let off = h * dk;
            let p_base = (g * heads + h) * group * group;
            for i in 0..group {
                let qi = &q[(base + i) * d + off..(base + i) * d + off + dk];
                let p_row = &mut probs[p_base + i * group..p_base + (i + 1) * group];
                for (j, p) in p_row.iter_mut().enumerate() {
                    let kj = &k[(base + j) * d + off..(base + j) * d + off + dk];
                    *p = dot(qi, kj) * scale + mask.map_or(0.0, |m| m[i * group + j]);
                }
                softmax_in_place(p_row);
                let o_row = &mut out[(base + i) * d + off..(base + i) * d + off + dk];
                for (j, &p) in p_row.iter().enumerate() {
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dk];
                    for (o, x) in o_row.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`grouped_attention`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grouped_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    layout: &AttentionLayout,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let group = layout.group;
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let n = layout.tokens;
    let (mut dq, mut dk_, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
    let mut d_scores = vec![0.0; group];
    for g in 0..layout.n_groups() {
        let base = g * group;
        for h in 0..heads {
            let off = h * dk;
            let p_base = (g * heads + h) * group * group;
            for i in 0..group {
                let p_row = &probs[p_base + i * group..p_base + (i + 1) * group];
                let go = &grad_out[(base + i) * d + off..(base + i) * d + off + dk];
                // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                let mut weighted = 0.0;
                for j in 0..group {
                    let row_j = (base + j) * d + off;
                    let dp = dot(go, &v[row_j..row_j + dk]);
                    d_scores[j] = dp;
                    weighted += dp * p_row[j];
                    let p = p_row[j];
                    for (dvx, gx) in dv[row_j..row_j + dk].iter_mut().zip(go) {
                        *dvx += p * gx;
                    }
                }
                let row_i = (base + i) * d + off;
                for j in 0..group {
                    let ds = p_row[j] * (d_scores[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let row_j = (base + j) * d + off;
                    for c in 0..dk {
                        dq[row_i + c] += ds * k[row_j + c];
                        dk_[row_j + c] += ds * q[row_i + c];
                    }
                }
            }
        }
    }
    (dq, dk_, dv)
}

/// Partition of `tokens` rows into equal contiguous attention groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub tokens: usize,
    pub group: usize,
    /// One optional additive `group × group` mask per group; empty means no masking.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl AttentionLayout {
    /// All tokens in a single group.
    pub fn global(tokens: usize) -> Self {
        AttentionLayout {
            tokens,
            group: tokens,
            masks: Vec::new(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.tokens.checked_div(self.group).unwrap_or(0)
    }
}
