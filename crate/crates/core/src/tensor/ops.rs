//! Slice-level kernels shared by the graph and by non-differentiable callers.

use std::f64::consts::FRAC_1_SQRT_2;

/// `out[n×p] += a[n×m] · b[m×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×m] += g[n×p] · b[m×p]ᵀ`
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let grow = &g[i * p..(i + 1) * p];
        let orow = &mut out[i * m..(i + 1) * m];
        for (k, o) in orow.iter_mut().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m×p] += a[n×m]ᵀ · g[n×p]`
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let grow = &g[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn erf_gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Max-shifted softmax of one row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}
