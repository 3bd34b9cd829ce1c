//! Brute-force references shared by the oracle tests and the acceptance run.

use doremi::tensor::Tensor;

/// Log-sum-exp form: `p_j = exp(l_j − lse)`, `H = lse − Σ p_j l_j`.
pub struct EdaOracle {
    pub p: Vec<f64>,
    pub h: f64,
    pub k: usize,
    pub active: Vec<usize>,
}

pub fn eda(logits: &[f64], k_min: usize, k_max: usize) -> EdaOracle {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let h = lse - p.iter().zip(logits).map(|(a, l)| a * l).sum::<f64>();
    let kx = logits.len();
    let frac = h / (kx as f64).ln();
    let span = (k_max - k_min) as f64;
    let mut k = k_min;
    // smallest integer at or above k_min + frac·span, found by counting up
    while (k as f64) < k_min as f64 + frac * span && k < k_max {
        k += 1;
    }
    let mut order: Vec<usize> = (0..kx).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    EdaOracle { p, h, k, active: order }
}

/// Dense `side³` volume convolved everywhere, then read back at occupied sites.
pub fn dense_conv(side: usize, coords: &[[i32; 3]], x: &Tensor, w: &Tensor, b: &[f64], extent: usize) -> Tensor {
    let (din, dout) = (x.cols(), w.cols());
    let r = (extent / 2) as i32;
    let s = side as i32;
    let at = |c: [i32; 3]| ((c[0] * s + c[1]) * s + c[2]) as usize;
    let mut vol = vec![0.0; side.pow(3) * din];
    for (i, &c) in coords.iter().enumerate() {
        vol[at(c) * din..(at(c) + 1) * din].copy_from_slice(x.row(i));
    }
    let mut out = Tensor::zeros(&[coords.len(), dout]);
    for (i, &c) in coords.iter().enumerate() {
        let y = out.row_mut(i);
        y.copy_from_slice(b);
        let mut o = 0;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if q.iter().all(|&v| (0..s).contains(&v)) {
                        let v = &vol[at(q) * din..(at(q) + 1) * din];
                        for (a, va) in v.iter().enumerate() {
                            for (col, yo) in y.iter_mut().enumerate() {
                                *yo += va * w.get2(o * din + a, col);
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    out
}
