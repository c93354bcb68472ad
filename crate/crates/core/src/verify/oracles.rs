//! Straight-line reference implementations, written for clarity over speed.

use crate::tensor::Tensor;

/// Zero-padded cross-correlation with explicit loops over every index.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize, groups: usize) -> Tensor<f64> {
    let (b, _, h, w) = x.dims4().expect("rank 4 input");
    let (cout, cin_g, kh, kw) = k.dims4().expect("rank 4 kernel");
    let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            let grp = o / cout_g;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = y as isize + dy as isize - pad as isize;
                                let ix = xo as isize + dx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let c = grp * cin_g + ci;
                                acc += x.at4(n, c, iy as usize, ix as usize) * k.at4(o, ci, dy, dx);
                            }
                        }
                    }
                    let shape = [b, cout, ho, wo];
                    out.data_mut()[((n * shape[1] + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

/// Step-by-step selective scan for one sequence.
///
/// `x, delta: [L][C]`, `a: [C][N]`, `b, c: [L][N]`, `d: [C]`:
/// `h_i = exp(delta_i a) h_{i-1} + delta_i b_i x_i`, `y_i = c_i . h_i + d x_i`.
pub fn scan(x: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>], delta: &[Vec<f64>], d: &[f64]) -> Vec<Vec<f64>> {
    let ch = d.len();
    let n = a[0].len();
    let mut h = vec![vec![0.0; n]; ch];
    let mut ys = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut y = vec![0.0; ch];
        for k in 0..ch {
            for s in 0..n {
                let abar = (delta[i][k] * a[k][s]).exp();
                let bbar = delta[i][k] * b[i][s];
                h[k][s] = abar * h[k][s] + bbar * x[i][k];
                y[k] += c[i][s] * h[k][s];
            }
            y[k] += d[k] * x[i][k];
        }
        ys.push(y);
    }
    ys
}

/// Haar analysis by separable filtering: filter and decimate along rows,
/// then along columns. Returns `[LL, LH, HL, HH]`, each `[B,C,H/2,W/2]`.
///
/// The first letter is the vertical filter, the second the horizontal one.
pub fn haar_separable(x: &Tensor<f64>) -> [Tensor<f64>; 4] {
    let (b, c, h, w) = x.dims4().expect("rank 4");
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let lo = [r, r];
    let hi = [r, -r];
    let filt = |v: &[f64; 2], hz: &[f64; 2]| {
        let mut out = Tensor::zeros(&[b, c, h / 2, w / 2]);
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut acc = 0.0;
                        for i in 0..2 {
                            for j in 0..2 {
                                acc += v[i] * hz[j] * x.at4(n, ch, 2 * y + i, 2 * xx + j);
                            }
                        }
                        out.data_mut()[((n * c + ch) * (h / 2) + y) * (w / 2) + xx] = acc;
                    }
                }
            }
        }
        out
    };
    [filt(&lo, &lo), filt(&lo, &hi), filt(&hi, &lo), filt(&hi, &hi)]
}

/// Multi-head attention over all tokens of `x: [T][C]` with per-head additive
/// bias `bias[h][i][j]`. Weight matrices are `[C][C]` applied as `x W + b`.
#[allow(clippy::too_many_arguments)]
pub fn dense_attention(
    x: &[Vec<f64>],
    wq: &[Vec<f64>],
    bq: &[f64],
    wk: &[Vec<f64>],
    bk: &[f64],
    wv: &[Vec<f64>],
    bv: &[f64],
    wo: &[Vec<f64>],
    bo: &[f64],
    heads: usize,
    bias: &[Vec<Vec<f64>>],
) -> Vec<Vec<f64>> {
    let t = x.len();
    let c = bq.len();
    let d = c / heads;
    let proj = |w: &[Vec<f64>], b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| (0..c).map(|o| b[o] + (0..c).map(|i| row[i] * w[i][o]).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (proj(wq, bq), proj(wk, bk), proj(wv, bv));
    let mut mixed = vec![vec![0.0; c]; t];
    for hd in 0..heads {
        let cols = hd * d..(hd + 1) * d;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    let dot: f64 = cols.clone().map(|m| q[i][m] * k[j][m]).sum();
                    dot / (d as f64).sqrt() + bias[hd][i][j]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for m in cols.clone() {
                mixed[i][m] = (0..t).map(|j| e[j] / z * v[j][m]).sum();
            }
        }
    }
    mixed
        .iter()
        .map(|row| (0..c).map(|o| bo[o] + (0..c).map(|i| row[i] * wo[i][o]).sum::<f64>()).collect())
        .collect()
}

/// SSIM of two planes computed window by window with an explicit 2-D
/// Gaussian, averaged over valid positions.
pub fn ssim_sliding(a: &[f64], b: &[f64], h: usize, w: usize, size: usize, sigma: f64) -> f64 {
    let mid = (size / 2) as f64;
    let mut win = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let r2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            win[i * size + j] = (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = win[i * size + j];
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
