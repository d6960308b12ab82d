//! Dense unitary DFTs for desk-scale images.

use std::f64::consts::PI;

/// Signed frequency of DFT bin `k` out of `n`.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Cosine and sine tables `cos(2π·f·p/n)`, `sin(2π·f·p/n)` as `rows × cols`
/// matrices indexed `[f, p]`, for `f < rows` and `p < cols`.
pub fn dft_tables(rows: usize, cols: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; rows * cols];
    let mut s = vec![0.0; rows * cols];
    for f in 0..rows {
        for p in 0..cols {
            // Reduce the phase index first to keep the angle small.
            let a = 2.0 * PI * ((f * p) % n) as f64 / n as f64;
            c[f * cols + p] = a.cos();
            s[f * cols + p] = a.sin();
        }
    }
    (c, s)
}

/// Unitary 2D DFT of an `h × w` complex array (`sign = -1` forward, `+1` inverse).
pub fn dft2(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let (ch, sh) = dft_tables(h, h, h);
    let (cw, sw) = dft_tables(w, w, w);
    // Along rows (the w axis).
    let mut tr = vec![0.0; h * w];
    let mut ti = vec![0.0; h * w];
    for p in 0..h {
        for v in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for q in 0..w {
                let (c, s) = (cw[v * w + q], sign * sw[v * w + q]);
                let (xr, xi) = (re[p * w + q], im[p * w + q]);
                ar += xr * c - xi * s;
                ai += xr * s + xi * c;
            }
            tr[p * w + v] = ar;
            ti[p * w + v] = ai;
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut or = vec![0.0; h * w];
    let mut oi = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for p in 0..h {
                let (c, s) = (ch[u * h + p], sign * sh[u * h + p]);
                let (xr, xi) = (tr[p * w + v], ti[p * w + v]);
                ar += xr * c - xi * s;
                ai += xr * s + xi * c;
            }
            or[u * w + v] = ar * norm;
            oi[u * w + v] = ai * norm;
        }
    }
    (or, oi)
}
