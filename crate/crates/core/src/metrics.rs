//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB. Identical images give `+∞`.
pub fn psnr(x_hat: &Tensor, x_ref: &Tensor, peak: f64) -> Result<f64> {
    if x_hat.shape() != x_ref.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: x_hat.shape().to_vec(),
            rhs: x_ref.shape().to_vec(),
        });
    }
    if !(peak > 0.0) {
        return Err(Error::config("psnr peak must be positive"));
    }
    Ok(psnr_slices(x_hat.data(), x_ref.data(), peak))
}

fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Transformations under which a reconstruction is considered equivalent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityGroup {
    /// All cyclic shifts.
    pub shifts: bool,
    /// Vertical, horizontal and combined flips.
    pub flips: bool,
    /// Global sign.
    pub sign: bool,
}

impl AmbiguityGroup {
    pub const IDENTITY: Self = Self {
        shifts: false,
        flips: false,
        sign: false,
    };

    pub const FULL: Self = Self {
        shifts: true,
        flips: true,
        sign: true,
    };
}

/// Maximum PSNR of `x_hat` over its orbit under `group`.
pub fn registered_psnr(x_hat: &Tensor, x_ref: &Tensor, group: AmbiguityGroup, peak: f64) -> Result<f64> {
    let (h, w) = match (x_hat.shape(), x_ref.shape()) {
        ([h, w], [h2, w2]) if h == h2 && w == w2 => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "registered_psnr",
                lhs: x_hat.shape().to_vec(),
                rhs: x_ref.shape().to_vec(),
            })
        }
    };
    if !(peak > 0.0) {
        return Err(Error::config("psnr peak must be positive"));
    }
    let src = x_hat.data();
    let (sh, sw) = if group.shifts { (h, w) } else { (1, 1) };
    let flips: &[(bool, bool)] = if group.flips {
        &[(false, false), (true, false), (false, true), (true, true)]
    } else {
        &[(false, false)]
    };
    let signs: &[f64] = if group.sign { &[1.0, -1.0] } else { &[1.0] };
    let mut best = f64::NEG_INFINITY;
    let mut buf = vec![0.0; h * w];
    for &(fv, fh) in flips {
        for dp in 0..sh {
            for dq in 0..sw {
                for p in 0..h {
                    let sp = if fv { h - 1 - p } else { p };
                    let tp = (sp + dp) % h;
                    for q in 0..w {
                        let sq = if fh { w - 1 - q } else { q };
                        buf[tp * w + (sq + dq) % w] = src[p * w + q];
                    }
                }
                for &s in signs {
                    let v = if s == 1.0 {
                        psnr_slices(&buf, x_ref.data(), peak)
                    } else {
                        let neg: Vec<f64> = buf.iter().map(|v| -v).collect();
                        psnr_slices(&neg, x_ref.data(), peak)
                    };
                    best = best.max(v);
                }
            }
        }
    }
    Ok(best)
}
