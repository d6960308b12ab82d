//! Synthetic image collections and the ring-profile unwrap.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// `moving-disk`, `crescent-ring` or `two-class-digits`.
    pub name: String,
    pub count: usize,
    /// `(H, W)`.
    pub size: (usize, usize),
    /// For `two-class-digits`: the class of every image, or alternating if unset.
    #[serde(default)]
    pub class: Option<usize>,
}

pub const DATASETS: [&str; 3] = ["moving-disk", "crescent-ring", "two-class-digits"];

fn soft_step(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Deterministic images for `spec`, all strictly inside `(0, 1)`.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<Tensor>> {
    let (h, w) = spec.size;
    if h < 4 || w < 4 {
        return Err(Error::config("synthetic images must be at least 4×4"));
    }
    let mut r = rng::seeded(seed);
    match spec.name.as_str() {
        "moving-disk" => Ok(moving_disk(spec.count, h, w, &mut r)),
        "crescent-ring" => Ok(crescent_ring(spec.count, h, w, &mut r)),
        "two-class-digits" => {
            if matches!(spec.class, Some(c) if c > 1) {
                return Err(Error::config("two-class-digits has classes 0 and 1"));
            }
            Ok((0..spec.count)
                .map(|i| digit(spec.class.unwrap_or(i % 2), h, w, &mut r))
                .collect())
        }
        other => Err(Error::config(format!(
            "unknown dataset {other:?}; expected one of {DATASETS:?}"
        ))),
    }
}

fn image(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = (0..h * w)
        .map(|i| f((i / w) as f64, (i % w) as f64).clamp(1e-3, 1.0 - 1e-3))
        .collect();
    Tensor::from_parts(vec![h, w], data)
}

/// Angular step of the moving disk per frame.
pub fn moving_disk_step(count: usize) -> f64 {
    PI / count.max(1) as f64
}

fn moving_disk(count: usize, h: usize, w: usize, r: &mut Rng) -> Vec<Tensor> {
    let s = h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let start = rng::uniform(r, 0.0, 2.0 * PI);
    let orbit = 0.25 * s;
    let radius = 0.15 * s;
    (0..count)
        .map(|t| {
            let a = start + t as f64 * moving_disk_step(count);
            let (py, px) = (cy + orbit * a.sin(), cx + orbit * a.cos());
            image(h, w, |p, q| {
                let d = ((p - py).powi(2) + (q - px).powi(2)).sqrt();
                0.05 + 0.85 * soft_step((radius - d) / 0.7)
            })
        })
        .collect()
}

fn crescent_ring(count: usize, h: usize, w: usize, r: &mut Rng) -> Vec<Tensor> {
    let s = h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = s * rng::uniform(r, 0.26, 0.3);
    let width = s * 0.06;
    let start = rng::uniform(r, 0.0, 2.0 * PI);
    let step = rng::uniform(r, 0.6, 1.0) * PI / count.max(1) as f64;
    let contrast = rng::uniform(r, 0.6, 0.8);
    (0..count)
        .map(|t| {
            let spot = start + t as f64 * step;
            // The ring slowly breathes in radius as the spot rotates.
            let rt = radius * (1.0 + 0.03 * (2.0 * PI * t as f64 / count.max(1) as f64).sin());
            image(h, w, |p, q| {
                let (dy, dx) = (p - cy, q - cx);
                let d = (dy * dy + dx * dx).sqrt();
                let phi = dy.atan2(dx);
                let ring = (-(d - rt).powi(2) / (2.0 * width * width)).exp();
                let bright = 1.0 - contrast + contrast * 0.5 * (1.0 + (phi - spot).cos());
                0.02 + 0.9 * ring * bright
            })
        })
        .collect()
}

/// Class 0: an elliptical loop. Class 1: a slanted stroke. Both jittered.
fn digit(class: usize, h: usize, w: usize, r: &mut Rng) -> Tensor {
    let s = h.min(w) as f64;
    let cy = (h as f64 - 1.0) / 2.0 + rng::uniform(r, -0.08, 0.08) * s;
    let cx = (w as f64 - 1.0) / 2.0 + rng::uniform(r, -0.08, 0.08) * s;
    let thick = s * rng::uniform(r, 0.045, 0.065);
    let tilt = rng::uniform(r, -0.3, 0.3);
    let level = rng::uniform(r, 0.75, 0.9);
    if class == 0 {
        let (ay, ax) = (s * rng::uniform(r, 0.3, 0.36), s * rng::uniform(r, 0.2, 0.25));
        image(h, w, |p, q| {
            let (dy, dx) = (p - cy, q - cx);
            let (u, v) = (dy * tilt.cos() + dx * tilt.sin(), -dy * tilt.sin() + dx * tilt.cos());
            let rad = ((u / ay).powi(2) + (v / ax).powi(2)).sqrt();
            let dist = (rad - 1.0).abs() * ay.min(ax);
            0.05 + level * (-(dist * dist) / (2.0 * thick * thick)).exp()
        })
    } else {
        let half = s * rng::uniform(r, 0.3, 0.36);
        image(h, w, |p, q| {
            let (dy, dx) = (p - cy, q - cx);
            let (u, v) = (dy * tilt.cos() + dx * tilt.sin(), -dy * tilt.sin() + dx * tilt.cos());
            let along = (u.abs() - half).max(0.0);
            let dist2 = v * v + along * along;
            0.05 + level * (-dist2 / (2.0 * thick * thick)).exp()
        })
    }
}

fn bilinear(x: &Tensor, p: f64, q: f64) -> f64 {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (p0, q0) = ((p.floor() as usize).min(h - 1), (q.floor() as usize).min(w - 1));
    let (p1, q1) = ((p0 + 1).min(h - 1), (q0 + 1).min(w - 1));
    let (fp, fq) = (p - p0 as f64, q - q0 as f64);
    let top = x.at2(p0, q0) * (1.0 - fq) + x.at2(p0, q1) * fq;
    let bottom = x.at2(p1, q0) * (1.0 - fq) + x.at2(p1, q1) * fq;
    top * (1.0 - fp) + bottom * fp
}

/// Bilinear samples at `n` equispaced angles on the circle of `radius`
/// around `center = (row, col)`. Angle 0 points along increasing columns.
pub fn ring_profile(x: &Tensor, center: (f64, f64), radius: f64, n: usize) -> Result<Vec<f64>> {
    let (h, w) = match x.shape() {
        [h, w] => (*h as f64, *w as f64),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "ring profile needs an [H, W] image".into(),
            })
        }
    };
    let (cy, cx) = center;
    if !(radius >= 0.0) || cy - radius < 0.0 || cx - radius < 0.0 || cy + radius > h - 1.0 || cx + radius > w - 1.0 {
        return Err(Error::config(format!(
            "ring at {center:?} with radius {radius} leaves the image"
        )));
    }
    if n == 0 {
        return Err(Error::config("ring profile needs at least one angle"));
    }
    Ok((0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            bilinear(x, cy + radius * a.sin(), cx + radius * a.cos())
        })
        .collect())
}

/// Stacks per-frame ring profiles into an `[frames, n]` space-time image.
pub fn unwrap_ring(frames: &[Tensor], center: (f64, f64), radius: f64, n: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * n);
    for f in frames {
        data.extend(ring_profile(f, center, radius, n)?);
    }
    Tensor::new(vec![frames.len(), n], data)
}
