//! Measurement operators `f` and the Gaussian noise model `y = f(x) + η`.
//!
//! Complex measurements are stored as interleaved `(re, im)` pairs and every
//! transform uses unitary normalization, so a full-grid visibility operator
//! satisfies `AᴴA = I`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dft2, dft_tables, signed_freq};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing floor δ in `|v| = sqrt(re² + im² + δ²)`.
pub const MODULUS_DELTA: f64 = 1e-8;

/// Which measurement operator is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ForwardKind {
    Denoise,
    /// Visibilities at `(u, v)` points in cycles per field of view.
    InterferometricCs { uv: Vec<(f64, f64)> },
    /// `A x` with complex `A` of `rows` iid `CN(0, 1/rows)` entries.
    GaussianCs { seed: u64, rows: usize },
    /// `|DFT|` of the image zero-padded ×2 per axis.
    FourierPhaseRetrieval,
    /// `|A x|` with `A` as in [`ForwardKind::GaussianCs`].
    GaussianPhaseRetrieval { seed: u64, rows: usize },
}

impl ForwardKind {
    pub fn name(&self) -> &'static str {
        match self {
            ForwardKind::Denoise => "denoise",
            ForwardKind::InterferometricCs { .. } => "interferometric-cs",
            ForwardKind::GaussianCs { .. } => "gaussian-cs",
            ForwardKind::FourierPhaseRetrieval => "fourier-phase-retrieval",
            ForwardKind::GaussianPhaseRetrieval { .. } => "gaussian-phase-retrieval",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            ForwardKind::Denoise | ForwardKind::InterferometricCs { .. } | ForwardKind::GaussianCs { .. }
        )
    }

    pub fn is_phase_retrieval(&self) -> bool {
        matches!(
            self,
            ForwardKind::FourierPhaseRetrieval | ForwardKind::GaussianPhaseRetrieval { .. }
        )
    }
}

/// Forward model description: operator kind, noise level and image geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardModel {
    #[serde(flatten)]
    pub kind: ForwardKind,
    /// Noise standard deviation per real measurement component.
    pub sigma: f64,
    /// `(H, W)`.
    pub geometry: (usize, usize),
}

impl ForwardModel {
    pub fn new(kind: ForwardKind, sigma: f64, geometry: (usize, usize)) -> Result<Self> {
        let m = Self {
            kind,
            sigma,
            geometry,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        let (h, w) = self.geometry;
        if h == 0 || w == 0 {
            return Err(Error::config("image geometry must be positive"));
        }
        match &self.kind {
            ForwardKind::InterferometricCs { uv } => {
                if uv.is_empty() {
                    return Err(Error::config("uv coverage is empty"));
                }
                for &(u, v) in uv {
                    if u.abs() > h as f64 / 2.0 || v.abs() > w as f64 / 2.0 {
                        return Err(Error::config(format!(
                            "uv point ({u}, {v}) outside the Nyquist square"
                        )));
                    }
                }
            }
            ForwardKind::GaussianCs { rows, .. } | ForwardKind::GaussianPhaseRetrieval { rows, .. }
                if *rows == 0 => {
                    return Err(Error::config("measurement rows must be positive"));
                }
            _ => {}
        }
        Ok(())
    }

    /// Number of real measurement components.
    pub fn measurement_len(&self) -> usize {
        let (h, w) = self.geometry;
        match &self.kind {
            ForwardKind::Denoise => h * w,
            ForwardKind::InterferometricCs { uv } => 2 * uv.len(),
            ForwardKind::GaussianCs { rows, .. } => 2 * rows,
            ForwardKind::FourierPhaseRetrieval => 4 * h * w,
            ForwardKind::GaussianPhaseRetrieval { rows, .. } => *rows,
        }
    }

    /// Materializes the operator.
    pub fn build(&self) -> Result<ForwardOperator> {
        self.validate()?;
        let (h, w) = self.geometry;
        let n = h * w;
        let inner = match &self.kind {
            ForwardKind::Denoise => Inner::Identity,
            ForwardKind::InterferometricCs { uv } => {
                let norm = 1.0 / (n as f64).sqrt();
                let mut m = vec![0.0; 2 * uv.len() * n];
                for (j, &(u, v)) in uv.iter().enumerate() {
                    for p in 0..h {
                        for q in 0..w {
                            let a = -2.0 * PI * (u * p as f64 / h as f64 + v * q as f64 / w as f64);
                            m[(2 * j) * n + p * w + q] = a.cos() * norm;
                            m[(2 * j + 1) * n + p * w + q] = a.sin() * norm;
                        }
                    }
                }
                Inner::Linear(Arc::new(Tensor::from_parts(vec![2 * uv.len(), n], m)))
            }
            ForwardKind::GaussianCs { seed, rows } => {
                let (re, im) = gaussian_matrix(*seed, *rows, n);
                let mut m = vec![0.0; 2 * rows * n];
                for j in 0..*rows {
                    m[2 * j * n..(2 * j + 1) * n].copy_from_slice(&re[j * n..(j + 1) * n]);
                    m[(2 * j + 1) * n..(2 * j + 2) * n].copy_from_slice(&im[j * n..(j + 1) * n]);
                }
                Inner::Linear(Arc::new(Tensor::from_parts(vec![2 * rows, n], m)))
            }
            ForwardKind::GaussianPhaseRetrieval { seed, rows } => {
                let (re, im) = gaussian_matrix(*seed, *rows, n);
                Inner::Modulus {
                    re: Arc::new(Tensor::from_parts(vec![*rows, n], re)),
                    im: Arc::new(Tensor::from_parts(vec![*rows, n], im)),
                }
            }
            ForwardKind::FourierPhaseRetrieval => {
                let (ch, sh) = dft_tables(2 * h, h, 2 * h);
                let (cw, sw) = dft_tables(2 * w, w, 2 * w);
                let t = |shape: Vec<usize>, d: Vec<f64>| Arc::new(Tensor::from_parts(shape, d));
                Inner::Fourier {
                    cos_h: t(vec![2 * h, h], ch),
                    sin_h: t(vec![2 * h, h], sh),
                    cos_w: t(vec![2 * w, w], cw),
                    sin_w: t(vec![2 * w, w], sw),
                }
            }
        };
        Ok(ForwardOperator {
            model: self.clone(),
            inner,
        })
    }
}

fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng::seeded(seed);
    let s = (0.5 / rows as f64).sqrt();
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for i in 0..rows * cols {
        let pair = rng::standard_normal(&mut rng, 2);
        re[i] = s * pair[0];
        im[i] = s * pair[1];
    }
    (re, im)
}

enum Inner {
    Identity,
    /// Real matrix with interleaved (re, im) rows.
    Linear(Arc<Tensor>),
    Modulus {
        re: Arc<Tensor>,
        im: Arc<Tensor>,
    },
    Fourier {
        cos_h: Arc<Tensor>,
        sin_h: Arc<Tensor>,
        cos_w: Arc<Tensor>,
        sin_w: Arc<Tensor>,
    },
}

/// A [`ForwardModel`] with its matrices built. Immutable and shareable.
pub struct ForwardOperator {
    model: ForwardModel,
    inner: Inner,
}

fn modulus<'t>(re: Var<'t>, im: Var<'t>) -> Result<Var<'t>> {
    re.square()?
        .add(im.square()?)?
        .shift(MODULUS_DELTA * MODULUS_DELTA)?
        .sqrt()
}

impl ForwardOperator {
    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn sigma(&self) -> f64 {
        self.model.sigma
    }

    pub fn measurement_len(&self) -> usize {
        self.model.measurement_len()
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.model.geometry;
        if shape != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "forward model geometry",
                lhs: vec![h, w],
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Noiseless `f(x)` for an `[H, W]` image variable, differentiable in `x`.
    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&x.shape())?;
        let (h, w) = self.model.geometry;
        let flat = x.reshape(vec![h * w])?;
        match &self.inner {
            Inner::Identity => Ok(flat),
            Inner::Linear(m) => flat.const_matmul(m),
            Inner::Modulus { re, im } => modulus(flat.const_matmul(re)?, flat.const_matmul(im)?),
            Inner::Fourier {
                cos_h,
                sin_h,
                cos_w,
                sin_w,
            } => {
                // Y = F_H X F_Wᵀ, evaluated through transposes so that every
                // product is a left multiplication by a constant.
                let t1 = x.const_matmul(cos_h)?.transpose()?;
                let t2 = x.const_matmul(sin_h)?.transpose()?;
                let re_t = t1.const_matmul(cos_w)?.sub(t2.const_matmul(sin_w)?)?;
                let im_t = t2.const_matmul(cos_w)?.add(t1.const_matmul(sin_w)?)?;
                let norm = 1.0 / ((4 * h * w) as f64).sqrt();
                // The sign of the imaginary part does not affect the modulus.
                modulus(re_t, im_t)?
                    .transpose()?
                    .scale(norm)?
                    .reshape(vec![4 * h * w])
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.apply_var(tape.constant(x.clone()))?.value())
    }

    /// Real part of `Aᴴ y` as an `[H, W]` image, for linear kinds.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (h, w) = self.model.geometry;
        if y.numel() != self.measurement_len() {
            return Err(Error::ShapeMismatch {
                op: "adjoint",
                lhs: vec![self.measurement_len()],
                rhs: y.shape().to_vec(),
            });
        }
        let data = match &self.inner {
            Inner::Identity => y.data().to_vec(),
            Inner::Linear(m) => {
                let mut out = vec![0.0; h * w];
                crate::tensor::gemm(h * w, m.shape()[0], 1, m.data(), true, y.data(), false, &mut out, false);
                out
            }
            _ => {
                return Err(Error::WrongKind {
                    expected: "a linear forward model",
                    got: self.model.kind.name().into(),
                })
            }
        };
        Tensor::new(vec![h, w], data)
    }

    /// `Aᴴ y` for the visibility operator as `(real, imaginary)` images.
    pub fn dirty_image_complex(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let ForwardKind::InterferometricCs { uv } = &self.model.kind else {
            return Err(Error::WrongKind {
                expected: "interferometric-cs",
                got: self.model.kind.name().into(),
            });
        };
        let re = self.adjoint(y)?;
        let Inner::Linear(m) = &self.inner else {
            unreachable!("interferometric operator is linear")
        };
        let n = re.numel();
        // Im(Aᴴy) = A_reᵀ b - A_imᵀ a for y = a + ib.
        let mut im = vec![0.0; n];
        for j in 0..uv.len() {
            let (a, b) = (y.data()[2 * j], y.data()[2 * j + 1]);
            let (row_re, row_im) = (&m.data()[2 * j * n..(2 * j + 1) * n], &m.data()[(2 * j + 1) * n..(2 * j + 2) * n]);
            for p in 0..n {
                im[p] += row_re[p] * b - row_im[p] * a;
            }
        }
        Ok((re.clone(), Tensor::new(re.shape().to_vec(), im)?))
    }

    /// The dirty image `Re(Aᴴ y)` of an interferometric measurement.
    pub fn dirty_image(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.dirty_image_complex(y)?.0)
    }
}

/// Adds iid `N(0, σ²)` to every real component.
pub fn add_noise(clean: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let noise = rng::standard_normal(rng, clean.numel());
    let data = clean.data().iter().zip(noise).map(|(c, n)| c + sigma * n).collect();
    Tensor::new(clean.shape().to_vec(), data)
}

/// `20 log₁₀(‖clean‖₂ / (σ √m))` with `m` real components.
pub fn snr_db(clean: &[f64], sigma: f64) -> Result<f64> {
    let norm = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config("SNR of an all-zero signal is undefined"));
    }
    Ok(20.0 * (norm / (sigma * (clean.len() as f64).sqrt())).log10())
}

/// Inverse of [`snr_db`]: the σ giving `target_db`.
pub fn calibrate_sigma(clean: &[f64], target_db: f64) -> Result<f64> {
    let norm = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config("cannot calibrate noise for an all-zero signal"));
    }
    Ok(norm / ((clean.len() as f64).sqrt() * 10f64.powf(target_db / 20.0)))
}

/// Observations sharing one forward model.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub observations: Vec<Tensor>,
    pub model: ForwardModel,
    /// Ground truth, available for synthetic data only.
    pub ground_truth: Option<Vec<Tensor>>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Measures `images` through `kind` with noise calibrated so that the
    /// stacked clean measurements have SNR `snr_db`.
    pub fn synthesize(
        images: &[Tensor],
        kind: ForwardKind,
        snr: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::config("no images to measure"))?;
        let geometry = match first.shape() {
            [h, w] => (*h, *w),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "images must be [H, W]".into(),
                })
            }
        };
        let op = ForwardModel {
            kind: kind.clone(),
            sigma: 1.0,
            geometry,
        }
        .build()?;
        let clean = images.iter().map(|x| op.apply(x)).collect::<Result<Vec<_>>>()?;
        let stacked: Vec<f64> = clean.iter().flat_map(|c| c.data().iter().copied()).collect();
        let sigma = calibrate_sigma(&stacked, snr)?;
        let observations = clean
            .iter()
            .map(|c| add_noise(c, sigma, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            observations,
            model: ForwardModel::new(kind, sigma, geometry)?,
            ground_truth: Some(images.to_vec()),
        })
    }
}

/// Synthetic Earth-rotation-style coverage: `tracks` elliptical arcs of
/// `points_per_track` samples, each point paired with its conjugate `(-u, -v)`.
pub fn synth_uv_coverage(
    geometry: (usize, usize),
    tracks: usize,
    points_per_track: usize,
    max_radius: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let nyquist = geometry.0.min(geometry.1) as f64 / 2.0;
    if !(max_radius > 0.0) || max_radius > nyquist {
        return Err(Error::config(format!(
            "max radius {max_radius} must lie in (0, {nyquist}]"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut uv = Vec::with_capacity(2 * tracks * points_per_track);
    for _ in 0..tracks {
        let radius = max_radius * rng::uniform(&mut rng, 0.2, 1.0);
        let axis_ratio = rng::uniform(&mut rng, 0.25, 1.0);
        let tilt = rng::uniform(&mut rng, 0.0, PI);
        let start = rng::uniform(&mut rng, 0.0, 2.0 * PI);
        let span = rng::uniform(&mut rng, 0.4 * PI, 0.9 * PI);
        for j in 0..points_per_track {
            let t = if points_per_track > 1 {
                j as f64 / (points_per_track - 1) as f64
            } else {
                0.0
            };
            let hour = start + span * t;
            let (a, b) = (radius * hour.cos(), radius * axis_ratio * hour.sin());
            let u = a * tilt.cos() - b * tilt.sin();
            let v = a * tilt.sin() + b * tilt.cos();
            uv.push((u, v));
            uv.push((-u, -v));
        }
    }
    Ok(uv)
}

/// Fraction of DFT grid cells hit by at least one rounded `(u, v)` point.
pub fn coverage_fraction(uv: &[(f64, f64)], geometry: (usize, usize)) -> f64 {
    let (h, w) = (geometry.0 as i64, geometry.1 as i64);
    let cells: HashSet<(i64, i64)> = uv
        .iter()
        .map(|&(u, v)| ((u.round() as i64).rem_euclid(h), (v.round() as i64).rem_euclid(w)))
        .collect();
    cells.len() as f64 / (h * w) as f64
}

/// Keeps only spatial frequencies with `sqrt(u² + v²) ≤ radius`.
pub fn low_pass_target(x: &Tensor, radius: f64) -> Result<Tensor> {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "low-pass filter needs an [H, W] image".into(),
            })
        }
    };
    if !(radius >= 0.0) {
        return Err(Error::config("low-pass radius must be non-negative"));
    }
    let (mut fr, mut fi) = dft2(x.data(), &vec![0.0; h * w], h, w, -1.0);
    for u in 0..h {
        for v in 0..w {
            let (fu, fv) = (signed_freq(u, h), signed_freq(v, w));
            if (fu * fu + fv * fv).sqrt() > radius {
                fr[u * w + v] = 0.0;
                fi[u * w + v] = 0.0;
            }
        }
    }
    let (re, _) = dft2(&fr, &fi, h, w, 1.0);
    Tensor::new(vec![h, w], re)
}
