//! Per-measurement Gaussian latent posteriors `N(μ, L Lᵀ + εI)`.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Ridge ε added to the covariance.
pub const RIDGE: f64 = 1e-3;

/// Gaussian posterior over the latent vector. `l_factor` is lower triangular
/// and unconstrained on the diagonal; the ridge keeps the covariance
/// positive definite.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVariational {
    pub mu: Tensor,
    pub l_factor: Tensor,
    ridge: f64,
}

/// Exogenous noise for one reparameterized draw `z = μ + L u + √ε w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl LatentNoise {
    pub fn draw(k: usize, rng: &mut Rng) -> Self {
        Self {
            u: rng::standard_normal(rng, k),
            w: rng::standard_normal(rng, k),
        }
    }

    /// `u = w = 0`, which yields `z = μ`.
    pub fn zeros(k: usize) -> Self {
        Self {
            u: vec![0.0; k],
            w: vec![0.0; k],
        }
    }
}

fn tril_mask(k: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![k, k]);
    for i in 0..k {
        for j in 0..=i {
            m.data_mut()[i * k + j] = 1.0;
        }
    }
    m
}

impl GaussianVariational {
    pub fn new(mu: Tensor, l_factor: Tensor) -> Result<Self> {
        let k = mu.numel();
        if mu.shape() != [k] || l_factor.shape() != [k, k] {
            return Err(Error::ShapeMismatch {
                op: "GaussianVariational::new",
                lhs: mu.shape().to_vec(),
                rhs: l_factor.shape().to_vec(),
            });
        }
        for i in 0..k {
            for j in i + 1..k {
                if l_factor.at2(i, j) != 0.0 {
                    return Err(Error::config("L must be lower triangular"));
                }
            }
        }
        Ok(Self {
            mu,
            l_factor,
            ridge: RIDGE,
        })
    }

    /// `μ ~ N(0, 0.1²)`, `L = 0.1 I`.
    pub fn init(k: usize, rng: &mut Rng) -> Self {
        let mu = rng::standard_normal(rng, k).into_iter().map(|v| 0.1 * v).collect();
        let mut l = Tensor::eye(k);
        l.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        Self {
            mu: Tensor::from_parts(vec![k], mu),
            l_factor: l,
            ridge: RIDGE,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn is_finite(&self) -> bool {
        self.mu.is_finite() && self.l_factor.is_finite()
    }

    /// `Λ = L Lᵀ + εI`.
    pub fn covariance(&self) -> Tensor {
        let k = self.dim();
        let mut cov = vec![0.0; k * k];
        crate::tensor::gemm(
            k,
            k,
            k,
            self.l_factor.data(),
            false,
            self.l_factor.data(),
            true,
            &mut cov,
            false,
        );
        for i in 0..k {
            cov[i * k + i] += self.ridge;
        }
        Tensor::from_parts(vec![k, k], cov)
    }

    /// Records μ and L on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGaussian<'t> {
        let (mu, l_raw) = if trainable {
            (tape.leaf(self.mu.clone()), tape.leaf(self.l_factor.clone()))
        } else {
            (
                tape.constant(self.mu.clone()),
                tape.constant(self.l_factor.clone()),
            )
        };
        BoundGaussian {
            mu,
            l_raw,
            ridge: self.ridge,
            cache: Default::default(),
        }
    }

    /// One draw `μ + L u + √ε w` for given noise.
    pub fn draw_with(&self, noise: &LatentNoise) -> Tensor {
        let k = self.dim();
        let l = self.l_factor.data();
        let s = self.ridge.sqrt();
        let z = (0..k)
            .map(|i| {
                let lu: f64 = (0..=i).map(|j| l[i * k + j] * noise.u[j]).sum();
                self.mu.data()[i] + lu + s * noise.w[i]
            })
            .collect();
        Tensor::from_parts(vec![k], z)
    }

    /// `n` reparameterized draws stacked as rows of an `n × k` tensor.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        let k = self.dim();
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend(self.draw_with(&LatentNoise::draw(k, rng)).into_data());
        }
        Ok(Tensor::from_parts(vec![n, k], out))
    }

    /// Differential entropy `(k/2) log(2πe) + ½ log det Λ`.
    pub fn entropy(&self) -> Result<f64> {
        let tape = Tape::new();
        Ok(self.bind(&tape, false).entropy()?.item())
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        let q = self.bind(&tape, false);
        Ok(q.log_prob(tape.constant(z.clone()))?.item())
    }
}

/// A [`GaussianVariational`] recorded on a tape.
pub struct BoundGaussian<'t> {
    pub mu: Var<'t>,
    /// The stored factor; gradients for its strict upper triangle are zero.
    pub l_raw: Var<'t>,
    ridge: f64,
    cache: std::cell::OnceCell<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundGaussian<'t> {
    /// Wraps already-recorded `μ` and `L` variables.
    pub fn from_parts(mu: Var<'t>, l_raw: Var<'t>, ridge: f64) -> Self {
        Self {
            mu,
            l_raw,
            ridge,
            cache: Default::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    fn tape(&self) -> &'t Tape {
        self.mu.tape()
    }

    /// Masked factor and covariance, built once per binding.
    fn factors(&self) -> Result<(Var<'t>, Var<'t>)> {
        if let Some(f) = self.cache.get() {
            return Ok(*f);
        }
        let k = self.dim();
        let tape = self.tape();
        let l = self.l_raw.mul(tape.constant(tril_mask(k)))?;
        let mut ridge = Tensor::eye(k);
        ridge.data_mut().iter_mut().for_each(|v| *v *= self.ridge);
        let cov = l.matmul(l.transpose()?)?.add(tape.constant(ridge))?;
        Ok(*self.cache.get_or_init(|| (l, cov)))
    }

    pub fn covariance(&self) -> Result<Var<'t>> {
        Ok(self.factors()?.1)
    }

    /// `z = μ + L u + √ε w`, differentiable in μ and L.
    pub fn reparameterize(&self, noise: &LatentNoise) -> Result<Var<'t>> {
        let k = self.dim();
        if noise.u.len() != k || noise.w.len() != k {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                lhs: vec![k],
                rhs: vec![noise.u.len()],
            });
        }
        let tape = self.tape();
        let (l, _) = self.factors()?;
        let u = tape.constant(Tensor::from_parts(vec![k, 1], noise.u.clone()));
        let s = self.ridge.sqrt();
        let w = tape.constant(Tensor::from_parts(
            vec![k],
            noise.w.iter().map(|v| s * v).collect(),
        ));
        self.mu.add(l.matmul(u)?.reshape(vec![k])?)?.add(w)
    }

    pub fn entropy(&self) -> Result<Var<'t>> {
        let k = self.dim() as f64;
        let (_, cov) = self.factors()?;
        cov.logdet_spd()?.affine(0.5, 0.5 * k * (2.0 * PI * E).ln())
    }

    /// `-½ (z-μ)ᵀ Λ⁻¹ (z-μ) - ½ log det Λ - (k/2) log 2π`.
    pub fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        let k = self.dim() as f64;
        let (_, cov) = self.factors()?;
        let d = z.sub(self.mu)?;
        let quad = cov.quad_form_inv(d)?;
        let logdet = cov.logdet_spd()?;
        quad.add(logdet)?.affine(-0.5, -0.5 * k * (2.0 * PI).ln())
    }
}

/// `log N(z; 0, I) = -½‖z‖² - (k/2) log 2π`.
pub fn std_normal_log_prob(z: Var<'_>) -> Result<Var<'_>> {
    let k = z.numel() as f64;
    z.square()?.sum()?.affine(-0.5, -0.5 * k * (2.0 * PI).ln())
}

pub fn std_normal_log_prob_value(z: &Tensor) -> f64 {
    -0.5 * z.norm_sq() - 0.5 * z.numel() as f64 * (2.0 * PI).ln()
}
