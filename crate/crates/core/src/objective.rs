//! Gaussian log-likelihood and the Monte-Carlo ELBO proxy.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::generator::{Generator, Mode};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::variational::{std_normal_log_prob, BoundGaussian, GaussianVariational, LatentNoise};

/// `-‖y - f(x̂)‖² / (2σ²) - (m/2) log(2πσ²)`, differentiable in `x̂`.
pub fn log_likelihood_var<'t>(op: &ForwardOperator, y: &Tensor, x_hat: Var<'t>) -> Result<Var<'t>> {
    let m = op.measurement_len();
    if y.numel() != m {
        return Err(Error::ShapeMismatch {
            op: "log_likelihood",
            lhs: vec![m],
            rhs: y.shape().to_vec(),
        });
    }
    let sigma = op.sigma();
    let pred = op.apply_var(x_hat)?;
    let y = x_hat.tape().constant(y.clone().reshape(vec![m])?);
    y.sub(pred)?.square()?.sum()?.affine(
        -0.5 / (sigma * sigma),
        -0.5 * m as f64 * (2.0 * PI * sigma * sigma).ln(),
    )
}

pub fn log_likelihood(op: &ForwardOperator, y: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(log_likelihood_var(op, y, tape.constant(x_hat.clone()))?.item())
}

/// Sample means of the three ELBO-proxy terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    /// `log p(y | G(z))`.
    pub likelihood: f64,
    /// `log p(z)` under the standard normal latent prior.
    pub prior: f64,
    /// `-log q(z)`.
    pub entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.prior + self.entropy
    }

    pub fn is_finite(&self) -> bool {
        self.likelihood.is_finite() && self.prior.is_finite() && self.entropy.is_finite()
    }
}

/// Differentiable estimate plus its term breakdown.
pub struct ElboEstimate<'t> {
    pub value: Var<'t>,
    pub terms: ElboTerms,
}

/// `(1/S) Σ_s [log p(y | G(z_s)) + log p(z_s) - log q(z_s)]` with
/// `z_s` reparameterized from `noise[s]`. Dropout masks (train mode) are
/// drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_proxy_var<'t, G: Generator + ?Sized>(
    generator: &G,
    params: &[Var<'t>],
    q: &BoundGaussian<'t>,
    op: &ForwardOperator,
    y: &Tensor,
    noise: &[LatentNoise],
    mode: Mode,
    rng: &mut Rng,
) -> Result<ElboEstimate<'t>> {
    if noise.is_empty() {
        return Err(Error::config("elbo proxy needs at least one Monte-Carlo sample"));
    }
    let tape = q.mu.tape();
    let mut acc: Option<Var<'t>> = None;
    let mut terms = ElboTerms::default();
    for n in noise {
        let z = q.reparameterize(n)?;
        let x = generator.forward(params, z, mode, rng)?;
        let lik = log_likelihood_var(op, y, x)?;
        let prior = std_normal_log_prob(z)?;
        let ent = q.log_prob(z)?.neg()?;
        terms.likelihood += lik.item();
        terms.prior += prior.item();
        terms.entropy += ent.item();
        let s = lik.add(prior)?.add(ent)?;
        acc = Some(match acc {
            Some(a) => a.add(s)?,
            None => s,
        });
    }
    let inv = 1.0 / noise.len() as f64;
    terms.likelihood *= inv;
    terms.prior *= inv;
    terms.entropy *= inv;
    let value = acc.unwrap_or_else(|| tape.scalar(0.0)).scale(inv)?;
    if !terms.is_finite() || !value.item().is_finite() {
        return Err(Error::NonFinite {
            op: format!(
                "elbo proxy (likelihood {}, prior {}, entropy {})",
                terms.likelihood, terms.prior, terms.entropy
            ),
        });
    }
    Ok(ElboEstimate { value, terms })
}

/// Evaluates the ELBO proxy with `samples` fresh draws, without gradients.
pub fn elbo_proxy<G: Generator + ?Sized>(
    generator: &G,
    q: &GaussianVariational,
    op: &ForwardOperator,
    y: &Tensor,
    samples: usize,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ElboTerms> {
    let noise: Vec<LatentNoise> = (0..samples).map(|_| LatentNoise::draw(q.dim(), rng)).collect();
    elbo_proxy_with(generator, q, op, y, &noise, mode, rng)
}

/// As [`elbo_proxy`] with given latent noise.
pub fn elbo_proxy_with<G: Generator + ?Sized>(
    generator: &G,
    q: &GaussianVariational,
    op: &ForwardOperator,
    y: &Tensor,
    noise: &[LatentNoise],
    mode: Mode,
    rng: &mut Rng,
) -> Result<ElboTerms> {
    let tape = Tape::new();
    let params = generator.bind(&tape, false);
    let bound = q.bind(&tape, false);
    Ok(elbo_proxy_var(generator, &params, &bound, op, y, noise, mode, rng)?.terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardKind, ForwardModel};
    use crate::generator::{init_generator, DeepDecoderConfig, IdentityGenerator};
    use crate::gradcheck;
    use crate::rng;

    fn denoise(sigma: f64, geometry: (usize, usize)) -> ForwardOperator {
        ForwardModel::new(ForwardKind::Denoise, sigma, geometry)
            .unwrap()
            .build()
            .unwrap()
    }

    #[test]
    fn likelihood_closed_forms() {
        let op = denoise(1.0, (2, 2));
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = x.clone().reshape(vec![4]).unwrap();
        let v = log_likelihood(&op, &y, &x).unwrap();
        assert!((v - (-2.0 * (2.0 * PI).ln())).abs() < 1e-10);
        assert!((v - -3.675754132818691).abs() < 1e-10);

        let op1 = denoise(1.0, (1, 1));
        let x1 = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let y1 = Tensor::vector(vec![2f64.sqrt()]).unwrap();
        let v1 = log_likelihood(&op1, &y1, &x1).unwrap();
        assert!((v1 - -1.9189385332046727).abs() < 1e-10);
    }

    #[test]
    fn likelihood_matches_direct_density() {
        let sigma = 0.37;
        let op = denoise(sigma, (1, 1));
        let x = Tensor::new(vec![1, 1], vec![0.42]).unwrap();
        let y = Tensor::vector(vec![0.91]).unwrap();
        let r: f64 = 0.91 - 0.42;
        let density = (-r * r / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).sqrt();
        assert!((log_likelihood(&op, &y, &x).unwrap() - density.ln()).abs() < 1e-10);
    }

    #[test]
    fn likelihood_rejects_wrong_measurement_length() {
        let op = denoise(1.0, (2, 2));
        let x = Tensor::zeros(vec![2, 2]);
        assert!(log_likelihood(&op, &Tensor::zeros(vec![3]), &x).is_err());
    }

    /// Identity generator, `q = N(μ, diag(s²) + εI)`, denoise with noise σ:
    /// every term of the expectation is Gaussian.
    fn analytic_elbo(mu: &[f64], var: &[f64], y: &[f64], sigma: f64) -> f64 {
        let k = mu.len() as f64;
        let s2 = sigma * sigma;
        let lik: f64 = mu
            .iter()
            .zip(var)
            .zip(y)
            .map(|((m, v), y)| -((y - m).powi(2) + v) / (2.0 * s2))
            .sum::<f64>()
            - 0.5 * k * (2.0 * PI * s2).ln();
        let prior: f64 = mu.iter().zip(var).map(|(m, v)| -(m * m + v) / 2.0).sum::<f64>()
            - 0.5 * k * (2.0 * PI).ln();
        let ent: f64 = var.iter().map(|v| 0.5 * (2.0 * PI * std::f64::consts::E * v).ln()).sum();
        lik + prior + ent
    }

    #[test]
    fn identity_stub_matches_closed_form_gaussian_elbo() {
        let mu = vec![0.3, -0.2];
        let q = GaussianVariational::new(
            Tensor::vector(mu.clone()).unwrap(),
            Tensor::eye(2),
        )
        .unwrap();
        let var = vec![1.0 + q.ridge(); 2];
        let sigma = 0.8;
        let op = denoise(sigma, (1, 2));
        let y = Tensor::vector(vec![0.5, 0.1]).unwrap();
        let g = IdentityGenerator::new(vec![1, 2]);
        let mut rng = rng::seeded(17);
        let n = 100_000;
        let (mut sum, mut sum_sq, mut ent_sum, mut ent_sq) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let t = elbo_proxy(&g, &q, &op, &y, 1, Mode::Eval, &mut rng).unwrap();
            sum += t.total();
            sum_sq += t.total() * t.total();
            ent_sum += t.entropy;
            ent_sq += t.entropy * t.entropy;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let se = ((sum_sq / nf - mean * mean) / nf).sqrt();
        let want = analytic_elbo(&mu, &var, y.data(), sigma);
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");

        let ent_mean = ent_sum / nf;
        let ent_se = ((ent_sq / nf - ent_mean * ent_mean) / nf).sqrt();
        let h = q.entropy().unwrap();
        assert!((ent_mean - h).abs() < 3.0 * ent_se);

        // Lower bound on log evidence: y ~ N(0, (1 + σ²) I) marginally.
        let m2 = 1.0 + sigma * sigma;
        let evidence: f64 = y
            .data()
            .iter()
            .map(|v| -v * v / (2.0 * m2) - 0.5 * (2.0 * PI * m2).ln())
            .sum();
        assert!(mean <= evidence + 3.0 * se);
    }

    #[test]
    fn zero_noise_sample_is_deterministic() {
        let cfg = DeepDecoderConfig {
            num_layers: 2,
            channels: 4,
            latent_dim: 3,
            output_size: (8, 8),
            output_channels: 1,
            dropout_rate: 0.0,
            seed_size: (2, 2),
        };
        let gen = init_generator(&cfg, 3).unwrap();
        let q = GaussianVariational::init(3, &mut rng::seeded(2));
        let op = denoise(0.2, (8, 8));
        let y = Tensor::full(vec![64], 0.5);
        let noise = [LatentNoise::zeros(3)];
        let t = elbo_proxy_with(&gen, &q, &op, &y, &noise, Mode::Eval, &mut rng::seeded(0)).unwrap();
        let x = gen.generate(&q.mu, Mode::Eval, &mut rng::seeded(0)).unwrap();
        let want = log_likelihood(&op, &y, &x).unwrap()
            + crate::variational::std_normal_log_prob_value(&q.mu)
            - q.log_prob(&q.mu).unwrap();
        assert!((t.total() - want).abs() < 1e-10);
    }

    #[test]
    fn empty_noise_is_rejected() {
        let g = IdentityGenerator::new(vec![1, 1]);
        let q = GaussianVariational::init(1, &mut rng::seeded(0));
        let op = denoise(1.0, (1, 1));
        let y = Tensor::vector(vec![0.0]).unwrap();
        assert!(elbo_proxy_with(&g, &q, &op, &y, &[], Mode::Eval, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn frozen_noise_gradients_match_finite_differences() {
        let cfg = DeepDecoderConfig {
            num_layers: 2,
            channels: 3,
            latent_dim: 3,
            output_size: (4, 4),
            output_channels: 1,
            dropout_rate: 0.0,
            seed_size: (2, 2),
        };
        let gen = init_generator(&cfg, 5).unwrap();
        let mut r = rng::seeded(6);
        let q = GaussianVariational::init(3, &mut r);
        let noise: Vec<LatentNoise> = (0..2).map(|_| LatentNoise::draw(3, &mut r)).collect();
        let op = ForwardModel::new(ForwardKind::GaussianPhaseRetrieval { seed: 1, rows: 20 }, 0.3, (4, 4))
            .unwrap()
            .build()
            .unwrap();
        let y = Tensor::vector(rng::standard_normal(&mut r, 20).iter().map(|v| v.abs()).collect()).unwrap();
        let n_params = gen.parameters().len();
        let mut inputs: Vec<Tensor> = gen.parameters().into_iter().cloned().collect();
        inputs.push(q.mu.clone());
        inputs.push(q.l_factor.clone());
        let report = gradcheck::check(&inputs, 1e-5, |_, v| {
            let bound = BoundGaussian::from_parts(v[n_params], v[n_params + 1], q.ridge());
            let est = elbo_proxy_var(&gen, &v[..n_params], &bound, &op, &y, &noise, Mode::Eval, &mut rng::seeded(0))?;
            Ok(est.value)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }
}
