//! Single-measurement comparison methods: total-variation regularized
//! maximum likelihood and a Deep-Decoder fit with a fixed latent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::generator::{init_generator, DeepDecoderConfig, Generator, GeneratorParams, Mode};
use crate::objective::log_likelihood_var;
use crate::optim::Adam;
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Smoothing δ inside the isotropic TV norm.
pub const TV_DELTA: f64 = 1e-6;

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-18;

#[derive(Clone, Debug, PartialEq)]
pub struct TvRmlResult {
    pub image: Tensor,
    /// Objective before the first step and after every accepted step.
    pub objective: Vec<f64>,
}

fn tv_objective(op: &ForwardOperator, y: &Tensor, lambda: f64, x: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let tape = Tape::new();
    let v = if with_grad { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
    // Negative log-likelihood without its constant.
    let m = op.measurement_len() as f64;
    let sigma = op.sigma();
    let offset = -0.5 * m * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let data = log_likelihood_var(op, y, v)?.shift(-offset)?.neg()?;
    let f = data.add(v.total_variation(TV_DELTA)?.scale(lambda)?)?;
    let grad = if with_grad { Some(f.backward()?.wrt(v)) } else { None };
    Ok((f.item(), grad))
}

/// Gradient descent with backtracking on `‖y - f(x)‖²/(2σ²) + λ TV_δ(x)`,
/// started from the adjoint image (or mid-grey for non-linear operators).
pub fn tv_rml(op: &ForwardOperator, y: &Tensor, lambda: f64, iters: usize, step: f64) -> Result<TvRmlResult> {
    if !(lambda >= 0.0) {
        return Err(Error::config("TV weight must be non-negative"));
    }
    if !(step > 0.0) {
        return Err(Error::config("initial step must be positive"));
    }
    let (h, w) = op.model().geometry;
    let mut x = if op.model().kind.is_linear() {
        op.adjoint(y)?
    } else {
        Tensor::full(vec![h, w], 0.5)
    };
    let (mut f, mut g) = tv_objective(op, y, lambda, &x, true)?;
    let mut history = vec![f];
    let mut t = step;
    for it in 0..iters {
        let grad = g.take().expect("gradient computed with the objective");
        let gnorm = grad.norm_sq();
        if gnorm == 0.0 {
            break;
        }
        let accepted = loop {
            let trial = Tensor::new(
                vec![h, w],
                x.data().iter().zip(grad.data()).map(|(a, b)| a - t * b).collect(),
            );
            if let Ok(trial) = trial {
                if let Ok((ft, _)) = tv_objective(op, y, lambda, &trial, false) {
                    if ft <= f - ARMIJO * t * gnorm {
                        break Some(trial);
                    }
                }
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some(next) = accepted else {
            break;
        };
        let (fn_, gn) = tv_objective(op, y, lambda, &next, true)?;
        if !fn_.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: "non-finite TV-RML objective".into(),
            });
        }
        assert!(fn_ <= f, "backtracking accepted an increase");
        x = next;
        f = fn_;
        g = gn;
        history.push(f);
        t = (t * 2.0).min(step);
    }
    Ok(TvRmlResult {
        image: x,
        objective: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipConfig {
    pub iterations: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-2,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DipFit {
    /// `(iteration, image)` pairs after every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, Tensor)>,
    pub generator: GeneratorParams,
    pub latent: Tensor,
}

impl DipFit {
    pub fn final_image(&self) -> Option<&Tensor> {
        self.checkpoints.last().map(|(_, x)| x)
    }
}

/// Fits a freshly initialized decoder with one fixed random latent to `y` by
/// maximizing the log-likelihood alone.
pub fn dip_fit(op: &ForwardOperator, y: &Tensor, config: &DeepDecoderConfig, dip: &DipConfig) -> Result<DipFit> {
    if dip.checkpoint_every == 0 {
        return Err(Error::config("checkpoint interval must be positive"));
    }
    if !(dip.lr > 0.0) {
        return Err(Error::config("step size must be positive"));
    }
    let mut gen = init_generator(config, rng::derive_seed(dip.seed, &[0]))?;
    let mut r = rng::derived(dip.seed, &[1]);
    let latent = Tensor::vector(rng::standard_normal(&mut r, config.latent_dim))?;
    let mut opt = Adam::new(dip.lr, &gen.parameters());
    let mut checkpoints = Vec::new();
    let mode = if config.dropout_rate > 0.0 { Mode::Train } else { Mode::Eval };
    for it in 0..dip.iterations {
        let grads = {
            let tape = Tape::new();
            let params = gen.bind(&tape, true);
            let x = gen.forward(&params, tape.constant(latent.clone()), mode, &mut r)?;
            let ll = log_likelihood_var(op, y, x).map_err(|e| diverged(e, it))?;
            let g = ll.backward().map_err(|e| diverged(e, it))?;
            params.iter().map(|p| g.wrt(*p)).collect::<Vec<_>>()
        };
        opt.step(&mut gen.parameters_mut(), &grads)?;
        if !gen.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                reason: "non-finite decoder weights".into(),
            });
        }
        if (it + 1) % dip.checkpoint_every == 0 {
            checkpoints.push((it + 1, gen.generate(&latent, Mode::Eval, &mut r)?));
        }
    }
    Ok(DipFit {
        checkpoints,
        generator: gen,
        latent,
    })
}

fn diverged(e: Error, iteration: usize) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            iteration,
            reason: e.to_string(),
        }
    } else {
        e
    }
}
