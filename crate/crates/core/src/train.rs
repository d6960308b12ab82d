//! Joint gradient ascent over the shared generator and every posterior.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, MeasurementSet};
use crate::generator::{Generator, Mode};
use crate::objective::{elbo_proxy_var, ElboTerms};
use crate::optim::Adam;
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::variational::{GaussianVariational, LatentNoise};

const TAG_STEP: u64 = 0x7374_6570;
const TAG_BATCH: u64 = 0x6261_7463;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Monte-Carlo samples per index per step.
    pub mc_samples: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    /// Indices per step; `None` uses all of them.
    pub batch: Option<usize>,
    pub seed: u64,
    /// Dropout in the generator while training.
    pub dropout: bool,
    /// Whether the generator weights are updated. Off fits only the posteriors.
    pub train_generator: bool,
    /// Optional L2 penalty `-(λ/2)‖θ‖²` on generator weights.
    pub weight_decay: f64,
    /// Step sizes follow a cosine from 1 down to this fraction. 1 keeps them constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            mc_samples: 2,
            lr_theta: 1e-3,
            lr_phi: 1e-2,
            batch: None,
            seed: 0,
            dropout: true,
            train_generator: true,
            weight_decay: 0.0,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples must be at least 1"));
        }
        if !(self.lr_theta > 0.0) || !(self.lr_phi > 0.0) {
            return Err(Error::config("step sizes must be positive"));
        }
        if self.batch == Some(0) {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("final_lr_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    fn lr_factor(&self, iteration: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.iterations <= 1 {
            return 1.0;
        }
        let t = (iteration as f64 / (self.iterations - 1) as f64).min(1.0);
        let f = self.final_lr_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Batch mean of the ELBO-proxy estimates.
    pub objective: f64,
    pub terms: ElboTerms,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
}

impl TrainReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// Means over consecutive non-overlapping windows.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let obj = self.objectives();
        obj.chunks_exact(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn smoothed_increasing(&self, window: usize) -> bool {
        self.smoothed(window).windows(2).all(|w| w[1] > w[0])
    }

    /// Writes `iteration,objective,likelihood,prior,entropy`. Wall-clock is
    /// left out so reruns are byte-identical.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "objective", "likelihood", "prior", "entropy"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record(&[
                r.iteration.to_string(),
                format!("{:.17e}", r.objective),
                format!("{:.17e}", r.terms.likelihood),
                format!("{:.17e}", r.terms.prior),
                format!("{:.17e}", r.terms.entropy),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState<G> {
    pub generator: G,
    pub posteriors: Vec<GaussianVariational>,
    pub theta_opt: Adam,
    pub phi_opts: Vec<Adam>,
    pub iteration: usize,
}

impl<G: Generator> TrainState<G> {
    pub fn new(generator: G, posteriors: Vec<GaussianVariational>, cfg: &TrainConfig) -> Self {
        let theta_opt = Adam::new(cfg.lr_theta, &generator.parameters());
        let phi_opts = posteriors
            .iter()
            .map(|q| Adam::new(cfg.lr_phi, &[&q.mu, &q.l_factor]))
            .collect();
        Self {
            generator,
            posteriors,
            theta_opt,
            phi_opts,
            iteration: 0,
        }
    }
}

struct IndexResult {
    terms: ElboTerms,
    objective: f64,
    theta: Vec<Tensor>,
    mu: Tensor,
    l_factor: Tensor,
}

/// Stepwise joint optimizer. A failed step leaves the state untouched, so
/// `state()` is always the last good iterate.
pub struct Trainer<'a, G> {
    state: TrainState<G>,
    op: ForwardOperator,
    observations: &'a [Tensor],
    cfg: TrainConfig,
    report: TrainReport,
}

impl<'a, G: Generator> Trainer<'a, G> {
    pub fn new(state: TrainState<G>, set: &'a MeasurementSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let op = set.model.build()?;
        if set.is_empty() {
            return Err(Error::config("measurement set is empty"));
        }
        if state.posteriors.len() != set.len() || state.phi_opts.len() != set.len() {
            return Err(Error::config(format!(
                "{} posteriors for {} measurements",
                state.posteriors.len(),
                set.len()
            )));
        }
        if state.posteriors.iter().any(|q| q.dim() != state.generator.latent_dim()) {
            return Err(Error::config("posterior dimension differs from the generator latent size"));
        }
        let (h, w) = set.model.geometry;
        if state.generator.output_shape().iter().product::<usize>() != h * w {
            return Err(Error::config("generator output does not match the image geometry"));
        }
        Ok(Self {
            state,
            op,
            observations: &set.observations,
            cfg,
            report: TrainReport::default(),
        })
    }

    pub fn state(&self) -> &TrainState<G> {
        &self.state
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn into_parts(self) -> (TrainState<G>, TrainReport) {
        (self.state, self.report)
    }

    fn batch_indices(&self) -> Vec<usize> {
        let n = self.observations.len();
        match self.cfg.batch {
            Some(b) if b < n => {
                let mut r = rng::derived(self.cfg.seed, &[TAG_BATCH, self.state.iteration as u64]);
                let mut idx = rand::seq::index::sample(&mut r, n, b).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    }

    fn index_pass(&self, i: usize) -> Result<IndexResult> {
        let cfg = &self.cfg;
        let gen = &self.state.generator;
        let q = &self.state.posteriors[i];
        let mut r: Rng = rng::derived(cfg.seed, &[TAG_STEP, self.state.iteration as u64, i as u64]);
        let noise: Vec<LatentNoise> = (0..cfg.mc_samples)
            .map(|_| LatentNoise::draw(q.dim(), &mut r))
            .collect();
        let mode = if cfg.dropout { Mode::Train } else { Mode::Eval };
        let tape = Tape::new();
        let params = gen.bind(&tape, cfg.train_generator);
        let bound = q.bind(&tape, true);
        let y = &self.observations[i];
        let est = elbo_proxy_var(gen, &params, &bound, &self.op, y, &noise, mode, &mut r)?;
        let grads = est.value.backward()?;
        let theta = if cfg.train_generator {
            params.iter().map(|p| grads.wrt(*p)).collect()
        } else {
            Vec::new()
        };
        Ok(IndexResult {
            terms: est.terms,
            objective: est.value.item(),
            theta,
            mu: grads.wrt(bound.mu),
            l_factor: grads.wrt(bound.l_raw),
        })
    }

    /// One ascent step on the batch objective.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let iteration = self.state.iteration;
        let diverged = |e: Error| {
            if e.is_numerical() {
                Error::Diverged {
                    iteration,
                    reason: e.to_string(),
                }
            } else {
                e
            }
        };
        let idx = self.batch_indices();
        let results: Vec<IndexResult> = idx
            .par_iter()
            .map(|&i| self.index_pass(i))
            .collect::<Result<Vec<_>>>()
            .map_err(diverged)?;

        // Fixed index order keeps the reduction bitwise reproducible.
        let b = results.len() as f64;
        let mut terms = ElboTerms::default();
        let mut objective = 0.0;
        for r in &results {
            terms.likelihood += r.terms.likelihood / b;
            terms.prior += r.terms.prior / b;
            terms.entropy += r.terms.entropy / b;
            objective += r.objective / b;
        }
        let factor = self.cfg.lr_factor(iteration);
        if self.cfg.train_generator {
            let mut theta: Vec<Tensor> = self
                .state
                .generator
                .parameters()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            for r in &results {
                for (acc, g) in theta.iter_mut().zip(&r.theta) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v / b);
                }
            }
            if self.cfg.weight_decay > 0.0 {
                for (acc, p) in theta.iter_mut().zip(self.state.generator.parameters()) {
                    let wd = self.cfg.weight_decay;
                    acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, v)| *a -= wd * v);
                }
            }
            if theta.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    reason: "non-finite generator gradient".into(),
                });
            }
            self.state.theta_opt.lr = self.cfg.lr_theta * factor;
            self.state.theta_opt.step(&mut self.state.generator.parameters_mut(), &theta)?;
        }
        for (r, &i) in results.into_iter().zip(&idx) {
            let q = &mut self.state.posteriors[i];
            let opt = &mut self.state.phi_opts[i];
            opt.lr = self.cfg.lr_phi * factor;
            opt.step(&mut [&mut q.mu, &mut q.l_factor], &[r.mu, r.l_factor])?;
        }
        self.state.iteration += 1;
        let record = IterationRecord {
            iteration,
            objective,
            terms,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        log::debug!("iteration {iteration}: objective {objective:.6}");
        self.report.records.push(record.clone());
        Ok(record)
    }

    /// Steps until `cfg.iterations` total iterations have run.
    pub fn run(&mut self) -> Result<()> {
        while self.state.iteration < self.cfg.iterations {
            self.step()?;
        }
        Ok(())
    }
}

pub struct TrainOutcome<G> {
    pub generator: G,
    pub posteriors: Vec<GaussianVariational>,
    pub report: TrainReport,
}

/// Runs `cfg.iterations` steps from a fresh optimizer state.
pub fn joint_train<G: Generator>(
    generator: G,
    posteriors: Vec<GaussianVariational>,
    set: &MeasurementSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<G>> {
    let state = TrainState::new(generator, posteriors, cfg);
    let mut trainer = Trainer::new(state, set, cfg.clone())?;
    trainer.run()?;
    let (state, report) = trainer.into_parts();
    Ok(TrainOutcome {
        generator: state.generator,
        posteriors: state.posteriors,
        report,
    })
}

/// `n` images `G(z)`, `z ~ q`, in eval mode, and their pixelwise mean.
pub fn reconstruct<G: Generator + ?Sized>(
    generator: &G,
    q: &GaussianVariational,
    n: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<Tensor>)> {
    if n == 0 {
        return Err(Error::config("reconstruction needs at least one sample"));
    }
    let noise: Vec<LatentNoise> = (0..n).map(|_| LatentNoise::draw(q.dim(), rng)).collect();
    reconstruct_with(generator, q, &noise, rng)
}

pub fn reconstruct_with<G: Generator + ?Sized>(
    generator: &G,
    q: &GaussianVariational,
    noise: &[LatentNoise],
    rng: &mut Rng,
) -> Result<(Tensor, Vec<Tensor>)> {
    let samples = noise
        .iter()
        .map(|n| generator.generate(&q.draw_with(n), Mode::Eval, rng))
        .collect::<Result<Vec<_>>>()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::config("reconstruction needs at least one sample"))?;
    let mut mean = vec![0.0; first.numel()];
    for s in &samples {
        mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / samples.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok((Tensor::new(first.shape().to_vec(), mean)?, samples))
}
