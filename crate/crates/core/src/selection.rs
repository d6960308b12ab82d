//! Choosing among frozen generators by the fitted ELBO proxy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, MeasurementSet};
use crate::generator::{Generator, Mode};
use crate::objective::elbo_proxy;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{csv_err, joint_train, TrainConfig};
use crate::variational::GaussianVariational;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Posterior fitting steps per cell.
    pub fit_iterations: usize,
    pub mc_samples: usize,
    pub lr_phi: f64,
    /// Draws used for the final score.
    pub eval_samples: usize,
    /// Cosine step-size decay target for the posterior fit.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            fit_iterations: 300,
            mc_samples: 2,
            lr_phi: 1e-2,
            eval_samples: 64,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

/// `scores[case][candidate] = -ELBOProxy`. Lower is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub cases: Vec<String>,
    pub candidates: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    /// Row-wise argmin.
    pub fn selected(&self) -> Vec<usize> {
        self.scores
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(j, _)| j)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["case".to_string()];
        header.extend(self.candidates.iter().cloned());
        header.push("selected".into());
        w.write_record(&header).map_err(csv_err)?;
        for ((name, row), sel) in self.cases.iter().zip(&self.scores).zip(self.selected()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.17e}")));
            rec.push(self.candidates[sel].clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits `q` to one measurement with the generator frozen and returns the
/// fitted posterior and its score.
pub fn fit_and_score<G: Generator + Clone>(
    generator: &G,
    model: &ForwardModel,
    y: &Tensor,
    cfg: &SelectionConfig,
    cell_seed: u64,
) -> Result<(GaussianVariational, f64)> {
    let q0 = GaussianVariational::init(generator.latent_dim(), &mut rng::derived(cell_seed, &[0]));
    let set = MeasurementSet {
        observations: vec![y.clone()],
        model: model.clone(),
        ground_truth: None,
    };
    let train = TrainConfig {
        iterations: cfg.fit_iterations,
        mc_samples: cfg.mc_samples,
        lr_phi: cfg.lr_phi,
        seed: rng::derive_seed(cell_seed, &[1]),
        dropout: false,
        train_generator: false,
        final_lr_fraction: cfg.final_lr_fraction,
        ..TrainConfig::default()
    };
    let out = joint_train(generator.clone(), vec![q0], &set, &train)?;
    let q = out.posteriors.into_iter().next().expect("one posterior");
    let score = score(generator, &q, model, y, cfg.eval_samples, rng::derive_seed(cell_seed, &[2]))?;
    Ok((q, score))
}

/// `-ELBOProxy` of `q` from `samples` draws seeded by `seed`.
pub fn score<G: Generator>(
    generator: &G,
    q: &GaussianVariational,
    model: &ForwardModel,
    y: &Tensor,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let op = model.build()?;
    let terms = elbo_proxy(generator, q, &op, y, samples, Mode::Eval, &mut rng::seeded(seed))?;
    Ok(-terms.total())
}

/// Scores every (case, candidate) cell. Cells are independent and seeded by
/// their case, so all candidates of a row share the posterior initialization
/// and Monte-Carlo noise, and the result does not depend on scheduling.
pub fn model_selection<G: Generator + Clone>(
    candidates: &[(String, G)],
    cases: &[(String, ForwardModel, Tensor)],
    cfg: &SelectionConfig,
) -> Result<ScoreMatrix> {
    if candidates.len() < 2 {
        return Err(Error::config("model selection needs at least two candidates"));
    }
    let cells: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|i| (0..candidates.len()).map(move |j| (i, j)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let (_, model, y) = &cases[i];
            let seed = rng::derive_seed(cfg.seed, &[i as u64]);
            fit_and_score(&candidates[j].1, model, y, cfg, seed).map(|(_, s)| s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let nc = candidates.len();
    Ok(ScoreMatrix {
        cases: cases.iter().map(|c| c.0.clone()).collect(),
        candidates: candidates.iter().map(|c| c.0.clone()).collect(),
        scores: values.chunks(nc).map(|c| c.to_vec()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ForwardKind;
    use crate::generator::{init_generator, DeepDecoderConfig};

    fn decoder(seed: u64) -> crate::GeneratorParams {
        let cfg = DeepDecoderConfig {
            num_layers: 2,
            channels: 6,
            latent_dim: 4,
            output_size: (8, 8),
            output_channels: 1,
            dropout_rate: 0.0,
            seed_size: (2, 2),
        };
        init_generator(&cfg, seed).unwrap()
    }

    fn case(seed: u64) -> (String, ForwardModel, Tensor) {
        let model = ForwardModel::new(ForwardKind::Denoise, 0.1, (8, 8)).unwrap();
        let y = decoder(1)
            .generate(&Tensor::vector(vec![0.5, -0.2, 0.1, 0.3]).unwrap(), Mode::Eval, &mut rng::seeded(0))
            .unwrap()
            .reshape(vec![64])
            .unwrap();
        let y = crate::forward::add_noise(&y, 0.1, &mut rng::seeded(seed)).unwrap();
        (format!("case{seed}"), model, y)
    }

    fn quick() -> SelectionConfig {
        SelectionConfig {
            fit_iterations: 300,
            lr_phi: 5e-2,
            eval_samples: 256,
            ..SelectionConfig::default()
        }
    }

    #[test]
    fn selects_the_generating_model() {
        let cands = vec![("right".to_string(), decoder(1)), ("wrong".to_string(), decoder(2))];
        let cases: Vec<_> = (0..3).map(case).collect();
        let m = model_selection(&cands, &cases, &quick()).unwrap();
        assert_eq!(m.selected(), vec![0, 0, 0]);
        assert!(m.scores.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_candidates_score_alike() {
        let cands = vec![("a".to_string(), decoder(1)), ("b".to_string(), decoder(1))];
        let m = model_selection(&cands, &[case(4)], &quick()).unwrap();
        let (a, b) = (m.scores[0][0], m.scores[0][1]);
        // Rows share their random numbers, so equal candidates tie exactly.
        assert_eq!(a, b);
    }

    #[test]
    fn score_is_negated_fitted_elbo() {
        let g = decoder(1);
        let (_, model, y) = case(5);
        let cfg = quick();
        let (q, s) = fit_and_score(&g, &model, &y, &cfg, 77).unwrap();
        let again = score(&g, &q, &model, &y, cfg.eval_samples, rng::derive_seed(77, &[2])).unwrap();
        assert!((s - again).abs() < 1e-10);
    }

    #[test]
    fn argmin_ignores_row_offsets() {
        let mut m = ScoreMatrix {
            cases: vec!["x".into(), "y".into()],
            candidates: vec!["a".into(), "b".into(), "c".into()],
            scores: vec![vec![3.0, 1.0, 2.0], vec![0.5, 0.7, 0.1]],
        };
        let before = m.selected();
        m.scores[0].iter_mut().for_each(|v| *v += 1e3);
        m.scores[1].iter_mut().for_each(|v| *v -= 7.0);
        assert_eq!(m.selected(), before);
        assert_eq!(before, vec![1, 2]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("case,a,b,c,selected\n"));
        assert!(text.trim_end().ends_with(",c"));
    }

    #[test]
    fn one_candidate_is_rejected() {
        assert!(model_selection(&[("a".to_string(), decoder(1))], &[case(1)], &quick()).is_err());
    }
}
