//! The shared image generation model: a Deep Decoder driven by a latent vector.
//!
//! `z` is linearly projected to a `channels × h₀ × w₀` feature map, then each
//! layer applies a 1×1 convolution, bilinear ×2 upsampling (first `U` layers
//! only), ReLU, channel normalization with a learned scale and bias, and
//! activation dropout in training mode. A final 1×1 convolution and a sigmoid
//! produce the image.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Stabilizer inside the channel-norm square root.
pub const CHANNEL_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic forward pass.
    Eval,
}

/// A differentiable map from latent vectors to images.
///
/// Parameters are exposed as an ordered list of tensors; `forward` receives
/// them bound to a tape in the same order.
pub trait Generator: Sync {
    fn latent_dim(&self) -> usize;

    fn output_shape(&self) -> Vec<usize>;

    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn forward<'t>(
        &self,
        params: &[Var<'t>],
        z: Var<'t>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var<'t>>;

    /// Records the parameters on `tape`, as leaves when `trainable`.
    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Evaluates `G(z)` without recording gradients.
    fn generate(&self, z: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let z = tape.constant(z.clone());
        Ok(self.forward(&params, z, mode, rng)?.value())
    }
}

/// `G(z) = z` reshaped to an image. Has no parameters; used where a
/// closed-form posterior is needed.
#[derive(Clone, Debug)]
pub struct IdentityGenerator {
    shape: Vec<usize>,
}

impl IdentityGenerator {
    pub fn new(shape: impl Into<Vec<usize>>) -> Self {
        Self {
            shape: shape.into(),
        }
    }
}

impl Generator for IdentityGenerator {
    fn latent_dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn output_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }

    fn parameters(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn forward<'t>(&self, _: &[Var<'t>], z: Var<'t>, _: Mode, _: &mut Rng) -> Result<Var<'t>> {
        z.reshape(self.shape.clone())
    }
}

/// Architecture hyperparameters of the Deep Decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepDecoderConfig {
    pub num_layers: usize,
    /// Channels in every hidden layer.
    pub channels: usize,
    pub latent_dim: usize,
    /// `(H, W)` of the generated image.
    pub output_size: (usize, usize),
    pub output_channels: usize,
    pub dropout_rate: f64,
    /// `(h₀, w₀)` of the projected feature map.
    pub seed_size: (usize, usize),
}

impl Default for DeepDecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            channels: 150,
            latent_dim: 40,
            output_size: (32, 32),
            output_channels: 1,
            dropout_rate: 1e-4,
            seed_size: (4, 4),
        }
    }
}

impl DeepDecoderConfig {
    /// Checks the config and returns the number of upsampling layers `U`.
    pub fn validate(&self) -> Result<usize> {
        if self.num_layers == 0 || self.channels == 0 || self.latent_dim == 0 {
            return Err(Error::config("layers, channels and latent-dim must be positive"));
        }
        if self.output_channels == 0 {
            return Err(Error::config("output-channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let (h, w) = self.output_size;
        let (h0, w0) = self.seed_size;
        let doublings = |out: usize, seed: usize| -> Option<usize> {
            if seed == 0 || !out.is_multiple_of(seed) {
                return None;
            }
            let ratio = out / seed;
            ratio.is_power_of_two().then(|| ratio.trailing_zeros() as usize)
        };
        match (doublings(h, h0), doublings(w, w0)) {
            (Some(uh), Some(uw)) if uh == uw && uh <= self.num_layers => Ok(uh),
            _ => Err(Error::config(format!(
                "output size {h}x{w} is not seed size {h0}x{w0} doubled at most {} times",
                self.num_layers
            ))),
        }
    }

    pub fn upsampling_layers(&self) -> Result<usize> {
        self.validate()
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (h0, w0) = self.seed_size;
        let c = self.channels;
        self.latent_dim * c * h0 * w0
            + self.num_layers * (c * c + 2 * c)
            + self.output_channels * c
    }

    fn image_shape(&self) -> Vec<usize> {
        let (h, w) = self.output_size;
        if self.output_channels == 1 {
            vec![h, w]
        } else {
            vec![self.output_channels, h, w]
        }
    }
}

/// Weights of one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// 1×1 convolution, `channels × channels` (out × in).
    pub conv: Tensor,
    pub norm_scale: Tensor,
    pub norm_bias: Tensor,
}

/// All Deep Decoder weights θ.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    config: DeepDecoderConfig,
    upsampling: usize,
    /// `(channels·h₀·w₀) × latent_dim`.
    pub projection: Tensor,
    pub layers: Vec<LayerParams>,
    /// `output_channels × channels`.
    pub output: Tensor,
}

fn he_uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape, data)
}

/// Draws fresh weights: He-style uniform fan-in scaling for the projection
/// and convolutions, unit norm scales and zero norm biases.
pub fn init_generator(config: &DeepDecoderConfig, seed: u64) -> Result<GeneratorParams> {
    let upsampling = config.validate()?;
    let mut rng = rng::seeded(seed);
    let (h0, w0) = config.seed_size;
    let c = config.channels;
    let projection = he_uniform(&mut rng, vec![c * h0 * w0, config.latent_dim], config.latent_dim);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            conv: he_uniform(&mut rng, vec![c, c], c),
            norm_scale: Tensor::ones(vec![c]),
            norm_bias: Tensor::zeros(vec![c]),
        })
        .collect();
    let output = he_uniform(&mut rng, vec![config.output_channels, c], c);
    Ok(GeneratorParams {
        config: config.clone(),
        upsampling,
        projection,
        layers,
        output,
    })
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(shape: impl Into<Vec<usize>>, rate: f64, rng: &mut Rng) -> Tensor {
    let shape = shape.into();
    if rate == 0.0 {
        return Tensor::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(shape, data)
}

impl GeneratorParams {
    pub fn config(&self) -> &DeepDecoderConfig {
        &self.config
    }

    pub fn upsampling_layers(&self) -> usize {
        self.upsampling
    }

    /// Rebuilds parameters from tensors in declared order (see [`Generator::parameters`]).
    pub fn from_tensors(config: DeepDecoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let upsampling = config.validate()?;
        let expected = 2 + 3 * config.num_layers;
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} generator arrays, got {}",
                tensors.len()
            )));
        }
        let template = GeneratorParams {
            upsampling,
            projection: Tensor::zeros(vec![
                config.channels * config.seed_size.0 * config.seed_size.1,
                config.latent_dim,
            ]),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    conv: Tensor::zeros(vec![config.channels, config.channels]),
                    norm_scale: Tensor::zeros(vec![config.channels]),
                    norm_bias: Tensor::zeros(vec![config.channels]),
                })
                .collect(),
            output: Tensor::zeros(vec![config.output_channels, config.channels]),
            config,
        };
        let mut params = template;
        for (slot, t) in params.parameters_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "GeneratorParams::from_tensors",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|t| t.is_finite())
    }
}

impl Generator for GeneratorParams {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn output_shape(&self) -> Vec<usize> {
        self.config.image_shape()
    }

    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.projection];
        for l in &self.layers {
            out.extend([&l.conv, &l.norm_scale, &l.norm_bias]);
        }
        out.push(&self.output);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.projection];
        for l in &mut self.layers {
            out.extend([&mut l.conv, &mut l.norm_scale, &mut l.norm_bias]);
        }
        out.push(&mut self.output);
        out
    }

    fn forward<'t>(
        &self,
        params: &[Var<'t>],
        z: Var<'t>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        if z.numel() != cfg.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: vec![cfg.latent_dim],
                rhs: z.shape(),
            });
        }
        let c = cfg.channels;
        let (mut h, mut w) = cfg.seed_size;
        let z = z.reshape(vec![cfg.latent_dim, 1])?;
        let mut x = params[0].matmul(z)?.reshape(vec![c, h * w])?;
        for (k, layer) in params[1..1 + 3 * cfg.num_layers].chunks(3).enumerate() {
            x = layer[0].matmul(x)?;
            if k < self.upsampling {
                x = x.reshape(vec![c, h, w])?.upsample2x()?;
                h *= 2;
                w *= 2;
                x = x.reshape(vec![c, h * w])?;
            }
            x = x
                .relu()?
                .channel_norm(CHANNEL_NORM_EPS)?
                .row_affine(layer[1], layer[2])?;
            if mode == Mode::Train && cfg.dropout_rate > 0.0 {
                let mask = dropout_mask(vec![c, h * w], cfg.dropout_rate, rng);
                x = x.mul(x.tape().constant(mask))?;
            }
        }
        let out = params[params.len() - 1].matmul(x)?.sigmoid()?;
        out.reshape(cfg.image_shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn toy() -> DeepDecoderConfig {
        DeepDecoderConfig {
            num_layers: 2,
            channels: 3,
            latent_dim: 2,
            output_size: (8, 8),
            output_channels: 1,
            dropout_rate: 0.0,
            seed_size: (4, 4),
        }
    }

    #[test]
    fn default_config_has_three_upsampling_layers() {
        let cfg = DeepDecoderConfig::default();
        let p = init_generator(&cfg, 1).unwrap();
        assert_eq!(p.upsampling_layers(), 3);
        assert_eq!(p.layers.len(), 6);
        assert_eq!(p.projection.shape(), &[150 * 16, 40]);
    }

    #[test]
    fn unreachable_output_size_is_rejected() {
        let mut cfg = toy();
        cfg.output_size = (12, 12);
        assert!(init_generator(&cfg, 0).is_err());
        cfg.output_size = (64, 64);
        cfg.num_layers = 3;
        assert!(init_generator(&cfg, 0).is_err());
        cfg.output_size = (16, 8);
        assert!(init_generator(&cfg, 0).is_err());
        let mut cfg = toy();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = toy();
        let p = init_generator(&cfg, 3).unwrap();
        // Enumerated by hand: projection 2·(3·4·4), two layers of 3·3 + 3 + 3,
        // output 1·3.
        let enumerated = 2 * 48 + 2 * (9 + 3 + 3) + 3;
        assert_eq!(enumerated, 129);
        assert_eq!(p.param_count(), enumerated);
        assert_eq!(cfg.param_count(), enumerated);
        let full = DeepDecoderConfig::default();
        let stored: usize = init_generator(&full, 0)
            .unwrap()
            .parameters()
            .iter()
            .map(|t| t.numel())
            .sum();
        assert_eq!(full.param_count(), stored);
    }

    #[test]
    fn init_is_deterministic_and_norm_params_are_identity() {
        let a = init_generator(&toy(), 9).unwrap();
        let b = init_generator(&toy(), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].norm_scale.data().iter().all(|&v| v == 1.0));
        assert!(a.layers[0].norm_bias.data().iter().all(|&v| v == 0.0));
        let c = init_generator(&toy(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_in_unit_interval_and_eval_is_deterministic() {
        let mut cfg = toy();
        cfg.dropout_rate = 0.3;
        let p = init_generator(&cfg, 5).unwrap();
        let z = Tensor::vector(vec![0.3, -1.2]).unwrap();
        let a = p.generate(&z, Mode::Eval, &mut rng::seeded(1)).unwrap();
        let b = p.generate(&z, Mode::Eval, &mut rng::seeded(2)).unwrap();
        assert_eq!(a.shape(), &[8, 8]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let t = p.generate(&z, Mode::Train, &mut rng::seeded(1)).unwrap();
        assert_ne!(a, t);
    }

    #[test]
    fn wrong_latent_size_is_rejected() {
        let p = init_generator(&toy(), 5).unwrap();
        let z = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        assert!(p.generate(&z, Mode::Eval, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn dropout_mask_rate_zero_is_ones() {
        let m = dropout_mask(vec![5, 5], 0.0, &mut rng::seeded(0));
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_at_default_rate() {
        let rate = 1e-4;
        let n = 1_000_000;
        let m = dropout_mask(vec![n], rate, &mut rng::seeded(42));
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let sd = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((zeros - n as f64 * rate).abs() < 3.0 * sd, "zeros = {zeros}");
    }

    #[test]
    fn dropout_mask_is_unbiased() {
        let rate = 0.2;
        let n = 100_000;
        let m = dropout_mask(vec![n], rate, &mut rng::seeded(7));
        let mean = m.mean();
        // Var(mask) = rate / (1 - rate).
        let se = (rate / (1.0 - rate) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean = {mean}");
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let cfg = toy();
        let p = init_generator(&cfg, 11).unwrap();
        let mut inputs: Vec<Tensor> = p.parameters().into_iter().cloned().collect();
        inputs.push(Tensor::vector(vec![0.4, -0.7]).unwrap());
        let report = gradcheck::check(&inputs, 1e-5, |_, vars| {
            let (params, z) = vars.split_at(vars.len() - 1);
            p.forward(params, z[0], Mode::Eval, &mut rng::seeded(0))?
                .sum()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn shape_chain_doubles_u_times() {
        let cfg = DeepDecoderConfig {
            num_layers: 4,
            channels: 4,
            latent_dim: 3,
            output_size: (16, 8),
            output_channels: 2,
            dropout_rate: 0.0,
            seed_size: (4, 2),
        };
        let p = init_generator(&cfg, 0).unwrap();
        assert_eq!(p.upsampling_layers(), 2);
        let z = Tensor::vector(vec![1.0, 0.0, -1.0]).unwrap();
        let x = p.generate(&z, Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert_eq!(x.shape(), &[2, 16, 8]);
    }

    #[test]
    fn channel_permutation_leaves_image_unchanged() {
        let cfg = DeepDecoderConfig {
            num_layers: 3,
            channels: 4,
            latent_dim: 3,
            output_size: (8, 8),
            output_channels: 1,
            dropout_rate: 0.0,
            seed_size: (2, 2),
        };
        let mut p = init_generator(&cfg, 21).unwrap();
        for l in &mut p.layers {
            for (i, v) in l.norm_scale.data_mut().iter_mut().enumerate() {
                *v = 0.5 + 0.3 * i as f64;
            }
            for (i, v) in l.norm_bias.data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.2;
            }
        }
        let z = Tensor::vector(vec![0.2, -0.5, 1.1]).unwrap();
        let before = p.generate(&z, Mode::Eval, &mut rng::seeded(0)).unwrap();

        let perm = [2usize, 0, 3, 1];
        let c = 4;
        let k = 1;
        let mut q = p.clone();
        for (new, &old) in perm.iter().enumerate() {
            for col in 0..c {
                q.layers[k].conv.data_mut()[new * c + col] = p.layers[k].conv.at2(old, col);
            }
            q.layers[k].norm_scale.data_mut()[new] = p.layers[k].norm_scale.data()[old];
            q.layers[k].norm_bias.data_mut()[new] = p.layers[k].norm_bias.data()[old];
            for row in 0..c {
                q.layers[k + 1].conv.data_mut()[row * c + new] = p.layers[k + 1].conv.at2(row, old);
            }
        }
        assert_ne!(p, q);
        let after = q.generate(&z, Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-8);
    }

    #[test]
    fn channel_norm_output_statistics() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..3 * 16).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.0).collect();
        let x = tape.leaf(Tensor::new(vec![3, 16], data.clone()).unwrap());
        let y = x.channel_norm(CHANNEL_NORM_EPS).unwrap().value();
        for ch in 0..3 {
            let row = &data[ch * 16..(ch + 1) * 16];
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 16.0;
            let out = &y.data()[ch * 16..(ch + 1) * 16];
            let om = out.iter().sum::<f64>() / 16.0;
            let ov = out.iter().map(|r| (r - om).powi(2)).sum::<f64>() / 16.0;
            assert!(om.abs() < 1e-6);
            assert!((ov - v / (v + CHANNEL_NORM_EPS)).abs() < 1e-6);
            assert!((ov - 1.0).abs() < 1e-5);
        }
    }
}
