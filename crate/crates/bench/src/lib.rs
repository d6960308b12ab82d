//! Shared fixtures for the benchmarks in `benches/`.

use vip_core::forward::{synth_uv_coverage, ForwardKind, ForwardModel, ForwardOperator};
use vip_core::generator::init_generator;
use vip_core::synth::{synth_dataset, DatasetSpec};
use vip_core::{DeepDecoderConfig, GeneratorParams, Tensor};

/// Deep Decoder with the default depth and latent size.
pub fn decoder(channels: usize, size: usize) -> GeneratorParams {
    let cfg = DeepDecoderConfig {
        channels,
        output_size: (size, size),
        ..DeepDecoderConfig::default()
    };
    init_generator(&cfg, 1).expect("valid decoder")
}

pub fn crescent(size: usize) -> Tensor {
    let spec = DatasetSpec {
        name: "crescent-ring".into(),
        count: 1,
        size: (size, size),
        class: None,
    };
    synth_dataset(&spec, 0).expect("dataset").remove(0)
}

/// One operator of every kind for `size × size` images.
pub fn operators(size: usize) -> Vec<ForwardOperator> {
    let n = size * size;
    let kinds = [
        ForwardKind::Denoise,
        ForwardKind::InterferometricCs {
            uv: synth_uv_coverage((size, size), 10, 40, size as f64 / 2.0, 2).expect("coverage"),
        },
        ForwardKind::GaussianCs { seed: 3, rows: n / 2 },
        ForwardKind::FourierPhaseRetrieval,
        ForwardKind::GaussianPhaseRetrieval { seed: 4, rows: 4 * n },
    ];
    kinds
        .into_iter()
        .map(|k| ForwardModel::new(k, 0.1, (size, size)).and_then(|m| m.build()).expect("operator"))
        .collect()
}
