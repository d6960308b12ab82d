use proptest::prelude::*;
use vip_core::forward::{calibrate_sigma, low_pass_target, snr_db, synth_uv_coverage};
use vip_core::generator::init_generator;
use vip_core::io;
use vip_core::metrics::{psnr, registered_psnr, AmbiguityGroup};
use vip_core::rng;
use vip_core::train::joint_train;
use vip_core::{DeepDecoderConfig, ForwardKind, ForwardModel, GaussianVariational, MeasurementSet, Tensor, TrainConfig, TrainState};

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::new(vec![h, w], (0..h * w).map(|_| rng::uniform(&mut r, 0.01, 0.99)).collect()).unwrap()
}

fn small_decoder() -> DeepDecoderConfig {
    DeepDecoderConfig {
        num_layers: 2,
        channels: 4,
        latent_dim: 3,
        output_size: (8, 8),
        output_channels: 1,
        dropout_rate: 0.1,
        seed_size: (2, 2),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_operators_satisfy_the_adjoint_identity(h in 2usize..7, w in 2usize..7, seed in 0u64..1000, which in 0usize..3) {
        let kind = match which {
            0 => ForwardKind::Denoise,
            1 => ForwardKind::InterferometricCs {
                uv: synth_uv_coverage((h, w), 3, 5, (h.min(w) as f64 / 2.0).max(0.5), seed).unwrap(),
            },
            _ => ForwardKind::GaussianCs { seed, rows: h * w / 2 + 1 },
        };
        let op = ForwardModel::new(kind, 0.1, (h, w)).unwrap().build().unwrap();
        let x = image(h, w, seed);
        let mut r = rng::seeded(seed + 1);
        let y = Tensor::vector(rng::standard_normal(&mut r, op.measurement_len())).unwrap();
        let lhs: f64 = op.apply(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(op.adjoint(&y).unwrap().data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn phase_retrieval_ignores_global_sign(seed in 0u64..1000, fourier in any::<bool>()) {
        let kind = if fourier {
            ForwardKind::FourierPhaseRetrieval
        } else {
            ForwardKind::GaussianPhaseRetrieval { seed, rows: 40 }
        };
        let op = ForwardModel::new(kind, 0.1, (4, 5)).unwrap().build().unwrap();
        let x = image(4, 5, seed);
        let a = op.apply(&x).unwrap();
        let b = op.apply(&x.map(|v| -v)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn calibrated_noise_hits_the_requested_snr(db in -10.0f64..50.0, seed in 0u64..1000) {
        let clean = image(6, 6, seed);
        let sigma = calibrate_sigma(clean.data(), db).unwrap();
        prop_assert!((snr_db(clean.data(), sigma).unwrap() - db).abs() < 1e-9);
    }

    #[test]
    fn low_pass_is_a_projection(seed in 0u64..1000, radius in 0.0f64..5.0) {
        let x = image(8, 8, seed);
        let once = low_pass_target(&x, radius).unwrap();
        let twice = low_pass_target(&once, radius).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        // The mean survives every radius.
        prop_assert!((once.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn registered_psnr_is_invariant_to_group_action(seed in 0u64..1000, dr in 0usize..6, dc in 0usize..6, flip in any::<bool>(), neg in any::<bool>()) {
        let (h, w) = (6, 6);
        let x = image(h, w, seed);
        let est = image(h, w, seed + 7);
        let moved = Tensor::new(
            vec![h, w],
            (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    let c = if flip { w - 1 - c } else { c };
                    let v = est.at2((r + dr) % h, (c + dc) % w);
                    if neg { -v } else { v }
                })
                .collect(),
        )
        .unwrap();
        let a = registered_psnr(&est, &x, AmbiguityGroup::FULL, 1.0).unwrap();
        let b = registered_psnr(&moved, &x, AmbiguityGroup::FULL, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= psnr(&est, &x, 1.0).unwrap());
    }

    #[test]
    fn pgm_round_trip_is_within_half_a_level(seed in 0u64..1000, bits in prop::sample::select(vec![8u8, 16])) {
        let x = image(5, 7, seed);
        let mut buf = Vec::new();
        io::write_pgm(&mut buf, &x, bits).unwrap();
        let back = io::read_pgm(buf.as_slice()).unwrap();
        let levels = if bits == 8 { 255.0 } else { 65535.0 };
        prop_assert!(back.max_abs_diff(&x) <= 0.5 / levels + 1e-12);
    }

    #[test]
    fn gaussian_entropy_never_drops_below_the_ridge_floor(seed in 0u64..1000, k in 1usize..6, scale in 0.0f64..2.0) {
        let mut q = GaussianVariational::init(k, &mut rng::seeded(seed));
        q.l_factor.data_mut().iter_mut().for_each(|v| *v *= scale);
        let floor = 0.5 * k as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E * q.ridge()).ln();
        prop_assert!(q.entropy().unwrap() >= floor - 1e-9);
    }
}

fn measurement_set(n: usize) -> MeasurementSet {
    let images: Vec<Tensor> = (0..n as u64).map(|s| image(8, 8, s)).collect();
    MeasurementSet::synthesize(&images, ForwardKind::Denoise, 20.0, &mut rng::seeded(5)).unwrap()
}

#[test]
fn joint_training_is_reproducible_and_thread_independent() {
    let set = measurement_set(4);
    let cfg = TrainConfig {
        iterations: 15,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let g = init_generator(&small_decoder(), 2).unwrap();
        let mut r = rng::seeded(4);
        let qs = (0..4).map(|_| GaussianVariational::init(3, &mut r)).collect();
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| joint_train(g, qs, &set, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.report.objectives(), b.report.objectives());
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.posteriors, b.posteriors);
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = TrainConfig::default();
    let g = init_generator(&small_decoder(), 9).unwrap();
    let qs = vec![GaussianVariational::init(3, &mut rng::seeded(1))];
    let state = TrainState::new(g, qs, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    io::save_checkpoint(&path, &state).unwrap();
    let back = io::load_checkpoint(&path).unwrap();
    assert_eq!(back.generator, state.generator);
    assert_eq!(back.posteriors, state.posteriors);
    assert_eq!(back.iteration, 0);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(io::load_checkpoint(&path).is_err());
}

#[test]
fn measurements_file_round_trip() {
    let set = measurement_set(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    io::save_measurements(&path, &set).unwrap();
    let back = io::load_measurements(&path).unwrap();
    assert_eq!(back.observations, set.observations);
    assert_eq!(back.model, set.model);
    assert_eq!(back.ground_truth, set.ground_truth);
}
