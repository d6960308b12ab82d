use std::fs;
use std::path::Path;
use std::process::Command;

use vip_cli::pipeline::{self, Artifacts};
use vip_cli::ExperimentConfig;
use vip_core::io;
use vip_core::metrics::psnr;
use vip_core::tensor::vtn;

const TINY: &str = r#"{
  "experiment": "denoise",
  "seed": 12,
  "dataset": {"name": "crescent-ring", "count": 3, "size": [8, 8]},
  "forward": {"kind": "denoise", "snr_db": 15},
  "decoder": {"num_layers": 2, "channels": 4, "latent_dim": 3, "output_size": [8, 8], "seed_size": [2, 2]},
  "train": {"iterations": 12, "mc_samples": 2},
  "reconstruction_samples": 3,
  "checkpoint_every": 4
}"#;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text).unwrap()
}

fn with_iterations(n: usize) -> ExperimentConfig {
    let mut c = cfg(TINY);
    c.train.iterations = n;
    c
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn zero_iterations_writes_tree_and_noisy_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::run(&with_iterations(0), dir.path()).unwrap();
    for f in [
        "config.json",
        "data/truth.vtn",
        "data/truth_000.pgm",
        "measurements.bin",
        "checkpoint.bin",
        "train.csv",
        "recon/mean.vtn",
        "recon/mean_002.pgm",
        "recon/samples_000.vtn",
        "metrics.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let set = io::load_measurements(dir.path().join("measurements.bin")).unwrap();
    let truth = set.ground_truth.as_ref().unwrap();
    let baseline = m.column("psnr_input").unwrap();
    for ((y, x), got) in set.observations.iter().zip(truth).zip(&baseline) {
        let noisy = y.clone().reshape(vec![8, 8]).unwrap();
        assert_eq!(*got, psnr(&noisy, x, 1.0).unwrap());
    }
    let csv = fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(csv, "iteration,objective,likelihood,prior,entropy\n");
    // An untrained run reconstructs from the initial posteriors.
    let state = io::load_checkpoint(dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(state.iteration, 0);
}

#[test]
fn same_config_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(TINY);
    pipeline::run(&c, a.path()).unwrap();
    pipeline::run(&c, b.path()).unwrap();
    for f in ["metrics.csv", "train.csv", "recon/mean.vtn", "checkpoint.bin", "measurements.bin"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::run(&cfg(TINY), a.path()).unwrap();
    let echoed = ExperimentConfig::load(a.path().join("config.json")).unwrap();
    pipeline::run(&echoed, b.path()).unwrap();
    for f in ["metrics.csv", "train.csv", "config.json"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn different_seed_changes_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut other = cfg(TINY);
    other.seed += 1;
    pipeline::run(&cfg(TINY), a.path()).unwrap();
    pipeline::run(&other, b.path()).unwrap();
    assert_ne!(read(a.path().join("train.csv")), read(b.path().join("train.csv")));
}

#[test]
fn staged_run_matches_one_shot() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(TINY);
    pipeline::run(&c, a.path()).unwrap();
    let art = Artifacts::new(b.path()).unwrap();
    pipeline::synth(&c, &art).unwrap();
    pipeline::measure(&c, &art).unwrap();
    pipeline::train(&c, &art, None).unwrap();
    pipeline::reconstruct(&c, &art).unwrap();
    pipeline::report(&c, &art).unwrap();
    for f in ["metrics.csv", "train.csv", "recon/mean.vtn"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(TINY);
    pipeline::run(&c, a.path()).unwrap();

    let art = Artifacts::new(b.path()).unwrap();
    let short = with_iterations(4);
    pipeline::synth(&short, &art).unwrap();
    pipeline::measure(&short, &art).unwrap();
    pipeline::train(&short, &art, None).unwrap();
    let ckpt = b.path().join("checkpoints/checkpoint_000004.bin");
    assert!(ckpt.exists());
    pipeline::train(&c, &art, Some(&ckpt)).unwrap();
    assert_eq!(read(a.path().join("checkpoint.bin")), read(b.path().join("checkpoint.bin")));
    assert_eq!(read(a.path().join("train.csv")), read(b.path().join("train.csv")));
}

#[test]
fn cs_run_emits_dirty_images_and_ring_profile() {
    let text = r#"{
      "experiment": "cs-interferometry",
      "seed": 2,
      "dataset": {"name": "crescent-ring", "count": 2, "size": [8, 8]},
      "forward": {"kind": "interferometric-cs", "tracks": 3, "points_per_track": 6, "max_radius": 3, "snr_db": 30},
      "decoder": {"num_layers": 2, "channels": 4, "latent_dim": 3, "output_size": [8, 8], "seed_size": [2, 2]},
      "train": {"iterations": 3},
      "reconstruction_samples": 2,
      "ring": {"center": [3.5, 3.5], "radius": 2.5, "angles": 12}
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::run(&cfg(text), dir.path()).unwrap();
    assert!(dir.path().join("dirty/dirty_001.pgm").exists());
    for col in ["psnr_dirty_lowpass", "psnr_recon_lowpass", "psnr_dirty_truth", "psnr_recon"] {
        assert_eq!(m.column(col).unwrap().len(), 2, "{col}");
    }
    let ring = fs::read_to_string(dir.path().join("ring_profile.csv")).unwrap();
    let mut lines = ring.lines();
    assert_eq!(lines.next(), Some("frame,angle_index,truth,reconstruction,dirty"));
    assert_eq!(lines.count(), 2 * 12);
    let dirty = vtn::load(dir.path().join("dirty/dirty.vtn")).unwrap();
    assert_eq!(dirty.shape(), &[2, 8, 8]);
}

#[test]
fn baseline_run_and_directory_input() {
    let src = tempfile::tempdir().unwrap();
    let blob = vip_core::Tensor::new(
        vec![8, 8],
        (0..64)
            .map(|i| {
                let (r, c) = ((i / 8) as f64 - 3.5, (i % 8) as f64 - 3.5);
                0.1 + 0.8 * (-(r * r + c * c) / 6.0).exp()
            })
            .collect(),
    )
    .unwrap();
    io::save_pgm(src.path().join("a.pgm"), &blob, 16).unwrap();
    io::save_pgm(src.path().join("b.pgm"), &blob.map(|v| 1.0 - v), 16).unwrap();
    let text = format!(
        r#"{{
          "experiment": "baseline",
          "seed": 1,
          "dataset": {{"input_dir": {:?}}},
          "forward": {{"kind": "denoise", "sigma": 0.1}},
          "decoder": {{"num_layers": 2, "channels": 4, "latent_dim": 3, "output_size": [8, 8], "seed_size": [2, 2]}},
          "dip": {{"iterations": 20, "lr": 0.01, "checkpoint_every": 5}},
          "tv": {{"lambda": 0.05, "iterations": 30, "step": 0.01}}
        }}"#,
        src.path()
    );
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::run(&cfg(&text), dir.path()).unwrap();
    assert_eq!(m.rows.len(), 2);
    for col in ["psnr_input", "psnr_tv", "psnr_dip_full", "psnr_dip_best"] {
        assert!(m.column(col).is_some(), "{col}");
    }
    let full = m.column("psnr_dip_full").unwrap();
    let best = m.column("psnr_dip_best").unwrap();
    assert!(full.iter().zip(&best).all(|(f, b)| b >= f));
    assert!(!dir.path().join("checkpoint.bin").exists());
}

#[test]
fn model_selection_writes_scores() {
    let text = r#"{
      "experiment": "model-select",
      "seed": 3,
      "dataset": {"name": "two-class-digits", "count": 1, "size": [8, 8]},
      "forward": {"kind": "denoise", "snr_db": 15},
      "decoder": {"num_layers": 2, "channels": 4, "latent_dim": 3, "output_size": [8, 8], "seed_size": [2, 2]},
      "train": {"iterations": 5},
      "selection": {"train_per_class": 2, "cases_per_class": 2, "fit": {"fit_iterations": 5, "eval_samples": 4}}
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let m = pipeline::run(&cfg(text), dir.path()).unwrap();
    assert_eq!(m.columns, ["true_class", "selected", "correct"]);
    assert_eq!(m.rows.len(), 4);
    let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert!(scores.starts_with("case,class_0,class_1,selected\n"));
    assert!(dir.path().join("models/class_1.bin").exists());
}

fn vip(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vip"))
        .args(args)
        .env("VIP_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn binary_runs_and_reports_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, TINY).unwrap();
    let out = dir.path().join("out");
    let o = vip(&["run", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = ExperimentConfig::load(out.join("config.json")).unwrap();
    assert_eq!(echoed.seed, 99);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, TINY.replace("\"seed\": 12,", "")).unwrap();
    assert_eq!(vip(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(vip(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(vip(&["frobnicate"]).status.code(), Some(2));
    // No output directory anywhere.
    assert_eq!(vip(&["synth", "--config", good.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hot.json");
    // sigma² underflows to zero, so the likelihood is infinite.
    let text = TINY.replace("\"snr_db\": 15", "\"sigma\": 1e-170");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let o = vip(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint_last_good.bin").exists());
}
