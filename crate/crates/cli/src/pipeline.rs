//! Experiment stages. Each stage reads what earlier stages left in the
//! artifact tree, so they can run one at a time or chained by [`run`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use vip_core::baselines::{dip_fit, tv_rml, DipConfig};
use vip_core::forward::{add_noise, low_pass_target, ForwardModel, MeasurementSet};
use vip_core::generator::init_generator;
use vip_core::io;
use vip_core::metrics::{psnr, registered_psnr, AmbiguityGroup};
use vip_core::rng;
use vip_core::selection::{model_selection, ScoreMatrix};
use vip_core::synth::{ring_profile, synth_dataset, DatasetSpec};
use vip_core::tensor::vtn;
use vip_core::train::{reconstruct as draw_reconstruction, TrainState, Trainer};
use vip_core::{Error, GaussianVariational, GeneratorParams, Result, Tensor};

use crate::config::{tags, DatasetSource, ExperimentConfig, ExperimentKind};

const PEAK: f64 = 1.0;

/// Paths of the artifact tree under one output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn file(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    pub fn truth(&self) -> PathBuf {
        self.path("data/truth.vtn")
    }

    pub fn measurements(&self) -> PathBuf {
        self.path("measurements.bin")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint.bin")
    }

    pub fn train_csv(&self) -> PathBuf {
        self.path("train.csv")
    }

    pub fn recon_mean(&self) -> PathBuf {
        self.path("recon/mean.vtn")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.path("metrics.csv")
    }

    pub fn scores_csv(&self) -> PathBuf {
        self.path("scores.csv")
    }

    pub fn ring_csv(&self) -> PathBuf {
        self.path("ring_profile.csv")
    }
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::config("nothing to stack"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let data = images.iter().flat_map(|x| x.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::Format(format!("expected a stack, got shape {shape:?}")));
    }
    let inner: Vec<usize> = shape[1..].to_vec();
    let n: usize = inner.iter().product();
    t.data()
        .chunks_exact(n)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()))
        .collect()
}

fn save_images(art: &Artifacts, dir: &str, prefix: &str, images: &[Tensor]) -> Result<()> {
    vtn::save(art.file(&format!("{dir}/{prefix}.vtn"))?, &stack(images)?)?;
    for (i, x) in images.iter().enumerate() {
        io::save_pgm(art.file(&format!("{dir}/{prefix}_{i:03}.pgm"))?, x, 16)?;
    }
    Ok(())
}

fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no .pgm files in {}", dir.display())));
    }
    files.iter().map(io::load_pgm).collect()
}

/// Creates or imports the ground-truth images.
pub fn synth(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<Tensor>> {
    let images = match &cfg.dataset {
        DatasetSource::Synthetic(spec) => synth_dataset(spec, cfg.derive(&[tags::DATA]))?,
        DatasetSource::Directory { input_dir } => load_dir(input_dir)?,
    };
    info!("dataset: {} images of {:?}", images.len(), images[0].shape());
    save_images(art, "data", "truth", &images)?;
    Ok(images)
}

fn load_truth(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<Tensor>> {
    if art.truth().exists() {
        unstack(&vtn::load(art.truth())?)
    } else {
        synth(cfg, art)
    }
}

fn geometry(images: &[Tensor]) -> Result<(usize, usize)> {
    match images.first().map(|x| x.shape()) {
        Some([h, w]) => Ok((*h, *w)),
        _ => Err(Error::config("images must be two-dimensional")),
    }
}

/// Measures `images` with the configured operator and noise. `stream` picks
/// independent noise for different image groups of one run.
fn measure_images(cfg: &ExperimentConfig, images: &[Tensor], stream: u64) -> Result<MeasurementSet> {
    let geom = geometry(images)?;
    let kind = cfg.forward.kind(geom, cfg.seed)?;
    let mut r = rng::derived(cfg.seed, &[tags::NOISE, stream]);
    match (cfg.forward.snr_db, cfg.forward.sigma) {
        (Some(snr), _) => MeasurementSet::synthesize(images, kind, snr, &mut r),
        (None, Some(sigma)) => {
            let model = ForwardModel::new(kind, sigma, geom)?;
            let op = model.build()?;
            let observations = images
                .iter()
                .map(|x| add_noise(&op.apply(x)?, sigma, &mut r))
                .collect::<Result<Vec<_>>>()?;
            Ok(MeasurementSet {
                observations,
                model,
                ground_truth: Some(images.to_vec()),
            })
        }
        (None, None) => Err(Error::config("no noise level configured")),
    }
}

/// Writes `measurements.bin` and, for visibility data, the dirty images.
pub fn measure(cfg: &ExperimentConfig, art: &Artifacts) -> Result<MeasurementSet> {
    let images = load_truth(cfg, art)?;
    let set = measure_images(cfg, &images, 0)?;
    info!(
        "measured {} images with {} (sigma {:.4e}, {} components each)",
        set.len(),
        set.model.kind.name(),
        set.model.sigma,
        set.model.measurement_len()
    );
    io::save_measurements(art.file("measurements.bin")?, &set)?;
    if cfg.experiment == ExperimentKind::CsInterferometry {
        let op = set.model.build()?;
        let dirty = set
            .observations
            .iter()
            .map(|y| op.dirty_image(y))
            .collect::<Result<Vec<_>>>()?;
        save_images(art, "dirty", "dirty", &dirty)?;
    }
    Ok(set)
}

fn load_measurements(cfg: &ExperimentConfig, art: &Artifacts) -> Result<MeasurementSet> {
    if art.measurements().exists() {
        io::load_measurements(art.measurements())
    } else {
        measure(cfg, art)
    }
}

fn check_decoder(cfg: &ExperimentConfig, geom: (usize, usize)) -> Result<()> {
    if cfg.decoder.output_size != geom {
        return Err(Error::config(format!(
            "decoder output_size {:?} differs from image size {geom:?}",
            cfg.decoder.output_size
        )));
    }
    Ok(())
}

/// Fresh generator and posteriors exactly as a new training run starts.
pub fn initial_state(cfg: &ExperimentConfig, n: usize, stream: u64) -> Result<TrainState<GeneratorParams>> {
    let generator = init_generator(&cfg.decoder, cfg.derive(&[tags::GENERATOR, stream]))?;
    let k = cfg.decoder.latent_dim;
    let posteriors = (0..n)
        .map(|i| GaussianVariational::init(k, &mut rng::derived(cfg.seed, &[tags::POSTERIOR, stream, i as u64])))
        .collect();
    Ok(TrainState::new(generator, posteriors, &cfg.train))
}

fn csv_rows(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_owned).collect())
}

fn train_set(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    set: &MeasurementSet,
    state: TrainState<GeneratorParams>,
    tc: vip_core::train::TrainConfig,
    name: &str,
    csv_name: &str,
) -> Result<TrainState<GeneratorParams>> {
    let start = state.iteration;
    let mut trainer = Trainer::new(state, set, tc.clone())?;
    while trainer.state().iteration < tc.iterations {
        if let Err(e) = trainer.step() {
            let p = art.file(&format!("{name}_last_good.bin"))?;
            io::save_checkpoint(&p, trainer.state())?;
            log::error!("{e}; last good state saved to {}", p.display());
            return Err(e);
        }
        let it = trainer.state().iteration;
        if it % 100 == 0 || it == tc.iterations {
            let last = trainer.report().records.last().expect("a step was recorded");
            info!("{name} iteration {it}: objective {:.4}", last.objective);
        }
        if cfg.checkpoint_every.is_some_and(|k| it % k == 0) {
            io::save_checkpoint(art.file(&format!("checkpoints/{name}_{it:06}.bin"))?, trainer.state())?;
        }
    }
    let (state, report) = trainer.into_parts();
    let csv_path = art.file(csv_name)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    let mut text = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
    if start > 0 && csv_path.exists() {
        // Keep the history written before the resumed checkpoint.
        let old = csv_rows(&csv_path)?;
        let mut lines: Vec<String> = old.into_iter().take(start + 1).collect();
        lines.extend(text.lines().skip(1).map(str::to_owned));
        text = lines.join("\n") + "\n";
    }
    fs::write(&csv_path, text)?;
    io::save_checkpoint(art.file(&format!("{name}.bin"))?, &state)?;
    Ok(state)
}

/// Jointly trains the generator and every posterior; writes `checkpoint.bin`
/// and `train.csv`.
pub fn train(cfg: &ExperimentConfig, art: &Artifacts, resume: Option<&Path>) -> Result<TrainState<GeneratorParams>> {
    let set = load_measurements(cfg, art)?;
    check_decoder(cfg, set.model.geometry)?;
    let state = match resume {
        Some(p) => {
            let s = io::load_checkpoint(p)?;
            if s.generator.config() != &cfg.decoder {
                return Err(Error::config("checkpoint decoder differs from the config"));
            }
            info!("resuming from {} at iteration {}", p.display(), s.iteration);
            s
        }
        None => initial_state(cfg, set.len(), 0)?,
    };
    train_set(cfg, art, &set, state, cfg.train_config(), "checkpoint", "train.csv")
}

fn reconstruct_all(cfg: &ExperimentConfig, state: &TrainState<GeneratorParams>) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
    state
        .posteriors
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut r = rng::derived(cfg.seed, &[tags::RECON, i as u64]);
            draw_reconstruction(&state.generator, q, cfg.reconstruction_samples, &mut r)
        })
        .collect()
}

/// Posterior means and samples from the final checkpoint.
pub fn reconstruct(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<Tensor>> {
    let state = io::load_checkpoint(art.checkpoint())?;
    let out = reconstruct_all(cfg, &state)?;
    let means: Vec<Tensor> = out.iter().map(|(m, _)| m.clone()).collect();
    save_images(art, "recon", "mean", &means)?;
    for (i, (_, samples)) in out.iter().enumerate() {
        vtn::save(art.file(&format!("recon/samples_{i:03}.vtn"))?, &stack(samples)?)?;
    }
    info!("reconstructed {} images", means.len());
    Ok(means)
}

/// TV-RML and single-image decoder fits, as configured.
pub fn baseline(cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    let set = load_measurements(cfg, art)?;
    let op = set.model.build()?;
    if let Some(tv) = &cfg.tv {
        let images = set
            .observations
            .par_iter()
            .map(|y| tv_rml(&op, y, tv.lambda, tv.iterations, tv.step).map(|r| r.image))
            .collect::<Result<Vec<_>>>()?;
        save_images(art, "baselines", "tv", &images)?;
        info!("TV-RML done");
    }
    if let Some(dip) = &cfg.dip {
        check_decoder(cfg, set.model.geometry)?;
        let fits = set
            .observations
            .par_iter()
            .enumerate()
            .map(|(i, y)| {
                let d = DipConfig {
                    seed: cfg.derive(&[tags::DIP, i as u64]),
                    ..dip.clone()
                };
                dip_fit(&op, y, &cfg.decoder, &d)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut finals = Vec::new();
        for (i, fit) in fits.iter().enumerate() {
            let imgs: Vec<Tensor> = fit.checkpoints.iter().map(|(_, x)| x.clone()).collect();
            vtn::save(art.file(&format!("baselines/dip_{i:03}.vtn"))?, &stack(&imgs)?)?;
            finals.push(fit.final_image().cloned().ok_or_else(|| Error::config("dip produced no checkpoint"))?);
        }
        save_images(art, "baselines", "dip", &finals)?;
        info!("DIP fits done");
    }
    Ok(())
}

/// Per-index metric table with a trailing mean row.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Metrics {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        Some(c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["index".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.10}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rec = vec!["mean".to_string()];
        rec.extend(self.columns.iter().map(|c| format!("{:.10}", self.mean(c).unwrap_or(f64::NAN))));
        w.write_record(&rec).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn load_stack(path: PathBuf) -> Result<Option<Vec<Tensor>>> {
    if path.exists() {
        Ok(Some(unstack(&vtn::load(path)?)?))
    } else {
        Ok(None)
    }
}

/// Computes `metrics.csv` (and `ring_profile.csv` when a ring is set) from
/// the artifact tree.
pub fn report(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Metrics> {
    let truth = load_truth(cfg, art)?;
    let set = load_measurements(cfg, art)?;
    let op = set.model.build()?;
    let recon = load_stack(art.recon_mean())?;
    let n = truth.len();
    let mut columns: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut push = |name: &str, v: Vec<f64>| {
        columns.push(name.into());
        cols.push(v);
    };
    let psnr_all = |a: &[Tensor], b: &[Tensor]| -> Result<Vec<f64>> {
        a.iter().zip(b).map(|(x, y)| psnr(x, y, PEAK)).collect()
    };
    match cfg.experiment {
        ExperimentKind::Denoise | ExperimentKind::Baseline if op.model().kind.is_linear() => {
            let geom = set.model.geometry;
            let inputs = set
                .observations
                .iter()
                .map(|y| {
                    if set.model.kind == vip_core::forward::ForwardKind::Denoise {
                        y.clone().reshape(vec![geom.0, geom.1])
                    } else {
                        op.adjoint(y)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            push("psnr_input", psnr_all(&inputs, &truth)?);
        }
        ExperimentKind::CsInterferometry => {
            let radius = cfg.low_pass().ok_or_else(|| Error::config("no low-pass radius"))?;
            let targets = truth.iter().map(|x| low_pass_target(x, radius)).collect::<Result<Vec<_>>>()?;
            let dirty = set.observations.iter().map(|y| op.dirty_image(y)).collect::<Result<Vec<_>>>()?;
            push("psnr_dirty_lowpass", psnr_all(&dirty, &targets)?);
            if let Some(r) = &recon {
                push("psnr_recon_lowpass", psnr_all(r, &targets)?);
            }
            push("psnr_dirty_truth", psnr_all(&dirty, &truth)?);
        }
        ExperimentKind::PhaseRetrieval => {
            let init = initial_state(cfg, n, 0)?;
            let means: Vec<Tensor> = reconstruct_all(cfg, &init)?.into_iter().map(|(m, _)| m).collect();
            let reg = |a: &[Tensor]| -> Result<Vec<f64>> {
                a.iter()
                    .zip(&truth)
                    .map(|(x, y)| registered_psnr(x, y, AmbiguityGroup::FULL, PEAK))
                    .collect()
            };
            push("registered_psnr_init", reg(&means)?);
            if let Some(r) = &recon {
                push("registered_psnr_recon", reg(r)?);
            }
        }
        _ => {}
    }
    if let Some(r) = &recon {
        push("psnr_recon", psnr_all(r, &truth)?);
    }
    if let Some(tv) = load_stack(art.path("baselines/tv.vtn"))? {
        push("psnr_tv", psnr_all(&tv, &truth)?);
    }
    if let Some(dip) = load_stack(art.path("baselines/dip.vtn"))? {
        push("psnr_dip_full", psnr_all(&dip, &truth)?);
        let mut best = Vec::with_capacity(n);
        for (i, x) in truth.iter().enumerate() {
            let curve = unstack(&vtn::load(art.path(&format!("baselines/dip_{i:03}.vtn")))?)?;
            let b = curve
                .iter()
                .map(|c| psnr(c, x, PEAK))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            best.push(b);
        }
        push("psnr_dip_best", best);
    }
    let metrics = Metrics {
        columns,
        rows: (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect(),
    };
    metrics.write_csv(BufWriter::new(fs::File::create(art.metrics_csv())?))?;
    if let Some(ring) = &cfg.ring {
        write_ring_profile(cfg, art, &truth, recon.as_deref(), &op, &set, ring)?;
    }
    for c in &metrics.columns {
        info!("mean {c}: {:.3}", metrics.mean(c).unwrap_or(f64::NAN));
    }
    Ok(metrics)
}

fn write_ring_profile(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    truth: &[Tensor],
    recon: Option<&[Tensor]>,
    op: &vip_core::forward::ForwardOperator,
    set: &MeasurementSet,
    ring: &crate::config::RingConfig,
) -> Result<()> {
    let dirty = if cfg.experiment == ExperimentKind::CsInterferometry {
        Some(set.observations.iter().map(|y| op.dirty_image(y)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(art.ring_csv())?));
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["frame", "angle_index", "truth"];
    if recon.is_some() {
        header.push("reconstruction");
    }
    if dirty.is_some() {
        header.push("dirty");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (t, x) in truth.iter().enumerate() {
        let mut profiles = vec![ring_profile(x, ring.center, ring.radius, ring.angles)?];
        if let Some(r) = recon {
            profiles.push(ring_profile(&r[t], ring.center, ring.radius, ring.angles)?);
        }
        if let Some(d) = &dirty {
            profiles.push(ring_profile(&d[t], ring.center, ring.radius, ring.angles)?);
        }
        for k in 0..ring.angles {
            let mut rec = vec![t.to_string(), k.to_string()];
            rec.extend(profiles.iter().map(|p| format!("{:.10}", p[k])));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Outcome of the model-selection experiment.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub scores: ScoreMatrix,
    pub true_class: Vec<usize>,
}

impl SelectionOutcome {
    pub fn accuracy(&self) -> f64 {
        let sel = self.scores.selected();
        let hits = sel.iter().zip(&self.true_class).filter(|(a, b)| a == b).count();
        hits as f64 / sel.len() as f64
    }
}

fn class_spec(base: &DatasetSpec, class: usize, count: usize) -> DatasetSpec {
    DatasetSpec {
        name: "two-class-digits".into(),
        count,
        size: base.size,
        class: Some(class),
    }
}

/// Trains one generator per class, then scores held-out noisy cases against
/// both. Writes `scores.csv` and `metrics.csv`.
pub fn select(cfg: &ExperimentConfig, art: &Artifacts) -> Result<SelectionOutcome> {
    let setup = cfg
        .selection
        .as_ref()
        .ok_or_else(|| Error::config("model-select needs a selection section"))?;
    let DatasetSource::Synthetic(base) = &cfg.dataset else {
        return Err(Error::config("model-select needs a synthetic dataset"));
    };
    check_decoder(cfg, base.size)?;
    let mut candidates = Vec::new();
    let mut cases = Vec::new();
    let mut true_class = Vec::new();
    for class in 0..2u64 {
        let c = class as usize;
        let images = synth_dataset(&class_spec(base, c, setup.train_per_class), cfg.derive(&[tags::DATA, class]))?;
        let set = measure_images(cfg, &images, class)?;
        let state = initial_state(cfg, set.len(), class)?;
        let tc = vip_core::train::TrainConfig {
            seed: cfg.derive(&[tags::TRAIN, class]),
            ..cfg.train.clone()
        };
        let name = format!("models/class_{c}");
        let state = train_set(cfg, art, &set, state, tc, &name, &format!("{name}.csv"))?;
        candidates.push((format!("class_{c}"), state.generator));

        let held = synth_dataset(&class_spec(base, c, setup.cases_per_class), cfg.derive(&[tags::DATA, 10 + class]))?;
        let held_set = measure_images(cfg, &held, 10 + class)?;
        for (i, y) in held_set.observations.into_iter().enumerate() {
            cases.push((format!("class_{c}_{i:02}"), held_set.model.clone(), y));
            true_class.push(c);
        }
    }
    let fit = vip_core::selection::SelectionConfig {
        seed: cfg.derive(&[tags::SELECT]),
        ..setup.fit.clone()
    };
    let scores = model_selection(&candidates, &cases, &fit)?;
    scores.write_csv(BufWriter::new(fs::File::create(art.scores_csv())?))?;
    let selected = scores.selected();
    let metrics = Metrics {
        columns: vec!["true_class".into(), "selected".into(), "correct".into()],
        rows: true_class
            .iter()
            .zip(&selected)
            .map(|(&t, &s)| vec![t as f64, s as f64, (t == s) as u8 as f64])
            .collect(),
    };
    metrics.write_csv(BufWriter::new(fs::File::create(art.metrics_csv())?))?;
    let outcome = SelectionOutcome { scores, true_class };
    info!("selection accuracy {:.3}", outcome.accuracy());
    Ok(outcome)
}

/// Writes the effective config next to the artifacts.
pub fn echo_config(cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    let echo = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    fs::write(art.path("config.json"), echo.to_json()?)?;
    Ok(())
}

/// Runs every stage of the configured experiment.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    cfg.validate()?;
    let art = Artifacts::new(out)?;
    echo_config(cfg, &art)?;
    info!("running {:?} into {}", cfg.experiment, out.display());
    if cfg.experiment == ExperimentKind::ModelSelect {
        select(cfg, &art)?;
        return read_metrics(&art.metrics_csv());
    }
    synth(cfg, &art)?;
    measure(cfg, &art)?;
    if cfg.experiment != ExperimentKind::Baseline {
        train(cfg, &art, None)?;
        reconstruct(cfg, &art)?;
    }
    if cfg.dip.is_some() || cfg.tv.is_some() {
        baseline(cfg, &art)?;
    }
    report(cfg, &art)
}

/// Parses a `metrics.csv` written by [`Metrics::write_csv`], dropping the mean row.
pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.get(0) == Some("mean") {
            continue;
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Metrics { columns, rows })
}
