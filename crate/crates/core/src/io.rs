//! On-disk formats: PGM images, training checkpoints and measurement sets.
//!
//! Checkpoints and measurement sets are one line of JSON followed by VTN1
//! arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, MeasurementSet};
use crate::generator::{DeepDecoderConfig, Generator, GeneratorParams};
use crate::optim::Adam;
use crate::tensor::{vtn, Tensor};
use crate::train::TrainState;
use crate::variational::GaussianVariational;

const CHECKPOINT_FORMAT: &str = "vip-checkpoint/1";
const MEASUREMENT_FORMAT: &str = "vip-measurements/1";

/// Writes a binary PGM (P5) with 8 or 16 bits, clamping to `[0, 1]`.
pub fn write_pgm<W: Write>(out: &mut W, image: &Tensor, bits: u8) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "PGM needs an [H, W] image".into(),
            })
        }
    };
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        b => return Err(Error::config(format!("PGM depth must be 8 or 16, got {b}"))),
    };
    write!(out, "P5\n{w} {h}\n{maxval}\n")?;
    let mut buf = Vec::with_capacity(h * w * (bits as usize / 8));
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if bits == 8 {
            buf.push(q as u8);
        } else {
            buf.extend((q as u16).to_be_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<u32> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM header token {tok:?}")))
}

/// Reads a binary PGM into `[0, 1]` values.
pub fn read_pgm<R: Read>(input: R) -> Result<Tensor> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    if &magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let w = pgm_token(&mut r)? as usize;
    let h = pgm_token(&mut r)? as usize;
    let maxval = pgm_token(&mut r)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PGM header {w}×{h} max {maxval}")));
    }
    let bytes = if maxval > 255 { 2 } else { 1 };
    let mut raw = vec![0u8; w * h * bytes];
    r.read_exact(&mut raw)?;
    let data = if bytes == 1 {
        raw.iter().map(|&b| b as f64 / maxval as f64).collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
            .collect()
    };
    Tensor::new(vec![h, w], data)
}

pub fn save_pgm(path: impl AsRef<Path>, image: &Tensor, bits: u8) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_pgm(&mut f, image, bits)?;
    f.flush()?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_pgm(File::open(path)?)
}

fn read_header<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("missing JSON header line".into()));
    }
    Ok(line)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    iteration: usize,
    decoder: DeepDecoderConfig,
    posteriors: usize,
    theta_lr: f64,
    theta_steps: u64,
    phi_lr: Vec<f64>,
    phi_steps: Vec<u64>,
}

/// Serializes the full training state, optimizer moments included.
pub fn write_checkpoint<W: Write>(out: &mut W, state: &TrainState<GeneratorParams>) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        iteration: state.iteration,
        decoder: state.generator.config().clone(),
        posteriors: state.posteriors.len(),
        theta_lr: state.theta_opt.lr,
        theta_steps: state.theta_opt.step_count,
        phi_lr: state.phi_opts.iter().map(|o| o.lr).collect(),
        phi_steps: state.phi_opts.iter().map(|o| o.step_count).collect(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for t in state.generator.parameters() {
        vtn::write(out, t)?;
    }
    for t in state.theta_opt.first.iter().chain(&state.theta_opt.second) {
        vtn::write(out, t)?;
    }
    for (q, o) in state.posteriors.iter().zip(&state.phi_opts) {
        for t in [&q.mu, &q.l_factor].into_iter().chain(&o.first).chain(&o.second) {
            vtn::write(out, t)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<TrainState<GeneratorParams>> {
    let mut r = BufReader::new(input);
    let header: CheckpointHeader = serde_json::from_str(&read_header(&mut r)?)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unexpected checkpoint format {:?}", header.format)));
    }
    let n = header.posteriors;
    if header.phi_lr.len() != n || header.phi_steps.len() != n {
        return Err(Error::Format("optimizer entries do not match posterior count".into()));
    }
    header.decoder.validate()?;
    let n_params = 2 + 3 * header.decoder.num_layers;
    let mut read_n = |k: usize| (0..k).map(|_| vtn::read(&mut r)).collect::<Result<Vec<_>>>();
    let params = read_n(n_params)?;
    let generator = GeneratorParams::from_tensors(header.decoder.clone(), params)?;
    let first = read_n(n_params)?;
    let second = read_n(n_params)?;
    let theta_opt = Adam {
        lr: header.theta_lr,
        step_count: header.theta_steps,
        first,
        second,
    };
    let mut posteriors = Vec::with_capacity(n);
    let mut phi_opts = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = read_n(6)?.into_iter();
        let mut next = || t.next().expect("six arrays read");
        posteriors.push(GaussianVariational::new(next(), next())?);
        phi_opts.push(Adam {
            lr: header.phi_lr[i],
            step_count: header.phi_steps[i],
            first: vec![next(), next()],
            second: vec![next(), next()],
        });
    }
    Ok(TrainState {
        generator,
        posteriors,
        theta_opt,
        phi_opts,
        iteration: header.iteration,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState<GeneratorParams>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, state)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState<GeneratorParams>> {
    read_checkpoint(File::open(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementHeader {
    format: String,
    model: ForwardModel,
    count: usize,
    ground_truth: bool,
}

/// Header, then `[N, m]` stacked observations, then `[N, H, W]` ground truth
/// when present.
pub fn write_measurements<W: Write>(out: &mut W, set: &MeasurementSet) -> Result<()> {
    let m = set.model.measurement_len();
    let n = set.len();
    if n == 0 {
        return Err(Error::config("cannot store an empty measurement set"));
    }
    let header = MeasurementHeader {
        format: MEASUREMENT_FORMAT.into(),
        model: set.model.clone(),
        count: n,
        ground_truth: set.ground_truth.is_some(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let mut stacked = Vec::with_capacity(n * m);
    for y in &set.observations {
        if y.numel() != m {
            return Err(Error::ShapeMismatch {
                op: "write_measurements",
                lhs: vec![m],
                rhs: y.shape().to_vec(),
            });
        }
        stacked.extend_from_slice(y.data());
    }
    vtn::write(out, &Tensor::new(vec![n, m], stacked)?)?;
    if let Some(gt) = &set.ground_truth {
        let (h, w) = set.model.geometry;
        let data: Vec<f64> = gt.iter().flat_map(|x| x.data().iter().copied()).collect();
        vtn::write(out, &Tensor::new(vec![gt.len(), h, w], data)?)?;
    }
    Ok(())
}

pub fn read_measurements<R: Read>(input: R) -> Result<MeasurementSet> {
    let mut r = BufReader::new(input);
    let header: MeasurementHeader = serde_json::from_str(&read_header(&mut r)?)?;
    if header.format != MEASUREMENT_FORMAT {
        return Err(Error::Format(format!("unexpected measurement format {:?}", header.format)));
    }
    header.model.validate()?;
    let m = header.model.measurement_len();
    let stacked = vtn::read(&mut r)?;
    if stacked.shape() != [header.count, m] {
        return Err(Error::Format(format!(
            "observations have shape {:?}, header says [{}, {m}]",
            stacked.shape(),
            header.count
        )));
    }
    let observations = stacked
        .data()
        .chunks_exact(m)
        .map(|c| Tensor::vector(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = if header.ground_truth {
        let (h, w) = header.model.geometry;
        let gt = vtn::read(&mut r)?;
        if gt.shape() != [header.count, h, w] {
            return Err(Error::Format("ground truth shape disagrees with the header".into()));
        }
        Some(
            gt.data()
                .chunks_exact(h * w)
                .map(|c| Tensor::new(vec![h, w], c.to_vec()))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(MeasurementSet {
        observations,
        model: header.model,
        ground_truth,
    })
}

pub fn save_measurements(path: impl AsRef<Path>, set: &MeasurementSet) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_measurements(&mut f, set)?;
    f.flush()?;
    Ok(())
}

pub fn load_measurements(path: impl AsRef<Path>) -> Result<MeasurementSet> {
    read_measurements(File::open(path)?)
}
