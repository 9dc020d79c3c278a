//! Patch sampling, Adam and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{FusionConfig, LrSchedule};
use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::loss;
use crate::network::{self, save_checkpoint};
use crate::params::NetworkParams;
use crate::tensor::{Tape, Tensor};

/// One crop window: pair index plus top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub pair: usize,
    pub top: usize,
    pub left: usize,
}

/// Origins of every `crop×crop` window on a `stride` grid. Empty when the
/// image is smaller than the crop.
pub fn crop_origins(height: usize, width: usize, crop: usize, stride: usize) -> Vec<(usize, usize)> {
    if crop > height || crop > width || stride == 0 {
        return Vec::new();
    }
    let tops = (0..=height - crop).step_by(stride);
    tops.flat_map(|t| (0..=width - crop).step_by(stride).map(move |l| (t, l)))
        .collect()
}

/// Every window of every pair in a seeded shuffled order, grouped into
/// batches of `batch` (the last batch may be short). Pairs smaller than the
/// crop are skipped with a warning.
pub fn sample_crops(pairs: &[ImagePair], crop: usize, stride: usize, batch: usize, seed: u64) -> Vec<Vec<CropWindow>> {
    let mut windows = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let origins = crop_origins(pair.height(), pair.width(), crop, stride);
        if origins.is_empty() {
            log::warn!(
                "skipping pair `{}`: {}x{} is smaller than the {crop}x{crop} crop",
                pair.id,
                pair.height(),
                pair.width()
            );
        }
        windows.extend(origins.into_iter().map(|(top, left)| CropWindow { pair: i, top, left }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    windows.chunks(batch.max(1)).map(<[CropWindow]>::to_vec).collect()
}

/// Stacks the windows of one batch into `B×1×crop×crop` infrared and visible
/// tensors.
pub fn assemble_batch(pairs: &[ImagePair], windows: &[CropWindow], crop: usize) -> Result<(Tensor, Tensor)> {
    let mut ir = Vec::with_capacity(windows.len());
    let mut vis = Vec::with_capacity(windows.len());
    for w in windows {
        let pair = pairs
            .get(w.pair)
            .ok_or_else(|| Error::invalid("assemble_batch", format!("pair index {} out of range", w.pair)))?;
        ir.push(pair.infrared.crop(w.top, w.left, crop, crop)?);
        vis.push(pair.visible_luma.crop(w.top, w.left, crop, crop)?);
    }
    Ok((Tensor::stack_batch(&ir)?, Tensor::stack_batch(&vis)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Steps taken so far.
    pub t: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, lr: f32, weight_decay: f32) -> Self {
        let zeros = || -> IndexMap<String, Tensor> {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// Bias-corrected Adam with decoupled weight decay (`p ← p − lr·wd·p` before
/// the Adam delta).
pub fn adam_step(params: &mut NetworkParams, grads: &IndexMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, p) in params.iter() {
        let Some(g) = grads.get(name) else {
            return Err(Error::Parameter {
                name: name.to_string(),
                message: "missing gradient".into(),
            });
        };
        if g.shape() != p.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                message: format!("gradient shape {:?} does not match {:?}", g.shape(), p.shape()),
            });
        }
    }
    state.t += 1;
    let AdamState {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
        t,
        ..
    } = *state;
    let bc1 = 1.0 - (b1 as f64).powi(t as i32);
    let bc2 = 1.0 - (b2 as f64).powi(t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let m = m.data_mut();
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = v.data_mut();
        for (i, pi) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            *pi -= lr * wd * *pi;
            *pi -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Learning rate for `epoch` (0-based).
pub fn learning_rate(config: &FusionConfig, epoch: usize) -> f32 {
    let o = &config.optim;
    match o.lr_schedule {
        LrSchedule::Constant => o.lr,
        LrSchedule::Linear => o.lr * (1.0 - o.lr_decay * epoch as f32).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f32,
    pub mse: f32,
    pub edge: f32,
    pub ssim: f32,
    pub lr: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<StepRecord>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,total,mse,edge,ssim,lr";

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::invalid(
                    "TrainLog::push",
                    format!("step {} does not follow {}", record.step, last.step),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn first(&self) -> Option<&StepRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn csv_row(r: &StepRecord) -> String {
        format!("{},{},{},{},{},{}", r.step, r.total, r.mse, r.edge, r.ssim, r.lr)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", Self::csv_row(r));
        }
        out
    }
}

/// Output locations for a run. Nothing is written when both are `None`.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Overwritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Step log CSV, rewritten at the end of every epoch.
    pub log_csv: Option<PathBuf>,
    /// Print the CSV header and every `log_every`-th row to stdout.
    pub echo_stdout: bool,
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))
}

/// Trains freshly initialised parameters (seeded by `config.seed`).
pub fn train(pairs: &[ImagePair], config: &FusionConfig) -> Result<(NetworkParams, TrainLog)> {
    let params = NetworkParams::init(config, config.seed)?;
    train_from(params, pairs, config, &TrainOptions::default())
}

/// One optimisation step: forward, loss, backward and Adam. Returns the loss
/// components measured before the update.
pub fn train_step(
    params: &mut NetworkParams,
    state: &mut AdamState,
    config: &FusionConfig,
    ir: &Tensor,
    vis: &Tensor,
) -> Result<loss::LossValues> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape, true);
    let a = tape.constant(ir.clone());
    let b = tape.constant(vis.clone());
    let out = network::forward(&mut tape, a, b, &pv, config)?;
    let parts = loss::loss_total(&mut tape, a, b, out.fused, &config.loss)?;
    let values = parts.values(&tape);
    if !values.total.is_finite() {
        return Ok(values);
    }
    tape.backward(parts.total)?;
    let grads: IndexMap<String, Tensor> = pv
        .iter()
        .map(|(name, var)| {
            let g = tape.grad(var).expect("parameters are bound with gradients");
            (name.to_string(), g)
        })
        .collect();
    adam_step(params, &grads, state)?;
    Ok(values)
}

pub fn train_from(
    mut params: NetworkParams,
    pairs: &[ImagePair],
    config: &FusionConfig,
    options: &TrainOptions,
) -> Result<(NetworkParams, TrainLog)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let o = &config.optim;
    let mut state = AdamState::new(&params, o.lr, o.weight_decay);
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut step = 0usize;
    let limit = o.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..o.epochs {
        if step >= limit {
            break;
        }
        state.lr = learning_rate(config, epoch);
        let batches = sample_crops(pairs, o.crop, o.stride, o.batch, config.seed.wrapping_add(epoch as u64));
        if batches.is_empty() {
            return Err(Error::Dataset(format!("no pair is at least {0}x{0} pixels", o.crop)));
        }
        for windows in &batches {
            if step >= limit {
                break 'epochs;
            }
            let (ir, vis) = assemble_batch(pairs, windows, o.crop)?;
            let v = train_step(&mut params, &mut state, config, &ir, &vis)?;
            if !v.total.is_finite() {
                return Err(Error::Divergence { step, loss: v.total });
            }
            let record = StepRecord {
                step,
                total: v.total,
                mse: v.mse,
                edge: v.edge,
                ssim: v.ssim,
                lr: state.lr,
            };
            if o.log_every > 0 && step % o.log_every == 0 {
                if options.echo_stdout {
                    if step == 0 {
                        println!("{}", TrainLog::CSV_HEADER);
                    }
                    println!("{}", TrainLog::csv_row(&record));
                } else {
                    log::info!("{}", TrainLog::csv_row(&record));
                }
            }
            log.push(record)?;
            step += 1;
        }
        if let Some(path) = &options.checkpoint {
            save_checkpoint(&params, config, path)?;
        }
        if let Some(path) = &options.log_csv {
            write_log(path, &log)?;
        }
        log::debug!("epoch {epoch} done after {step} steps");
    }
    if let Some(path) = &options.checkpoint {
        save_checkpoint(&params, config, path)?;
    }
    if let Some(path) = &options.log_csv {
        write_log(path, &log)?;
    }
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, log))
}
