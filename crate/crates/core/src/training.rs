//! Losses, the optimizer, and the training loop.
//!
//! `CEM` applies cross-entropy to the time-averaged readout potential, `TET`
//! averages the cross-entropy of the potential at sampled steps, and the
//! combined loss is their plain sum.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::network::{ForwardOptions, Network, NetworkConfig, Readout};
use crate::params::ParamStore;
use crate::preprocess::{augment, encode, random_crop_window, AugmentSpec, Crop, FrameSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cem,
    Tet,
    #[default]
    Combined,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Number of evenly spaced steps sampled by TET; every step when unset.
    pub tet_samples: Option<usize>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            tet_samples: None,
        }
    }

    /// Steps sampled by TET for a sequence of `steps` bins; always ends on
    /// the last step.
    pub fn sample_steps(&self, steps: usize) -> Result<Vec<usize>> {
        match self.tet_samples {
            None => Ok((0..steps).collect()),
            Some(n) if n == 0 || n > steps => Err(Error::arg(format!(
                "TET sample count {n} must lie in [1, {steps}]"
            ))),
            Some(n) => Ok((1..=n).map(|i| i * steps / n - 1).collect()),
        }
    }

    pub fn loss(&self, tape: &mut Tape, v: Var, labels: &[usize]) -> Result<Var> {
        let steps = tape.shape(v)[0];
        match self.kind {
            LossKind::Cem => loss_cem(tape, v, labels),
            LossKind::Tet => loss_tet(tape, v, labels, &self.sample_steps(steps)?),
            LossKind::Combined => loss_combined(tape, v, labels, &self.sample_steps(steps)?),
        }
    }
}

fn check_history(tape: &Tape, v: Var, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let shape = tape.shape(v);
    if shape.len() != 3 || shape[1] != labels.len() {
        return Err(Error::arg(format!(
            "readout history {shape:?} does not match {} labels",
            labels.len()
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Cross-entropy of the time-averaged potential of `v: [T, N, C]`.
pub fn loss_cem(tape: &mut Tape, v: Var, labels: &[usize]) -> Result<Var> {
    check_history(tape, v, labels)?;
    let mean = tape.mean(v, 0)?;
    tape.cross_entropy(mean, labels)
}

/// Mean cross-entropy of the potential at each of `steps`.
pub fn loss_tet(tape: &mut Tape, v: Var, labels: &[usize], steps: &[usize]) -> Result<Var> {
    let (t, n, c) = check_history(tape, v, labels)?;
    if steps.is_empty() {
        return Err(Error::arg("TET needs at least one sampled step"));
    }
    if let Some(&bad) = steps.iter().find(|&&s| s >= t) {
        return Err(Error::arg(format!("sampled step {bad} outside [0, {t})")));
    }
    let flat = tape.reshape(v, &[t * n, c])?;
    let rows = if steps.len() == t && steps.iter().enumerate().all(|(i, &s)| i == s) {
        flat
    } else {
        let picked = steps
            .iter()
            .map(|&s| tape.narrow(flat, s * n, n))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&picked, 0)?
    };
    // the batch mean over repeated labels is the mean over steps of per-step CE
    let repeated: Vec<usize> = (0..steps.len()).flat_map(|_| labels.iter().copied()).collect();
    tape.cross_entropy(rows, &repeated)
}

pub fn loss_combined(tape: &mut Tape, v: Var, labels: &[usize], steps: &[usize]) -> Result<Var> {
    let cem = loss_cem(tape, v, labels)?;
    let tet = loss_tet(tape, v, labels, steps)?;
    tape.add(cem, tet)
}

/// Adam with decoupled weight decay, global-norm clipping and a cosine
/// learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig, total_steps: usize) -> Self {
        Adam {
            lr: cfg.lr,
            lr_min: cfg.lr_min,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            total_steps: total_steps.max(1),
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        let progress = (self.step as f64 / self.total_steps as f64).min(1.0);
        if self.lr <= self.lr_min {
            return self.lr;
        }
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Updates `params` from `grads` (one entry per parameter) and projects
    /// bounded parameters back into range. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.kind.is_dynamics() { 0.0 } else { self.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64 * scale;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
        params.project();
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Length of the random training crop.
    pub window_us: u64,
    /// Length evaluated from the start of each test recording.
    pub eval_window_us: u64,
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Stop once test Top-1 reaches this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.0,
            clip_norm: 10.0,
            window_us: 1_000_000,
            eval_window_us: 1_000_000,
            augment: AugmentSpec::default(),
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.window_us == 0 || self.eval_window_us == 0 {
            return Err(Error::Config("windows must be positive".into()));
        }
        self.augment
            .validate()
            .map_err(|e| Error::Config(format!("augment: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub eval_top5: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "train_loss", "eval_top1", "eval_top5", "wall_seconds"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.eval_top1),
                format!("{:.6}", e.eval_top5),
                format!("{:.3}", e.wall_seconds),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Square crop centred on the sensor, as large as the sensor allows.
pub fn sensor_crop(stream: &EventStream) -> Crop {
    Crop::centered(stream.width, stream.height, stream.width.min(stream.height) as u32)
}

pub fn label_of(stream: &EventStream, classes: usize) -> Result<usize> {
    match stream.label {
        Some(y) if y < classes => Ok(y),
        Some(y) => Err(Error::arg(format!("label {y} out of range for {classes} classes"))),
        None => Err(Error::arg("stream has no label")),
    }
}

/// Encodes `[t_start, t_end)` of a stream at the network's geometry.
pub fn encode_for(cfg: &NetworkConfig, stream: &EventStream, t_start: u64, t_end: u64) -> Result<FrameSequence> {
    encode(
        stream,
        sensor_crop(stream),
        (cfg.input[1], cfg.input[2]),
        cfg.bin_us,
        t_start,
        t_end,
    )
}

/// Stacks `[T, C, H, W]` sequences into one `[T, N, C, H, W]` batch.
pub fn stack_batch(seqs: &[Tensor]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::arg("empty batch"))?;
    let shape = first.shape().to_vec();
    if seqs.iter().any(|s| s.shape() != shape.as_slice()) {
        return Err(Error::arg("batch sequences differ in shape"));
    }
    let frame: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(first.numel() * seqs.len());
    for t in 0..shape[0] {
        for s in seqs {
            data.extend_from_slice(&s.data()[t * frame..(t + 1) * frame]);
        }
    }
    let mut out = vec![shape[0], seqs.len()];
    out.extend_from_slice(&shape[1..]);
    Tensor::new(&out, data)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b);
    rand::Rng::gen(&mut rng)
}

/// One optimizer step on a batch; returns the loss value.
pub fn train_step(
    net: &mut Network,
    opt: &mut Adam,
    batch: &Tensor,
    labels: &[usize],
    loss: &LossSpec,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let out = net.forward(&mut tape, &bound, batch, None, &ForwardOptions::train(dropout_seed))?;
    let l = loss.loss(&mut tape, out.readout, labels)?;
    let value = tape.value(l).item() as f64;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss became {value}")));
    }
    tape.backward(l)?;
    let grads: Vec<Vec<f32>> = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    opt.step(&mut net.params, &grads);
    Ok(value)
}

/// Top-1 and Top-5 accuracy of the configured readout over the first `window_us` of each
/// stream.
pub fn evaluate(net: &mut Network, data: &[EventStream], window_us: u64, batch_size: usize) -> Result<(f64, f64)> {
    let classes = net.config.num_classes;
    let (mut top1, mut top5) = (0usize, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let seqs = chunk
            .iter()
            .map(|s| encode_for(&net.config, s, 0, window_us).map(|f| f.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let labels = chunk
            .iter()
            .map(|s| label_of(s, classes))
            .collect::<Result<Vec<_>>>()?;
        let input = stack_batch(&seqs)?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let out = net.forward(&mut tape, &bound, &input, None, &ForwardOptions::eval())?;
        let scores = match net.config.readout {
            Readout::Mean => {
                let mean = tape.mean(out.readout, 0)?;
                tape.value(mean).data().to_vec()
            }
            Readout::Last => {
                let v = tape.value(out.readout).data();
                v[v.len() - chunk.len() * classes..].to_vec()
            }
        };
        for (n, &y) in labels.iter().enumerate() {
            let row = &scores[n * classes..(n + 1) * classes];
            top1 += crate::earlybench::topk_correct(row, y, 1)? as usize;
            top5 += crate::earlybench::topk_correct(row, y, 5.min(classes))? as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}

/// Trains `net` in place; `eval_data` drives the per-epoch accuracy columns.
pub fn train(
    net: &mut Network,
    train_data: &[EventStream],
    eval_data: &[EventStream],
    cfg: &TrainConfig,
    loss: &LossSpec,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let classes = net.config.num_classes;
    let labels = train_data
        .iter()
        .map(|s| label_of(s, classes))
        .collect::<Result<Vec<_>>>()?;
    let steps = (cfg.window_us / net.config.bin_us) as usize;
    loss.sample_steps(steps.max(1))?;
    let batches = train_data.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(&net.params, cfg, cfg.epochs * batches);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut seqs = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train_data[i];
                let sample_seed = mix(cfg.seed, epoch as u64, i as u64 + 1);
                let win = random_crop_window(s, cfg.window_us, sample_seed);
                let frames = encode_for(&net.config, s, win.t_start, win.t_end)?;
                let frames = augment(&frames, &cfg.augment, sample_seed ^ 0xa5a5);
                seqs.push(frames.to_tensor());
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let input = stack_batch(&seqs)?;
            let dropout_seed = mix(cfg.seed, epoch as u64, (train_data.len() + b) as u64 + 1);
            total += train_step(net, &mut opt, &input, &y, loss, dropout_seed)? * idx.len() as f64;
        }
        let (eval_top1, eval_top5) = if eval_data.is_empty() {
            (0.0, 0.0)
        } else {
            evaluate(net, eval_data, cfg.eval_window_us, cfg.batch_size)?
        };
        log.epochs.push(EpochMetrics {
            epoch,
            train_loss: total / train_data.len() as f64,
            eval_top1,
            eval_top5,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.target_accuracy.is_some_and(|t| eval_top1 >= t) {
            break;
        }
    }
    Ok(log)
}
