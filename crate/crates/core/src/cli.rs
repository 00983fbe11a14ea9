//! Command-line front end: `generate`, `train`, `eval` and `inspect`.
//!
//! Runs are described by a TOML [`RunConfig`]; every field has a default and
//! unknown keys are rejected. Command-line flags override file values and the
//! `EEVACT_SEED` environment variable overrides the file seed.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::earlybench::{emit_reports, evaluate_early, EarlyEvalOptions, EvalCurve, DEFAULT_KS, TABLE_TIMES_S};
use crate::error::{Error, Result};
use crate::event_io::{read_stream, synthetic_dataset, write_stream, EventStream, Pattern};
use crate::network::{load_checkpoint, save_checkpoint, Fusion, Network, NetworkConfig, Readout};
use crate::neurons::NeuronKind;
use crate::preprocess::AugmentSpec;
use crate::training::{csv_err, train, LossKind, LossSpec, TrainConfig};

pub const SEED_ENV: &str = "EEVACT_SEED";
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const CHECKPOINT_NAME: &str = "checkpoint.eesn";
pub const METRICS_NAME: &str = "metrics.csv";

/// Synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// One class per pattern, labelled in order.
    pub patterns: Vec<Pattern>,
    pub per_class: usize,
    pub test_per_class: usize,
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    /// Mean event rate in events per second.
    pub rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            patterns: vec![Pattern::BarLeft, Pattern::BarRight],
            per_class: 100,
            test_per_class: 25,
            width: 32,
            height: 32,
            duration_us: 500_000,
            rate: 20_000.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patterns.is_empty() {
            return Err(Error::Config("data.synthetic.patterns must not be empty".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("data.synthetic.per_class must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("data.synthetic.width and height must be positive".into()));
        }
        if self.duration_us == 0 {
            return Err(Error::Config("data.synthetic.duration_us must be positive".into()));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config("data.synthetic.rate must be positive".into()));
        }
        Ok(())
    }

    /// Train and test sets; the test set uses a disjoint seed stream.
    pub fn build(&self, seed: u64) -> Result<(Vec<EventStream>, Vec<EventStream>)> {
        let geometry = (self.width, self.height);
        let train = synthetic_dataset(&self.patterns, self.per_class, geometry, self.duration_us, self.rate, seed)?;
        let test = if self.test_per_class == 0 {
            Vec::new()
        } else {
            synthetic_dataset(
                &self.patterns,
                self.test_per_class,
                geometry,
                self.duration_us,
                self.rate,
                !seed,
            )?
        };
        Ok((train, test))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset written by `generate`; the synthetic recipe is used when unset.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub duration_us: u64,
    pub batch_size: usize,
    pub chunk_steps: usize,
    pub table_times_s: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let o = EarlyEvalOptions::default();
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            duration_us: o.duration_us,
            batch_size: o.batch_size,
            chunk_steps: o.chunk_steps,
            table_times_s: TABLE_TIMES_S.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        if self.duration_us == 0 || self.batch_size == 0 || self.chunk_steps == 0 {
            return Err(Error::Config(
                "eval.duration_us, eval.batch_size and eval.chunk_steps must be positive".into(),
            ));
        }
        if self.table_times_s.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("eval.table_times_s must be positive".into()));
        }
        Ok(())
    }

    pub fn options(&self, readout: Readout) -> EarlyEvalOptions {
        EarlyEvalOptions {
            readout,
            ks: self.ks.clone(),
            duration_us: self.duration_us,
            batch_size: self.batch_size,
            chunk_steps: self.chunk_steps,
        }
    }
}

/// One ablation combination; unset fields keep the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    pub name: String,
    pub neuron: Option<NeuronKind>,
    pub fusion: Option<Fusion>,
    pub loss: Option<LossKind>,
    pub readout: Option<Readout>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, initialization and training. Replaces `train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossSpec,
    pub eval: EvalConfig,
    pub sweep: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut network = NetworkConfig::desk(2);
        network.bin_us = 2000;
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            network,
            train: TrainConfig {
                epochs: 30,
                lr: 1e-2,
                window_us: 500_000,
                eval_window_us: 500_000,
                augment: AugmentSpec::identity(),
                ..TrainConfig::default()
            },
            loss: LossSpec::default(),
            eval: EvalConfig {
                duration_us: 500_000,
                ..EvalConfig::default()
            },
            sweep: Vec::new(),
        }
    }
}

/// A variant with its resolved network and loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedVariant {
    pub name: String,
    pub network: NetworkConfig,
    pub loss: LossSpec,
}

impl RunConfig {
    /// Parses `text` layered over [`RunConfig::default`], so a partial
    /// table keeps the run defaults for the keys it leaves out.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, user);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.data.manifest {
            if !m.is_file() {
                return Err(Error::Config(format!("data.manifest: {} does not exist", m.display())));
            }
        }
        self.data.synthetic.validate()?;
        self.network.validate().map_err(|e| Error::Config(format!("network: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.eval.validate()?;
        let mut names: Vec<&str> = self.sweep.iter().map(|v| v.name.as_str()).collect();
        if names.iter().any(|n| n.is_empty()) {
            return Err(Error::Config("sweep: every variant needs a name".into()));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("sweep: variant names must be unique".into()));
        }
        for v in self.variants() {
            v.network
                .validate()
                .map_err(|e| Error::Config(format!("sweep.{}: {e}", v.name)))?;
        }
        Ok(())
    }

    /// The sweep, or the base configuration as a single variant named `model`.
    pub fn variants(&self) -> Vec<ResolvedVariant> {
        let base = [Variant {
            name: "model".into(),
            ..Variant::default()
        }];
        let list = if self.sweep.is_empty() { &base[..] } else { &self.sweep[..] };
        list.iter()
            .map(|v| {
                let mut network = self.network.clone();
                let mut loss = self.loss;
                if let Some(n) = v.neuron {
                    network.neuron = n;
                }
                if let Some(f) = v.fusion {
                    network.fusion = f;
                }
                if let Some(r) = v.readout {
                    network.readout = r;
                }
                if let Some(k) = v.loss {
                    loss.kind = k;
                }
                ResolvedVariant {
                    name: v.name.clone(),
                    network,
                    loss,
                }
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Train and test streams, from the manifest or the synthetic recipe.
    pub fn datasets(&self) -> Result<(Vec<EventStream>, Vec<EventStream>)> {
        match &self.data.manifest {
            Some(m) => {
                let rows = read_manifest(m)?;
                let dir = m.parent().unwrap_or(Path::new("."));
                let (mut train, mut test) = (Vec::new(), Vec::new());
                for row in rows {
                    let stream = row.load(dir)?;
                    match row.split.as_str() {
                        "train" => train.push(stream),
                        "test" => test.push(stream),
                        other => return Err(Error::Validation(format!("manifest split '{other}'"))),
                    }
                }
                Ok((train, test))
            }
            None => self.data.synthetic.build(self.seed),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One dataset file with the metadata the container does not carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub label: usize,
    pub pattern: String,
    pub split: String,
    pub duration_us: u64,
}

impl ManifestRow {
    pub fn load(&self, dir: &Path) -> Result<EventStream> {
        let mut s = read_stream(dir.join(&self.file))?.stream;
        if self.duration_us < s.duration_us {
            return Err(Error::Validation(format!(
                "{}: manifest duration {} precedes the last event at {}",
                self.file, self.duration_us, s.duration_us
            )));
        }
        s.duration_us = self.duration_us;
        s.label = Some(self.label);
        Ok(s)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Validation(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes the synthetic train and test streams plus the manifest.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<ManifestRow>> {
    cfg.data.synthetic.validate()?;
    ensure_output_dir(out, force)?;
    let (train, test) = cfg.data.synthetic.build(cfg.seed)?;
    let mut rows = Vec::with_capacity(train.len() + test.len());
    for (split, set) in [("train", &train), ("test", &test)] {
        for (i, s) in set.iter().enumerate() {
            let label = s.label.expect("synthetic streams are labelled");
            let pattern = cfg.data.synthetic.patterns[label];
            let file = format!("{split}_{i:05}_{pattern}.eeva");
            write_stream(s, out.join(&file))?;
            rows.push(ManifestRow {
                file,
                label,
                pattern: pattern.to_string(),
                split: split.into(),
                duration_us: s.duration_us,
            });
        }
    }
    let mut w = csv::Writer::from_path(out.join(MANIFEST_NAME)).map_err(csv_err)?;
    for row in &rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Trains every variant into `<out>/<variant>/`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_output_dir(out, force)?;
    let (train_data, test_data) = cfg.datasets()?;
    let variants = cfg.variants();
    if resume.is_some() && variants.len() != 1 {
        return Err(Error::Validation("--resume needs a single-variant config".into()));
    }
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut written = Vec::new();
    for v in variants {
        let mut net = match resume {
            Some(path) => {
                let net = load_checkpoint(path)?;
                check_topology(&net.config, &v.network)?;
                net
            }
            None => Network::build(v.network.clone(), cfg.seed)?,
        };
        let log = train(&mut net, &train_data, &test_data, &cfg.train_config(), &v.loss)?;
        let dir = out.join(&v.name);
        fs::create_dir_all(&dir)?;
        save_checkpoint(&net, &dir.join(CHECKPOINT_NAME))?;
        log.write_csv(&dir.join(METRICS_NAME))?;
        if let Some(last) = log.epochs.last() {
            println!(
                "{}: {} epochs, loss {:.4}, top1 {:.3}",
                v.name, last.epoch, last.train_loss, last.eval_top1
            );
        }
        written.push(dir);
    }
    Ok(written)
}

/// Fields of the network configuration that differ.
fn config_diff(a: &NetworkConfig, b: &NetworkConfig) -> Result<Vec<String>> {
    let to_map = |c: &NetworkConfig| -> Result<serde_json::Map<String, serde_json::Value>> {
        match serde_json::to_value(c).map_err(|e| Error::Config(e.to_string()))? {
            serde_json::Value::Object(m) => Ok(m),
            _ => Err(Error::Config("network config is not a table".into())),
        }
    };
    let (ma, mb) = (to_map(a)?, to_map(b)?);
    Ok(ma.keys().filter(|k| ma.get(*k) != mb.get(*k)).cloned().collect())
}

fn check_topology(checkpoint: &NetworkConfig, config: &NetworkConfig) -> Result<()> {
    let diff = config_diff(checkpoint, config)?;
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "checkpoint and config disagree on network.{}",
            diff.join(", network.")
        )))
    }
}

/// Early-recognition reports for one checkpoint, or for every trained
/// variant under `cfg.output_dir` when `checkpoint` is unset.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<(String, EvalCurve)>> {
    cfg.validate()?;
    let (_, test_data) = cfg.datasets()?;
    if test_data.is_empty() {
        return Err(Error::Validation("no test streams to evaluate".into()));
    }
    let variants = cfg.variants();
    let jobs: Vec<(String, PathBuf, NetworkConfig)> = match checkpoint {
        Some(path) => {
            if variants.len() != 1 {
                return Err(Error::Validation("--checkpoint needs a single-variant config".into()));
            }
            vec![(variants[0].name.clone(), path.to_path_buf(), variants[0].network.clone())]
        }
        None => variants
            .iter()
            .map(|v| (v.name.clone(), cfg.output_dir.join(&v.name).join(CHECKPOINT_NAME), v.network.clone()))
            .collect(),
    };
    let mut curves = Vec::new();
    for (name, path, network) in jobs {
        let mut net = load_checkpoint(&path)?;
        check_topology(&net.config, &network)?;
        let opts = cfg.eval.options(net.config.readout);
        let curve = evaluate_early(&mut net, &test_data, &opts)?;
        if curve.padded {
            eprintln!("{name}: some recordings are shorter than the evaluated duration and were padded");
        }
        curves.push((name, curve));
    }
    fs::create_dir_all(out)?;
    emit_reports(&curves, out, &cfg.eval.table_times_s)?;
    print!("{}", fs::read_to_string(out.join("table.md"))?);
    Ok(curves)
}

/// Header, counts, duration, polarity totals and an event-rate histogram.
pub fn cmd_inspect(path: &Path, bins: usize, w: &mut impl Write) -> Result<()> {
    let loaded = read_stream(path)?;
    let s = &loaded.stream;
    let [off, on] = s.polarity_counts();
    writeln!(w, "file: {}", path.display())?;
    writeln!(w, "geometry: {}x{}", s.width, s.height)?;
    writeln!(w, "events: {}", s.event_count())?;
    writeln!(w, "duration_us: {}", s.duration_us)?;
    writeln!(w, "polarity: on={on} off={off}")?;
    writeln!(w, "resorted: {}", loaded.resorted)?;
    if s.events.is_empty() || bins == 0 {
        return Ok(());
    }
    let span = s.duration_us.max(1) + 1;
    let width_us = span.div_ceil(bins as u64);
    let mut counts = vec![0u64; bins];
    for e in &s.events {
        counts[((e.t / width_us) as usize).min(bins - 1)] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(1).max(1);
    writeln!(w, "event rate (events/s):")?;
    for (i, &c) in counts.iter().enumerate() {
        let rate = c as f64 / (width_us as f64 * 1e-6);
        let bar = "#".repeat((c * 40 / max) as usize);
        writeln!(
            w,
            "  {:>9.3}s {:>12.1} {bar}",
            (i as u64 * width_us) as f64 * 1e-6,
            rate
        )?;
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "eevact", version, about = "Early event-based action recognition with spiking networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train every configured variant and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Early-recognition curves, plots and the summary table.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate this checkpoint instead of the trained variants.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report directory; defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize an event file.
    Inspect {
        file: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Corrupt(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed, force } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let rows = cmd_generate(&cfg, &out, force)?;
            println!("wrote {} streams to {}", rows.len(), out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            epochs,
            resume,
            force,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let out = cfg.output_dir.clone();
            cmd_train(&cfg, &out, force, resume.as_deref())?;
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("eval"));
            cmd_eval(&cfg, checkpoint.as_deref(), &out)?;
        }
        Command::Inspect { file, bins } => {
            cmd_inspect(&file, bins, &mut std::io::stdout().lock())?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
