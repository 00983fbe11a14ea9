//! Early recognition benchmark: Top-k accuracy as a function of how much of
//! each recording the network has seen, with cumulative synaptic operations.
//!
//! The network emits a readout every bin, so the curve has one point per
//! `bin_us`. Correctness at observation time `S` uses only input before `S`.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::network::{ForwardOptions, NetState, Network, Readout};
use crate::training::{csv_err, encode_for, label_of, stack_batch};

pub use plot::{line_plot, Series};

/// Observation times of the summary table, in seconds.
pub const TABLE_TIMES_S: [f64; 5] = [0.3, 0.6, 1.0, 1.5, 2.0];
pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// True iff `y` is among the `k` highest scores; ties go to the lower index.
pub fn topk_correct(scores: &[f32], y: usize, k: usize) -> Result<bool> {
    let c = scores.len();
    if k == 0 || k > c {
        return Err(Error::arg(format!("k = {k} outside [1, {c}]")));
    }
    if y >= c {
        return Err(Error::arg(format!("label {y} out of range for {c} classes")));
    }
    let sy = scores[y];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > sy || (s == sy && j < y))
        .count();
    Ok(ahead < k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    /// End of each observation window, strictly increasing.
    pub times_s: Vec<f64>,
    pub ks: Vec<usize>,
    /// `topk[i][t]`: accuracy at `ks[i]` after `times_s[t]`.
    pub topk: Vec<Vec<f64>>,
    /// Output update period.
    pub delta_t_s: f64,
    /// Per-sample cumulative `(MACs, ACs)` in units of 10⁹.
    pub synops_cumulative: Vec<(f64, f64)>,
    pub samples: usize,
    /// Some recording was shorter than the evaluated duration.
    pub padded: bool,
    /// Samples and times where a larger k was wrong but a smaller k right.
    pub monotonicity_violations: usize,
}

impl EvalCurve {
    pub fn validate(&self) -> Result<()> {
        let n = self.times_s.len();
        if n == 0 {
            return Err(Error::arg("curve has no time points"));
        }
        if self.times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("curve times must increase strictly"));
        }
        if self.topk.len() != self.ks.len() || self.topk.iter().any(|a| a.len() != n) {
            return Err(Error::arg("accuracy table does not match times and ks"));
        }
        if self.synops_cumulative.len() != n {
            return Err(Error::arg("synops table does not match times"));
        }
        if self.topk.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::arg("accuracy outside [0, 1]"));
        }
        Ok(())
    }

    /// Index of the point whose window ends at `time_s`.
    pub fn index_at(&self, time_s: f64) -> Option<usize> {
        let i = (time_s / self.delta_t_s).round() as usize;
        let i = i.checked_sub(1)?;
        (i < self.times_s.len() && (self.times_s[i] - time_s).abs() < 1e-9 * time_s.max(1.0)).then_some(i)
    }

    pub fn accuracy(&self, k: usize) -> Option<&[f64]> {
        self.ks.iter().position(|&x| x == k).map(|i| self.topk[i].as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyEvalOptions {
    pub readout: Readout,
    pub ks: Vec<usize>,
    /// Length evaluated from the start of every recording.
    pub duration_us: u64,
    pub batch_size: usize,
    /// Steps per forward pass; state is carried between chunks.
    pub chunk_steps: usize,
}

impl Default for EarlyEvalOptions {
    fn default() -> Self {
        EarlyEvalOptions {
            readout: Readout::Mean,
            ks: DEFAULT_KS.to_vec(),
            duration_us: 2_000_000,
            batch_size: 16,
            chunk_steps: 250,
        }
    }
}

/// Runs every recording from its start and scores the readout after each bin.
pub fn evaluate_early(net: &mut Network, data: &[EventStream], opts: &EarlyEvalOptions) -> Result<EvalCurve> {
    if data.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::arg("ks must be non-empty and positive"));
    }
    let classes = net.config.num_classes;
    let bin_us = net.config.bin_us;
    let steps = opts.duration_us.div_ceil(bin_us) as usize;
    if steps == 0 {
        return Err(Error::arg("evaluation duration is zero"));
    }
    let chunk = opts.chunk_steps.max(1);
    let ks: Vec<usize> = opts.ks.iter().map(|&k| k.min(classes)).collect();
    let mut correct = vec![vec![0usize; steps]; ks.len()];
    let mut macs = vec![0u64; steps];
    let mut acs = vec![0u64; steps];
    let mut padded = false;
    let mut violations = 0;
    let connections = net.connections();

    for batch in data.chunks(opts.batch_size.max(1)) {
        let labels = batch
            .iter()
            .map(|s| label_of(s, classes))
            .collect::<Result<Vec<_>>>()?;
        let frames = batch
            .iter()
            .map(|s| encode_for(&net.config, s, 0, steps as u64 * bin_us))
            .collect::<Result<Vec<_>>>()?;
        padded |= frames.iter().any(|f| f.padded);
        let n = batch.len();
        let mut sums = vec![0.0f64; n * classes];
        let mut state: Option<NetState> = None;
        for start in (0..steps).step_by(chunk) {
            let len = chunk.min(steps - start);
            let seqs: Vec<_> = frames.iter().map(|f| f.window(start, len).to_tensor()).collect();
            let input = stack_batch(&seqs)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, false);
            let out = net.forward(&mut tape, &bound, &input, state.as_ref(), &ForwardOptions::eval())?;
            if out.trace.synops.len() != connections.len() {
                return Err(Error::State("trace does not match the network".into()));
            }
            for ops in &out.trace.synops {
                let acc = match ops.kind {
                    crate::network::OpKind::Mac => &mut macs,
                    crate::network::OpKind::Ac => &mut acs,
                };
                for (a, &v) in acc[start..start + len].iter_mut().zip(&ops.per_step) {
                    *a += v;
                }
            }
            let v = out.trace.readout.data();
            for t in 0..len {
                let step = start + t;
                for (b, &y) in labels.iter().enumerate() {
                    let row = &v[(t * n + b) * classes..][..classes];
                    let sum = &mut sums[b * classes..(b + 1) * classes];
                    for (s, &x) in sum.iter_mut().zip(row) {
                        *s += x as f64;
                    }
                    let scores: Vec<f32> = match opts.readout {
                        Readout::Mean => sum.iter().map(|&s| (s / (step + 1) as f64) as f32).collect(),
                        Readout::Last => row.to_vec(),
                    };
                    let mut prev: Option<(usize, bool)> = None;
                    for (i, &k) in ks.iter().enumerate() {
                        let ok = topk_correct(&scores, y, k)?;
                        correct[i][step] += ok as usize;
                        if let Some((pk, pok)) = prev {
                            if pk <= k && pok && !ok {
                                violations += 1;
                            }
                        }
                        prev = Some((k, ok));
                    }
                }
            }
            state = Some(out.state);
        }
    }
    let total = data.len() as f64;
    let delta_t_s = bin_us as f64 * 1e-6;
    let (mut m, mut a) = (0u64, 0u64);
    let synops_cumulative = macs
        .iter()
        .zip(&acs)
        .map(|(&dm, &da)| {
            m += dm;
            a += da;
            (m as f64 / total * 1e-9, a as f64 / total * 1e-9)
        })
        .collect();
    let curve = EvalCurve {
        times_s: (1..=steps).map(|t| t as f64 * delta_t_s).collect(),
        ks: opts.ks.clone(),
        topk: correct
            .iter()
            .map(|c| c.iter().map(|&x| x as f64 / total).collect())
            .collect(),
        delta_t_s,
        synops_cumulative,
        samples: data.len(),
        padded,
        monotonicity_violations: violations,
    };
    curve.validate()?;
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyReadoutConfig {
    /// Fires the early prediction when the largest potential reaches it.
    pub early_threshold: f32,
    /// Fixes the final class when the largest running mean reaches it.
    pub final_threshold: f32,
    pub k: usize,
}

impl Default for EarlyReadoutConfig {
    fn default() -> Self {
        EarlyReadoutConfig {
            early_threshold: 1.0,
            final_threshold: 1.0,
            k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyDecision {
    /// Step and the Top-k class set of the early prediction, if it fired.
    pub early: Option<(usize, Vec<usize>)>,
    pub final_class: usize,
    /// Step at which the final class was fixed.
    pub final_step: usize,
}

/// Class indices ordered by descending score, ties to the lower index.
fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Two-threshold readout over one sample's potentials `v[t][class]`.
pub fn early_readout_neuron(v: &[Vec<f32>], cfg: &EarlyReadoutConfig) -> Result<EarlyDecision> {
    let first = v.first().ok_or_else(|| Error::arg("empty readout history"))?;
    let c = first.len();
    if c == 0 || v.iter().any(|row| row.len() != c) {
        return Err(Error::arg("readout rows must share a positive class count"));
    }
    if cfg.early_threshold.is_nan() || cfg.final_threshold.is_nan() {
        return Err(Error::arg("thresholds must not be NaN"));
    }
    let k = cfg.k.clamp(1, c);
    let mut early = None;
    let mut sums = vec![0.0f64; c];
    let mut mean = vec![0.0f32; c];
    for (t, row) in v.iter().enumerate() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if early.is_none() && max >= cfg.early_threshold {
            let mut set = ranking(row);
            set.truncate(k);
            early = Some((t, set));
        }
        for (s, &x) in sums.iter_mut().zip(row) {
            *s += x as f64;
        }
        for (m, &s) in mean.iter_mut().zip(&sums) {
            *m = (s / (t + 1) as f64) as f32;
        }
        let best = mean.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if best >= cfg.final_threshold {
            return Ok(EarlyDecision {
                early,
                final_class: ranking(&mean)[0],
                final_step: t,
            });
        }
    }
    Ok(EarlyDecision {
        early,
        final_class: ranking(&mean)[0],
        final_step: v.len() - 1,
    })
}

/// Files written by [`emit_reports`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub accuracy_time_svg: PathBuf,
    pub accuracy_synops_svg: PathBuf,
    pub table_md: PathBuf,
}

pub fn write_curve_csv(curve: &EvalCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["time_s".to_string()];
    header.extend(curve.ks.iter().map(|k| format!("top{k}")));
    header.extend(["macs_g".to_string(), "acs_g".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for (t, &time) in curve.times_s.iter().enumerate() {
        let mut row = vec![time.to_string()];
        row.extend(curve.topk.iter().map(|a| a[t].to_string()));
        let (m, a) = curve.synops_cumulative[t];
        row.extend([m.to_string(), a.to_string()]);
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve CSV back as its header and numeric rows.
pub fn read_curve_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Markdown table of one or more curves at the given observation times.
pub fn markdown_table(curves: &[(String, &EvalCurve)], times_s: &[f64]) -> String {
    let mut out = String::from("| Model | Metric |");
    for &t in times_s {
        let label = if ((t * 10.0).round() - t * 10.0).abs() < 1e-9 {
            format!("{t:.1}")
        } else {
            format!("{t}")
        };
        out.push_str(&format!(" {label}s |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(times_s.len()));
    out.push('\n');
    for (name, curve) in curves {
        let cells = |f: &dyn Fn(usize) -> String| -> Vec<String> {
            times_s
                .iter()
                .map(|&t| curve.index_at(t).map_or_else(|| "n/a".to_string(), f))
                .collect()
        };
        let mut rows: Vec<(String, Vec<String>)> = Vec::new();
        for (j, &k) in curve.ks.iter().enumerate() {
            rows.push((format!("Top-{k} (%)"), cells(&|i| format!("{:.1}", curve.topk[j][i] * 100.0))));
        }
        rows.push(("MACs (G)".into(), cells(&|i| format!("{:.4}", curve.synops_cumulative[i].0))));
        rows.push(("ACs (G)".into(), cells(&|i| format!("{:.4}", curve.synops_cumulative[i].1))));
        for (metric, values) in &rows {
            out.push_str(&format!("| {name} | {metric} |"));
            for v in values {
                out.push_str(&format!(" {v} |"));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes the CSV, both plots and the table for one or more labelled curves.
/// With several curves the files are suffixed by label and the plots and
/// table are shared.
pub fn emit_reports(curves: &[(String, EvalCurve)], out_dir: &Path, table_times_s: &[f64]) -> Result<Vec<ReportFiles>> {
    if curves.is_empty() {
        return Err(Error::arg("no curves to report"));
    }
    for (_, c) in curves {
        c.validate()?;
    }
    fs::create_dir_all(out_dir)?;
    let single = curves.len() == 1;
    let time_svg = out_dir.join("accuracy_over_time.svg");
    let synops_svg = out_dir.join("accuracy_over_synops.svg");
    let table = out_dir.join("table.md");

    let mut time_series = Vec::new();
    let mut synops_series = Vec::new();
    let mut files = Vec::new();
    for (name, curve) in curves {
        let csv = if single {
            out_dir.join("curve.csv")
        } else {
            out_dir.join(format!("curve_{}.csv", sanitize(name)))
        };
        write_curve_csv(curve, &csv)?;
        for (j, &k) in curve.ks.iter().enumerate() {
            let label = if single { format!("Top-{k}") } else { format!("{name} Top-{k}") };
            time_series.push(Series {
                label: label.clone(),
                points: curve.times_s.iter().zip(&curve.topk[j]).map(|(&t, &a)| (t, a)).collect(),
            });
            synops_series.push(Series {
                label,
                points: curve
                    .synops_cumulative
                    .iter()
                    .zip(&curve.topk[j])
                    .map(|(&(m, a), &acc)| (m + a, acc))
                    .collect(),
            });
        }
        files.push(ReportFiles {
            csv,
            accuracy_time_svg: time_svg.clone(),
            accuracy_synops_svg: synops_svg.clone(),
            table_md: table.clone(),
        });
    }
    fs::write(&time_svg, line_plot(&time_series, "Accuracy over observation time", "observation time (s)", "accuracy"))?;
    fs::write(
        &synops_svg,
        line_plot(&synops_series, "Accuracy over synaptic operations", "cumulative SynOps (G)", "accuracy"),
    )?;
    let named: Vec<(String, &EvalCurve)> = curves.iter().map(|(n, c)| (n.clone(), c)).collect();
    fs::write(&table, markdown_table(&named, table_times_s))?;
    Ok(files)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
