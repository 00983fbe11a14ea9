//! Synaptic operation accounting.
//!
//! Every connection is charged `Σ nonzero inputs × fan-out`. Connections fed
//! by binary spikes are accumulates (ACs); connections fed by real or integer
//! values are multiply-accumulates (MACs). Batch norm is folded into the
//! preceding convolution and costs nothing.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Mac,
    Ac,
}

/// Static description of one connection of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionInfo {
    pub name: String,
    pub kind: OpKind,
    /// Operations per sample and step if every input were nonzero.
    pub dense_per_step: u64,
}

/// Effective operations of one connection, summed over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionOps {
    pub name: String,
    pub kind: OpKind,
    pub per_step: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpikes {
    pub name: String,
    /// Neurons in the layer per sample.
    pub units: usize,
    /// Spikes per step, summed over the batch.
    pub per_step: Vec<u64>,
}

/// Input activity of a connection: `[T·N, ...]` nonzero flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Activity {
    pub name: String,
    pub shape: Vec<usize>,
    pub active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub steps: usize,
    pub batch: usize,
    /// Readout potential history `[T, N, classes]`.
    pub readout: Tensor,
    pub spikes: Vec<LayerSpikes>,
    pub synops: Vec<ConnectionOps>,
    /// Filled only when requested in the forward options.
    pub activity: Vec<Activity>,
}

/// Operations per sample, split by kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SynOpsReport {
    pub macs_per_step: Vec<f64>,
    pub acs_per_step: Vec<f64>,
    pub dense_macs_per_step: f64,
    pub dense_acs_per_step: f64,
}

impl SynOpsReport {
    pub fn from_trace(trace: &ForwardTrace, connections: &[ConnectionInfo]) -> Result<Self> {
        if trace.synops.len() != connections.len()
            || trace
                .synops
                .iter()
                .zip(connections)
                .any(|(t, c)| t.name != c.name || t.kind != c.kind)
        {
            return Err(Error::arg("trace connections do not match the network"));
        }
        let batch = trace.batch as f64;
        let mut macs = vec![0.0; trace.steps];
        let mut acs = vec![0.0; trace.steps];
        let (mut dense_macs, mut dense_acs) = (0.0, 0.0);
        for (ops, info) in trace.synops.iter().zip(connections) {
            if ops.per_step.len() != trace.steps {
                return Err(Error::arg(format!("connection {} has a short tally", ops.name)));
            }
            let (acc, dense) = match ops.kind {
                OpKind::Mac => (&mut macs, &mut dense_macs),
                OpKind::Ac => (&mut acs, &mut dense_acs),
            };
            for (a, &v) in acc.iter_mut().zip(&ops.per_step) {
                *a += v as f64 / batch;
            }
            *dense += info.dense_per_step as f64;
        }
        Ok(SynOpsReport {
            macs_per_step: macs,
            acs_per_step: acs,
            dense_macs_per_step: dense_macs,
            dense_acs_per_step: dense_acs,
        })
    }

    pub fn total_macs(&self) -> f64 {
        self.macs_per_step.iter().sum()
    }

    pub fn total_acs(&self) -> f64 {
        self.acs_per_step.iter().sum()
    }

    /// Running totals `(MACs, ACs)` after each step.
    pub fn cumulative(&self) -> Vec<(f64, f64)> {
        let (mut m, mut a) = (0.0, 0.0);
        self.macs_per_step
            .iter()
            .zip(&self.acs_per_step)
            .map(|(&dm, &da)| {
                m += dm;
                a += da;
                (m, a)
            })
            .collect()
    }
}

/// Output positions reached by each input pixel of a convolution.
pub fn fanout_map(g: &ConvGeom) -> Vec<u32> {
    let axis = |len: usize, out: usize| -> Vec<u32> {
        (0..len)
            .map(|i| {
                let i = i + g.pad;
                // outputs o with o·stride ≤ i ≤ o·stride + k − 1
                (0..out)
                    .filter(|&o| o * g.stride <= i && i < o * g.stride + g.k)
                    .count() as u32
            })
            .collect()
    };
    let ys = axis(g.h, g.h_out);
    let xs = axis(g.w, g.w_out);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| y * x))
        .collect()
}

/// Per-step `Σ fanout` over the nonzero entries of `[T·N, C, H, W]` data.
pub(crate) fn conv_ops(data: &[f32], steps: usize, fanout: &[u32], c_out: usize) -> Vec<u64> {
    let per_step = data.len() / steps;
    data.chunks(per_step)
        .map(|rows| {
            let hits: u64 = rows
                .chunks(fanout.len())
                .flat_map(|plane| plane.iter().zip(fanout))
                .filter(|(&v, _)| v != 0.0)
                .map(|(_, &f)| f as u64)
                .sum();
            hits * c_out as u64
        })
        .collect()
}

/// Per-step nonzero count of `[T·N, ...]` data times a fixed fan-out.
pub(crate) fn dense_ops(data: &[f32], steps: usize, fanout: usize) -> Vec<u64> {
    let per_step = data.len() / steps;
    data.chunks(per_step)
        .map(|rows| rows.iter().filter(|&&v| v != 0.0).count() as u64 * fanout as u64)
        .collect()
}

pub(crate) fn activity(name: &str, value: &Tensor) -> Activity {
    Activity {
        name: name.to_string(),
        shape: value.shape().to_vec(),
        active: value.data().iter().map(|&v| v != 0.0).collect(),
    }
}
