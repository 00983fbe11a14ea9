//! Convolutional spiking networks: a common layer feeding a ventral and a
//! dorsal stream, flattened and fused, then a leaky-integrator readout.
//!
//! Layers are processed one at a time over the whole sequence: convolution
//! and batch norm run on `[T·N, C, H, W]` (time-major, row `t·N + n`) and the
//! neuron dynamics then step through time on per-step slices.

mod checkpoint;
mod model;
mod synops;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{Forward, ForwardOptions, NetState, Network};
pub use synops::{fanout_map, ConnectionInfo, ConnectionOps, ForwardTrace, LayerSpikes, OpKind, SynOpsReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::ConvGeom;
use crate::error::{Error, Result};
use crate::neurons::{Coupling, NeuronKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    TwoStream,
    VentralOnly,
    DorsalOnly,
    VentralDouble,
    DorsalDouble,
}

impl Topology {
    pub const ALL: [Topology; 5] = [
        Topology::TwoStream,
        Topology::VentralOnly,
        Topology::DorsalOnly,
        Topology::VentralDouble,
        Topology::DorsalDouble,
    ];

    fn streams(self) -> &'static [StreamKind] {
        match self {
            Topology::TwoStream => &[StreamKind::Ventral, StreamKind::Dorsal],
            Topology::VentralOnly | Topology::VentralDouble => &[StreamKind::Ventral],
            Topology::DorsalOnly | Topology::DorsalDouble => &[StreamKind::Dorsal],
        }
    }

    fn width_factor(self) -> usize {
        match self {
            Topology::VentralDouble | Topology::DorsalDouble => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Egru,
    Egu,
    Plif,
    Adlif,
    None,
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [Fusion::Egru, Fusion::Egu, Fusion::Plif, Fusion::Adlif, Fusion::None];
}

/// How the readout potential history is turned into class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Ventral,
    Dorsal,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Ventral => "ventral",
            StreamKind::Dorsal => "dorsal",
        }
    }

    fn strides(self) -> [usize; 4] {
        match self {
            StreamKind::Ventral => [2, 2, 2, 2],
            StreamKind::Dorsal => [2, 1, 2, 1],
        }
    }
}

/// Convolution, batch norm and a spiking neuron.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpikeLayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub neuron: NeuronKind,
    pub dropout: f32,
}

impl ConvSpikeLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Config(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeom> {
        ConvGeom::new(self.in_ch, h, w, self.kernel, self.stride, self.padding).ok_or_else(|| {
            Error::Config(format!(
                "kernel {} does not fit a {h}x{w} input with padding {}",
                self.kernel, self.padding
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub topology: Topology,
    pub neuron: NeuronKind,
    pub coupling: Coupling,
    pub fusion: Fusion,
    /// Channels, height, width of one input frame.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub bin_us: u64,
    pub common_width: usize,
    pub ventral_widths: [usize; 4],
    pub dorsal_widths: [usize; 4],
    pub kernel: usize,
    pub padding: usize,
    pub fusion_width: usize,
    pub dropout: f32,
    pub readout: Readout,
    /// Train the gated units' event thresholds (else fixed at 0).
    pub train_event_threshold: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::full_scale(50)
    }
}

impl NetworkConfig {
    /// 100×100 input at the widths used for the full-size experiments.
    pub fn full_scale(num_classes: usize) -> Self {
        NetworkConfig {
            topology: Topology::TwoStream,
            neuron: NeuronKind::Plif,
            coupling: Coupling::PostReset,
            fusion: Fusion::Egu,
            input: [2, 100, 100],
            num_classes,
            bin_us: crate::preprocess::DEFAULT_BIN_US,
            common_width: 16,
            ventral_widths: [48, 96, 192, 384],
            dorsal_widths: [24, 32, 48, 16],
            kernel: 3,
            padding: 1,
            fusion_width: 256,
            dropout: 0.1,
            readout: Readout::Mean,
            train_event_threshold: true,
        }
    }

    /// 32×32 input with every width shrunk for quick runs.
    pub fn desk(num_classes: usize) -> Self {
        NetworkConfig {
            input: [2, 32, 32],
            common_width: 4,
            ventral_widths: [8, 16, 32, 64],
            dorsal_widths: [6, 8, 12, 4],
            fusion_width: 32,
            ..NetworkConfig::full_scale(num_classes)
        }
    }

    fn layer(&self, in_ch: usize, out_ch: usize, stride: usize) -> ConvSpikeLayerSpec {
        ConvSpikeLayerSpec {
            in_ch,
            out_ch,
            kernel: self.kernel,
            stride,
            padding: self.padding,
            neuron: self.neuron,
            dropout: self.dropout,
        }
    }

    pub fn common_spec(&self) -> ConvSpikeLayerSpec {
        let f = self.topology.width_factor();
        self.layer(self.input[0], self.common_width * f, 2)
    }

    pub fn streams(&self) -> Vec<StreamKind> {
        self.topology.streams().to_vec()
    }

    pub fn stream_specs(&self, kind: StreamKind) -> Vec<ConvSpikeLayerSpec> {
        let f = self.topology.width_factor();
        let widths = match kind {
            StreamKind::Ventral => self.ventral_widths,
            StreamKind::Dorsal => self.dorsal_widths,
        };
        let mut in_ch = self.common_width * f;
        widths
            .iter()
            .zip(kind.strides())
            .map(|(&w, stride)| {
                let spec = self.layer(in_ch, w * f, stride);
                in_ch = w * f;
                spec
            })
            .collect()
    }

    /// `[C, H, W]` leaving each stream.
    pub fn stream_output_dims(&self) -> Result<Vec<(StreamKind, [usize; 3])>> {
        let common = self.common_spec().geometry(self.input[1], self.input[2])?;
        self.streams()
            .into_iter()
            .map(|kind| {
                let (mut h, mut w, mut c) = (common.h_out, common.w_out, 0);
                for spec in self.stream_specs(kind) {
                    let g = spec.geometry(h, w)?;
                    (h, w, c) = (g.h_out, g.w_out, spec.out_ch);
                }
                Ok((kind, [c, h, w]))
            })
            .collect()
    }

    /// Width of the flattened, concatenated stream features.
    pub fn feature_width(&self) -> Result<usize> {
        Ok(self
            .stream_output_dims()?
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.bin_us == 0 {
            return Err(Error::Config("bin_us must be positive".into()));
        }
        if self.fusion_width == 0 {
            return Err(Error::Config("fusion_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.ventral_widths.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config("ventral widths must be non-decreasing".into()));
        }
        if self.dorsal_widths[3] != self.common_width {
            return Err(Error::Config(format!(
                "last dorsal width {} must equal the common width {}",
                self.dorsal_widths[3], self.common_width
            )));
        }
        self.common_spec().validate()?;
        for kind in self.streams() {
            for spec in self.stream_specs(kind) {
                spec.validate()?;
            }
        }
        self.stream_output_dims()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_stream_dims() {
        let cfg = NetworkConfig::full_scale(50);
        cfg.validate().unwrap();
        let dims = cfg.stream_output_dims().unwrap();
        assert_eq!(dims[0], (StreamKind::Ventral, [384, 4, 4]));
        assert_eq!(dims[1], (StreamKind::Dorsal, [16, 13, 13]));
        assert_eq!(cfg.feature_width().unwrap(), 384 * 16 + 16 * 169);
    }

    #[test]
    fn desk_stream_dims() {
        let cfg = NetworkConfig::desk(2);
        cfg.validate().unwrap();
        let dims = cfg.stream_output_dims().unwrap();
        assert_eq!(dims[0].1, [64, 1, 1]);
        assert_eq!(dims[1].1, [4, 4, 4]);
    }

    #[test]
    fn stream_rules() {
        let cfg = NetworkConfig::full_scale(10);
        let v = cfg.stream_specs(StreamKind::Ventral);
        assert!(v.iter().all(|s| s.stride == 2));
        assert!(v.windows(2).all(|p| p[1].out_ch >= p[0].out_ch));
        let d = cfg.stream_specs(StreamKind::Dorsal);
        assert_eq!(d.iter().map(|s| s.stride).collect::<Vec<_>>(), vec![2, 1, 2, 1]);
        assert_eq!(d[3].out_ch, cfg.common_spec().out_ch);
        assert_eq!(v[0].in_ch, cfg.common_width);
    }

    #[test]
    fn double_variants_double_every_width() {
        let mut cfg = NetworkConfig::full_scale(10);
        cfg.topology = Topology::VentralDouble;
        assert_eq!(cfg.streams(), vec![StreamKind::Ventral]);
        assert_eq!(cfg.common_spec().out_ch, 32);
        let v = cfg.stream_specs(StreamKind::Ventral);
        assert_eq!(v.iter().map(|s| s.out_ch).collect::<Vec<_>>(), vec![96, 192, 384, 768]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = NetworkConfig::desk(2);
        let mut c = base.clone();
        c.kernel = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base.clone();
        c.ventral_widths = [8, 4, 32, 64];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.dorsal_widths[3] = 5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.input = [2, 4, 4];
        c.kernel = 7;
        c.padding = 0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<NetworkConfig>("topology = \"two_stream\"\nwidht = 3\n");
        assert!(err.is_err());
        let cfg: NetworkConfig = toml::from_str("fusion = \"egru\"\n").unwrap();
        assert_eq!(cfg.fusion, Fusion::Egru);
        assert_eq!(cfg.input, [2, 100, 100]);
    }
}
