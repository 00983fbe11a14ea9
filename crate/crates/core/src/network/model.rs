use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synops::{self, ConnectionInfo, ConnectionOps, ForwardTrace, LayerSpikes, OpKind, SynOpsReport};
use super::{ConvSpikeLayerSpec, Fusion, NetworkConfig, StreamKind};
use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::{BnMode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gated_fusion::{AffineMap, GateKind, GatedState, GatedUnit};
use crate::neurons::{
    adlif_step, li_integrate, plif_step, AdlifState, Coupling, LiState, NeuronKind, PlifState,
    INIT_DECAY, THRESHOLD,
};
use crate::params::{logit, uniform, Bound, ParamId, ParamKind, ParamStore};

/// Initial adaptation decay of adLIF units.
const INIT_ADAPT_DECAY: f32 = 0.95;

#[derive(Clone, Debug)]
enum Dynamics {
    Plif {
        decay: ParamId,
    },
    Adlif {
        decay: ParamId,
        adapt_decay: ParamId,
        a: ParamId,
        b: ParamId,
    },
}

impl Dynamics {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: NeuronKind,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            NeuronKind::Plif => Dynamics::Plif {
                decay: store.add(
                    format!("{name}.decay"),
                    ParamKind::DecayLogit,
                    Tensor::full(&[1], logit(INIT_DECAY)),
                ),
            },
            NeuronKind::Adlif => {
                let decay = store.add(
                    format!("{name}.decay"),
                    ParamKind::DecayLogit,
                    Tensor::full(&[channels], logit(INIT_DECAY)),
                );
                let adapt_decay = store.add(
                    format!("{name}.adapt_decay"),
                    ParamKind::DecayLogit,
                    Tensor::full(&[channels], logit(INIT_ADAPT_DECAY)),
                );
                let a: Vec<f32> = (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect();
                let b: Vec<f32> = (0..channels).map(|_| rng.gen_range(0.0..2.0)).collect();
                let a = store.add(format!("{name}.coupling"), ParamKind::Coupling, Tensor::from_vec(a));
                let b = store.add(format!("{name}.feedback"), ParamKind::Feedback, Tensor::from_vec(b));
                Dynamics::Adlif {
                    decay,
                    adapt_decay,
                    a,
                    b,
                }
            }
        }
    }
}

/// Neuron state carried from one chunk of a sequence into the next.
#[derive(Clone, Debug, PartialEq)]
enum Carry {
    Plif(Tensor),
    Adlif(Tensor, Tensor),
}

/// Every state of a network at the end of a forward pass, detached from
/// its tape so a later pass can continue the same sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState {
    layers: Vec<Carry>,
    gated: Option<(Tensor, Tensor)>,
    readout: Tensor,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    spec: ConvSpikeLayerSpec,
    geom: ConvGeom,
    fanout: Vec<u32>,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
    dynamics: Dynamics,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        bn: &mut Vec<RunningStats>,
        name: String,
        spec: ConvSpikeLayerSpec,
        (h, w): (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let geom = spec.geometry(h, w)?;
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.conv.weight"),
            ParamKind::Weight,
            uniform(rng, &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], 1.0 / (fan_in as f32).sqrt()),
        );
        let gamma = store.add(format!("{name}.bn.scale"), ParamKind::BnScale, Tensor::full(&[spec.out_ch], 1.0));
        let beta = store.add(format!("{name}.bn.shift"), ParamKind::BnShift, Tensor::zeros(&[spec.out_ch]));
        bn.push(RunningStats::new(spec.out_ch));
        let dynamics = Dynamics::new(store, &format!("{name}.neuron"), spec.neuron, spec.out_ch, rng);
        Ok(ConvLayer {
            fanout: synops::fanout_map(&geom),
            name,
            spec,
            geom,
            weight,
            gamma,
            beta,
            bn: bn.len() - 1,
            dynamics,
        })
    }

    fn out_shape(&self) -> [usize; 3] {
        [self.spec.out_ch, self.geom.h_out, self.geom.w_out]
    }

    fn dense_per_step(&self) -> u64 {
        let reach: u64 = self.fanout.iter().map(|&f| f as u64).sum();
        reach * (self.spec.in_ch * self.spec.out_ch) as u64
    }
}

#[derive(Clone, Debug)]
enum FusionLayer {
    None,
    Gated(GatedUnit),
    Spiking { map: AffineMap, dynamics: Dynamics },
}

#[derive(Clone, Debug)]
struct ReadoutLayer {
    map: AffineMap,
    decay: ParamId,
    kind: OpKind,
}

/// A built network: configuration, parameters, and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub bn: Vec<RunningStats>,
    common: ConvLayer,
    streams: Vec<(StreamKind, Vec<ConvLayer>)>,
    fusion: FusionLayer,
    readout: ReadoutLayer,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: BnMode,
    /// Seeds the dropout masks in train mode.
    pub dropout_seed: u64,
    pub record_activity: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: BnMode::Eval,
            dropout_seed: 0,
            record_activity: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions {
            mode: BnMode::Train,
            dropout_seed,
            record_activity: false,
        }
    }
}

pub struct Forward {
    /// Readout potentials `[T, N, classes]`.
    pub readout: Var,
    pub trace: ForwardTrace,
    pub state: NetState,
}

struct Ctx {
    steps: usize,
    batch: usize,
    mode: BnMode,
    dropout: f32,
    rng: ChaCha8Rng,
    record: bool,
    trace: ForwardTrace,
}

impl Ctx {
    fn charge(&mut self, name: &str, kind: OpKind, per_step: Vec<u64>) {
        self.trace.synops.push(ConnectionOps {
            name: name.to_string(),
            kind,
            per_step,
        });
    }

    fn observe(&mut self, name: &str, value: &Tensor) {
        if self.record {
            self.trace.activity.push(synops::activity(name, value));
        }
    }

    fn count_spikes(&mut self, name: &str, s: &Tensor) {
        let per_step: Vec<u64> = s
            .data()
            .chunks(s.numel() / self.steps)
            .map(|rows| rows.iter().filter(|&&v| v != 0.0).count() as u64)
            .collect();
        self.trace.spikes.push(LayerSpikes {
            name: name.to_string(),
            units: s.numel() / (self.steps * self.batch),
            per_step,
        });
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.mode != BnMode::Train || self.dropout == 0.0 {
            return Ok(x);
        }
        let p = self.dropout;
        let keep = 1.0 / (1.0 - p);
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, mask)
    }
}

impl Network {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bn = Vec::new();
        let common = ConvLayer::new(
            &mut store,
            &mut bn,
            "common".into(),
            config.common_spec(),
            (config.input[1], config.input[2]),
            &mut rng,
        )?;
        let mut streams = Vec::new();
        for kind in config.streams() {
            let mut layers = Vec::new();
            let mut hw = (common.geom.h_out, common.geom.w_out);
            for (i, spec) in config.stream_specs(kind).into_iter().enumerate() {
                let layer = ConvLayer::new(
                    &mut store,
                    &mut bn,
                    format!("{}.{i}", kind.name()),
                    spec,
                    hw,
                    &mut rng,
                )?;
                hw = (layer.geom.h_out, layer.geom.w_out);
                layers.push(layer);
            }
            streams.push((kind, layers));
        }
        let features = config.feature_width()?;
        let width = config.fusion_width;
        let fusion = match config.fusion {
            Fusion::None => FusionLayer::None,
            Fusion::Egu | Fusion::Egru => {
                let kind = if config.fusion == Fusion::Egu {
                    GateKind::Egu
                } else {
                    GateKind::Egru
                };
                FusionLayer::Gated(GatedUnit::new(
                    &mut store,
                    "fusion",
                    kind,
                    features,
                    width,
                    config.train_event_threshold,
                    &mut rng,
                ))
            }
            Fusion::Plif | Fusion::Adlif => {
                let map = AffineMap::new(&mut store, "fusion.linear", features, width, true, &mut rng);
                let kind = if config.fusion == Fusion::Plif {
                    NeuronKind::Plif
                } else {
                    NeuronKind::Adlif
                };
                let dynamics = Dynamics::new(&mut store, "fusion.neuron", kind, width, &mut rng);
                FusionLayer::Spiking { map, dynamics }
            }
        };
        let readout_in = match fusion {
            FusionLayer::None => features,
            _ => width,
        };
        let classes = config.num_classes;
        let map = AffineMap::new(&mut store, "readout.linear", readout_in, classes, true, &mut rng);
        let decay = store.add(
            "readout.decay",
            ParamKind::DecayLogit,
            Tensor::full(&[classes], logit(INIT_DECAY)),
        );
        let kind = match fusion {
            FusionLayer::Gated(_) => OpKind::Mac,
            _ => OpKind::Ac,
        };
        Ok(Network {
            config,
            params: store,
            bn,
            common,
            streams,
            fusion,
            readout: ReadoutLayer { map, decay, kind },
        })
    }

    /// Trainable scalars, neuron dynamics included.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Connections in the order their tallies appear in a trace.
    pub fn connections(&self) -> Vec<ConnectionInfo> {
        let info = |name: &str, kind, dense: usize| ConnectionInfo {
            name: name.to_string(),
            kind,
            dense_per_step: dense as u64,
        };
        let mut out = vec![ConnectionInfo {
            name: self.common.name.clone(),
            kind: OpKind::Mac,
            dense_per_step: self.common.dense_per_step(),
        }];
        for (_, layers) in &self.streams {
            for l in layers {
                out.push(ConnectionInfo {
                    name: l.name.clone(),
                    kind: OpKind::Ac,
                    dense_per_step: l.dense_per_step(),
                });
            }
        }
        let features = self.readout_features_in();
        match &self.fusion {
            FusionLayer::None => {}
            FusionLayer::Spiking { map, .. } => {
                out.push(info("fusion.input", OpKind::Ac, map.f_in * map.f_out));
            }
            FusionLayer::Gated(unit) => {
                out.push(info("fusion.input", OpKind::Ac, unit.f_in * unit.width * unit.input_maps()));
                if unit.recurrent_maps() > 0 {
                    out.push(info(
                        "fusion.recurrent",
                        OpKind::Mac,
                        unit.width * unit.width * unit.recurrent_maps(),
                    ));
                }
                out.push(info("fusion.update", OpKind::Mac, unit.width * unit.update_macs_per_unit()));
            }
        }
        out.push(info("readout", self.readout.kind, features * self.config.num_classes));
        out
    }

    fn readout_features_in(&self) -> usize {
        self.readout.map.f_in
    }

    pub fn count_synops(&self, trace: &ForwardTrace) -> Result<SynOpsReport> {
        SynOpsReport::from_trace(trace, &self.connections())
    }

    /// Runs `input` of shape `[T, N, C, H, W]` through the network,
    /// starting from `state` or from rest.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Tensor,
        state: Option<&NetState>,
        opts: &ForwardOptions,
    ) -> Result<Forward> {
        let shape = input.shape();
        if shape.len() != 5 || shape[2..] != self.config.input[..] {
            return Err(Error::arg(format!(
                "network expects [T, N, {}, {}, {}] input, got {:?}",
                self.config.input[0], self.config.input[1], self.config.input[2], shape
            )));
        }
        let (steps, batch) = (shape[0], shape[1]);
        let coupling = self.config.coupling;
        let mut ctx = Ctx {
            steps,
            batch,
            mode: opts.mode,
            dropout: self.config.dropout,
            rng: ChaCha8Rng::seed_from_u64(opts.dropout_seed),
            record: opts.record_activity,
            trace: ForwardTrace {
                steps,
                batch,
                readout: Tensor::zeros(&[1]),
                spikes: Vec::new(),
                synops: Vec::new(),
                activity: Vec::new(),
            },
        };
        let mut carries = state.map(|s| s.layers.iter());
        let mut next_carries = Vec::new();
        let next = |carries: &mut Option<std::slice::Iter<Carry>>| -> Result<Option<Carry>> {
            match carries {
                None => Ok(None),
                Some(it) => it
                    .next()
                    .cloned()
                    .map(Some)
                    .ok_or_else(|| Error::arg("carried state has too few layers")),
            }
        };

        let flat_shape = [steps * batch, shape[2], shape[3], shape[4]];
        let x = tape.constant(input.clone().reshape(&flat_shape)?);
        let layers = &mut self.bn;
        let (s, c) = run_conv(
            &self.common,
            &mut layers[self.common.bn],
            tape,
            bound,
            x,
            coupling,
            next(&mut carries)?.as_ref(),
            OpKind::Mac,
            &mut ctx,
        )?;
        next_carries.push(c);

        let mut features = Vec::new();
        for (_, stream) in &self.streams {
            let mut h = s;
            for layer in stream {
                let (out, c) = run_conv(
                    layer,
                    &mut layers[layer.bn],
                    tape,
                    bound,
                    h,
                    coupling,
                    next(&mut carries)?.as_ref(),
                    OpKind::Ac,
                    &mut ctx,
                )?;
                next_carries.push(c);
                h = out;
            }
            let last = stream.last().expect("streams have four layers");
            let width: usize = last.out_shape().iter().product();
            features.push(tape.reshape(h, &[steps * batch, width])?);
        }
        let features = if features.len() == 1 {
            features[0]
        } else {
            tape.concat(&features, 1)?
        };

        let mut gated_carry = None;
        let fused = match &self.fusion {
            FusionLayer::None => features,
            FusionLayer::Spiking { map, dynamics } => {
                let value = tape.value(features);
                ctx.charge("fusion.input", OpKind::Ac, synops::dense_ops(value.data(), steps, map.f_out));
                ctx.observe("fusion.input", &value.clone());
                let drive = map.apply(tape, bound, features)?;
                let (s, c) = run_dynamics(
                    tape,
                    bound,
                    dynamics,
                    coupling,
                    drive,
                    steps,
                    batch,
                    next(&mut carries)?.as_ref(),
                )?;
                next_carries.push(c);
                ctx.count_spikes("fusion", &tape.value(s).clone());
                ctx.dropout(tape, s)?
            }
            FusionLayer::Gated(unit) => {
                let value = tape.value(features);
                ctx.charge(
                    "fusion.input",
                    OpKind::Ac,
                    synops::dense_ops(value.data(), steps, unit.width * unit.input_maps()),
                );
                ctx.observe("fusion.input", &value.clone());
                let mut st = match state.and_then(|s| s.gated.as_ref()) {
                    Some((c, e)) => {
                        if c.shape() != [batch, unit.width] || e.shape() != [batch, unit.width] {
                            return Err(Error::arg("carried fusion state has the wrong shape"));
                        }
                        GatedState {
                            c: tape.constant(c.clone()),
                            e_prev: tape.constant(e.clone()),
                        }
                    }
                    None => GatedState::zeros(tape, batch, unit.width),
                };
                let mut events = Vec::with_capacity(steps);
                let mut recurrent = Vec::with_capacity(steps);
                let mut states = Vec::new();
                for t in 0..steps {
                    if unit.recurrent_maps() > 0 {
                        let c = tape.value(st.c);
                        let live = c.data().iter().filter(|&&v| v != 0.0).count();
                        recurrent.push((live * unit.width * unit.recurrent_maps()) as u64);
                        if ctx.record {
                            states.push(st.c);
                        }
                    }
                    let f = tape.narrow(features, t * batch, batch)?;
                    let (next_st, e) = unit.step(tape, bound, &st, f)?;
                    events.push(e);
                    st = next_st;
                }
                if unit.recurrent_maps() > 0 {
                    ctx.charge("fusion.recurrent", OpKind::Mac, recurrent);
                    if ctx.record {
                        let stacked = tape.concat(&states, 0)?;
                        ctx.observe("fusion.recurrent", &tape.value(stacked).clone());
                    }
                }
                let update = (batch * unit.width * unit.update_macs_per_unit()) as u64;
                ctx.charge("fusion.update", OpKind::Mac, vec![update; steps]);
                gated_carry = Some((tape.value(st.c).clone(), tape.value(st.e_prev).clone()));
                tape.concat(&events, 0)?
            }
        };

        let value = tape.value(fused);
        let classes = self.config.num_classes;
        ctx.charge("readout", self.readout.kind, synops::dense_ops(value.data(), steps, classes));
        ctx.observe("readout", &value.clone());
        let weight = bound.var(self.readout.map.weight);
        let bias = bound.var(self.readout.map.bias.expect("readout has a bias"));
        let drive = tape.linear(fused, weight, Some(bias))?;
        let logit = bound.var(self.readout.decay);
        let alpha = tape.sigmoid(logit);
        let mut li = LiState::zeros(tape, batch, alpha, weight, bias);
        if let Some(s) = state {
            if s.readout.shape() != [batch, classes] {
                return Err(Error::arg("carried readout state has the wrong shape"));
            }
            li.v = tape.constant(s.readout.clone());
        }
        let mut vs = Vec::with_capacity(steps);
        for t in 0..steps {
            let d = tape.narrow(drive, t * batch, batch)?;
            li = li_integrate(tape, &li, d)?;
            vs.push(li.v);
        }
        let v = tape.concat(&vs, 0)?;
        let readout = tape.reshape(v, &[steps, batch, classes])?;
        if let Some(mut rest) = carries {
            if rest.next().is_some() {
                return Err(Error::arg("carried state has too many layers"));
            }
        }
        ctx.trace.readout = tape.value(readout).clone();
        Ok(Forward {
            readout,
            trace: ctx.trace,
            state: NetState {
                layers: next_carries,
                gated: gated_carry,
                readout: tape.value(li.v).clone(),
            },
        })
    }

    /// Per-stream output shapes `[C, H, W]`.
    pub fn stream_dims(&self) -> Vec<(StreamKind, [usize; 3])> {
        self.streams
            .iter()
            .map(|(k, l)| (*k, l.last().expect("non-empty stream").out_shape()))
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_conv(
    layer: &ConvLayer,
    stats: &mut RunningStats,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    coupling: Coupling,
    carry: Option<&Carry>,
    kind: OpKind,
    ctx: &mut Ctx,
) -> Result<(Var, Carry)> {
    let value = tape.value(x);
    ctx.charge(
        &layer.name,
        kind,
        synops::conv_ops(value.data(), ctx.steps, &layer.fanout, layer.spec.out_ch),
    );
    ctx.observe(&layer.name, &value.clone());
    let y = tape.conv2d(x, bound.var(layer.weight), layer.spec.stride, layer.spec.padding)?;
    let y = tape.batch_norm(y, bound.var(layer.gamma), bound.var(layer.beta), stats, ctx.mode)?;
    let (s, c) = run_dynamics(tape, bound, &layer.dynamics, coupling, y, ctx.steps, ctx.batch, carry)?;
    ctx.count_spikes(&layer.name, &tape.value(s).clone());
    Ok((ctx.dropout(tape, s)?, c))
}

/// Steps neuron dynamics through the time-major rows of `x`.
#[allow(clippy::too_many_arguments)]
fn run_dynamics(
    tape: &mut Tape,
    bound: &Bound,
    dynamics: &Dynamics,
    coupling: Coupling,
    x: Var,
    steps: usize,
    batch: usize,
    carry: Option<&Carry>,
) -> Result<(Var, Carry)> {
    let mut step_shape = tape.shape(x).to_vec();
    step_shape[0] = batch;
    let init = |tape: &mut Tape, t: Option<&Tensor>| -> Result<Var> {
        match t {
            Some(t) if t.shape() != step_shape.as_slice() => {
                Err(Error::arg(format!("carried state {:?} vs {:?}", t.shape(), step_shape)))
            }
            Some(t) => Ok(tape.constant(t.clone())),
            None => Ok(tape.constant(Tensor::zeros(&step_shape))),
        }
    };
    let mut spikes = Vec::with_capacity(steps);
    let carry = match dynamics {
        Dynamics::Plif { decay } => {
            let v = match carry {
                Some(Carry::Plif(v)) => Some(v),
                None => None,
                Some(_) => return Err(Error::arg("carried state is not PLIF")),
            };
            let logit = bound.var(*decay);
            let mut st = PlifState {
                v: init(tape, v)?,
                alpha: tape.sigmoid(logit),
                threshold: THRESHOLD,
            };
            for t in 0..steps {
                let xt = tape.narrow(x, t * batch, batch)?;
                let (next, s) = plif_step(tape, &st, xt)?;
                spikes.push(s);
                st = next;
            }
            Carry::Plif(tape.value(st.v).clone())
        }
        Dynamics::Adlif {
            decay,
            adapt_decay,
            a,
            b,
        } => {
            let (v, w) = match carry {
                Some(Carry::Adlif(v, w)) => (Some(v), Some(w)),
                None => (None, None),
                Some(_) => return Err(Error::arg("carried state is not adLIF")),
            };
            let (dl, al) = (bound.var(*decay), bound.var(*adapt_decay));
            let mut st = AdlifState {
                v: init(tape, v)?,
                w: init(tape, w)?,
                alpha: tape.sigmoid(dl),
                beta: tape.sigmoid(al),
                a: bound.var(*a),
                b: bound.var(*b),
                threshold: THRESHOLD,
                coupling,
            };
            for t in 0..steps {
                let xt = tape.narrow(x, t * batch, batch)?;
                let (next, s) = adlif_step(tape, &st, xt)?;
                spikes.push(s);
                st = next;
            }
            Carry::Adlif(tape.value(st.v).clone(), tape.value(st.w).clone())
        }
    };
    Ok((tape.concat(&spikes, 0)?, carry))
}
