use earlysnn::autodiff::{Tape, Tensor};
use earlysnn::network::{Forward, ForwardOptions, Fusion, Network, NetworkConfig, OpKind, StreamKind, Topology};
use earlysnn::neurons::NeuronKind;
mod common;

use common::{dense_mask_oracle, persistent_input};

fn tiny(fusion: Fusion, neuron: NeuronKind) -> NetworkConfig {
    let mut cfg = NetworkConfig::desk(3);
    cfg.fusion = fusion;
    cfg.neuron = neuron;
    cfg
}

fn run(net: &mut Network, input: &Tensor, opts: &ForwardOptions) -> Forward {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    net.forward(&mut tape, &bound, input, None, opts).unwrap()
}

#[test]
fn full_scale_parameter_count_is_near_reference() {
    let mut cfg = NetworkConfig::full_scale(50);
    cfg.fusion = Fusion::None;
    let net = Network::build(cfg, 0).unwrap();
    let n = net.count_parameters() as f64;
    println!("two-stream PLIF without fusion: {n} parameters");
    assert!((n / 1.31e6 - 1.0).abs() <= 0.25, "{n}");
    assert_eq!(net.stream_dims()[0], (StreamKind::Ventral, [384, 4, 4]));
    assert_eq!(net.stream_dims()[1], (StreamKind::Dorsal, [16, 13, 13]));
}

#[test]
fn same_seed_builds_identical_networks() {
    let a = Network::build(tiny(Fusion::Egru, NeuronKind::Adlif), 5).unwrap();
    let b = Network::build(tiny(Fusion::Egru, NeuronKind::Adlif), 5).unwrap();
    let c = Network::build(tiny(Fusion::Egru, NeuronKind::Adlif), 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

fn conv_params(net: &Network) -> usize {
    net.params
        .iter()
        .filter(|p| p.name.ends_with("conv.weight"))
        .map(|p| p.value.numel())
        .sum()
}

#[test]
fn doubled_stream_has_four_times_the_conv_weights() {
    let mut single = NetworkConfig::full_scale(10);
    single.topology = Topology::VentralOnly;
    let mut double = single.clone();
    double.topology = Topology::VentralDouble;
    let s = Network::build(single, 0).unwrap();
    let d = Network::build(double, 0).unwrap();
    let first = |n: &Network| n.params.iter().find(|p| p.name == "ventral.1.conv.weight").unwrap().value.numel();
    assert_eq!(first(&d), 4 * first(&s));
    let ratio = conv_params(&d) as f64 / conv_params(&s) as f64;
    assert!((3.9..=4.0).contains(&ratio), "{ratio}");
}

#[test]
fn neuron_parameters_are_counted() {
    let plif = Network::build(tiny(Fusion::None, NeuronKind::Plif), 0).unwrap();
    let adlif = Network::build(tiny(Fusion::None, NeuronKind::Adlif), 0).unwrap();
    let cfg = tiny(Fusion::None, NeuronKind::Plif);
    let mut channels = vec![cfg.common_width];
    channels.extend(cfg.ventral_widths);
    channels.extend(cfg.dorsal_widths);
    let layers = channels.len();
    let extra: usize = channels.iter().map(|c| 4 * c).sum::<usize>() - layers;
    assert_eq!(adlif.count_parameters(), plif.count_parameters() + extra);
    let manual: usize = plif.params.iter().map(|p| p.value.numel()).sum();
    assert_eq!(plif.count_parameters(), manual);
}

#[test]
fn silent_input_stays_silent() {
    for fusion in Fusion::ALL {
        let cfg = tiny(fusion, NeuronKind::Adlif);
        let mut net = Network::build(cfg.clone(), 1).unwrap();
        let input = Tensor::zeros(&[6, 2, 2, 32, 32]);
        for opts in [ForwardOptions::eval(), ForwardOptions::train(3)] {
            let out = run(&mut net, &input, &opts);
            assert!(out.trace.spikes.iter().all(|l| l.per_step.iter().all(|&c| c == 0)));
            assert!(out.trace.readout.data().iter().all(|&v| v == 0.0), "{fusion:?}");
            let report = net.count_synops(&out.trace).unwrap();
            assert_eq!(report.total_acs(), 0.0);
        }
    }
}

#[test]
fn single_step_gives_single_readout_row() {
    let cfg = tiny(Fusion::Egu, NeuronKind::Plif);
    let mut net = Network::build(cfg.clone(), 0).unwrap();
    let out = run(&mut net, &persistent_input(&cfg, 1, 2, 0.1, 0), &ForwardOptions::eval());
    assert_eq!(out.trace.readout.shape(), &[1, 2, 3]);
}

#[test]
fn eval_is_a_pure_function_of_weights_and_input() {
    let cfg = tiny(Fusion::Egru, NeuronKind::Adlif);
    let mut net = Network::build(cfg.clone(), 2).unwrap();
    let input = persistent_input(&cfg, 8, 2, 0.2, 1);
    let a = run(&mut net, &input, &ForwardOptions::eval());
    let b = run(&mut net, &input, &ForwardOptions::eval());
    assert_eq!(a.trace.readout, b.trace.readout);
    assert_eq!(a.trace.synops, b.trace.synops);
    assert_eq!(a.state, b.state);
}

#[test]
fn network_spikes_on_persistent_input() {
    let cfg = tiny(Fusion::Egu, NeuronKind::Plif);
    let mut net = Network::build(cfg.clone(), 0).unwrap();
    let out = run(&mut net, &persistent_input(&cfg, 10, 2, 0.1, 0), &ForwardOptions::train(0));
    for layer in &out.trace.spikes {
        let total: u64 = layer.per_step.iter().sum();
        println!("{}: {total} spikes over {} units", layer.name, layer.units);
    }
    assert!(out.trace.spikes[0].per_step.iter().sum::<u64>() > 0);
}

/// Splitting a sequence and carrying state gives the same eval trace.
#[test]
fn chunked_eval_matches_one_pass() {
    for (fusion, neuron) in [(Fusion::Egru, NeuronKind::Adlif), (Fusion::Plif, NeuronKind::Plif)] {
        let cfg = tiny(fusion, neuron);
        let mut net = Network::build(cfg.clone(), 4).unwrap();
        let input = persistent_input(&cfg, 9, 2, 0.3, 2);
        let whole = run(&mut net, &input, &ForwardOptions::eval());
        let frame = input.numel() / 9;
        let head = Tensor::new(&[4, 2, 2, 32, 32], input.data()[..4 * frame].to_vec()).unwrap();
        let tail = Tensor::new(&[5, 2, 2, 32, 32], input.data()[4 * frame..].to_vec()).unwrap();
        let first = run(&mut net, &head, &ForwardOptions::eval());
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let second = net
            .forward(&mut tape, &bound, &tail, Some(&first.state), &ForwardOptions::eval())
            .unwrap();
        let mut joined = first.trace.readout.data().to_vec();
        joined.extend_from_slice(second.trace.readout.data());
        assert_eq!(joined, whole.trace.readout.data());
        assert_eq!(second.state, whole.state);
    }
}

#[test]
fn wrong_input_shape_is_an_argument_error() {
    let mut net = Network::build(tiny(Fusion::Egu, NeuronKind::Plif), 0).unwrap();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let bad = Tensor::zeros(&[2, 1, 2, 16, 16]);
    let err = net.forward(&mut tape, &bound, &bad, None, &ForwardOptions::eval());
    assert!(matches!(err, Err(earlysnn::Error::Argument(_))));
}

#[test]
fn gradients_reach_every_parameter_kind() {
    let cfg = tiny(Fusion::Egru, NeuronKind::Adlif);
    let mut net = Network::build(cfg.clone(), 0).unwrap();
    let input = persistent_input(&cfg, 60, 2, 0.3, 9);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let out = net
        .forward(&mut tape, &bound, &input, None, &ForwardOptions::train(1))
        .unwrap();
    let mean = tape.mean(out.readout, 0).unwrap();
    let loss = tape.cross_entropy(mean, &[0, 2]).unwrap();
    tape.backward(loss).unwrap();
    let mut silent = Vec::new();
    for (p, &v) in net.params.iter().zip(bound.vars()) {
        let g = tape.grad(v).unwrap();
        assert!(g.iter().all(|x| x.is_finite()), "{}", p.name);
        if g.iter().all(|&x| x == 0.0) {
            silent.push(p.name.clone());
        }
    }
    assert!(silent.is_empty(), "parameters without gradient: {silent:?}");
}

#[test]
fn readout_kind_follows_fusion_output() {
    let kind = |f| {
        let net = Network::build(tiny(f, NeuronKind::Plif), 0).unwrap();
        net.connections().last().unwrap().kind
    };
    assert_eq!(kind(Fusion::Egu), OpKind::Mac);
    assert_eq!(kind(Fusion::Egru), OpKind::Mac);
    assert_eq!(kind(Fusion::Plif), OpKind::Ac);
    assert_eq!(kind(Fusion::None), OpKind::Ac);
    let net = Network::build(tiny(Fusion::Egru, NeuronKind::Plif), 0).unwrap();
    assert_eq!(net.connections()[0].kind, OpKind::Mac);
}

#[test]
fn synops_match_dense_mask_oracle() {
    for fusion in Fusion::ALL {
        let cfg = tiny(fusion, NeuronKind::Plif);
        let mut net = Network::build(cfg.clone(), 3).unwrap();
        let input = persistent_input(&cfg, 20, 2, 0.3, 4);
        let mut opts = ForwardOptions::eval();
        opts.record_activity = true;
        let out = run(&mut net, &input, &opts);
        let oracle = dense_mask_oracle(&cfg, &out.trace);
        let got: Vec<(String, Vec<u64>)> = out
            .trace
            .synops
            .iter()
            .map(|c| (c.name.clone(), c.per_step.clone()))
            .collect();
        assert_eq!(got, oracle, "{fusion:?}");
        let report = net.count_synops(&out.trace).unwrap();
        assert!(report.total_acs() > 0.0);
        for (&m, &a) in report.macs_per_step.iter().zip(&report.acs_per_step) {
            assert!(m <= report.dense_macs_per_step && a <= report.dense_acs_per_step);
        }
    }
}
