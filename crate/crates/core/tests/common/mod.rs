//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use earlysnn::autodiff::Tensor;
use earlysnn::network::{ForwardTrace, Fusion, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Each pixel of each sample fires with a fixed count on a random subset of
/// steps, so activity persists over time the way moving edges do.
pub fn persistent_input(cfg: &NetworkConfig, steps: usize, batch: usize, rate: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame: usize = cfg.input.iter().product();
    let base: Vec<f32> = (0..batch * frame)
        .map(|_| if rng.gen_bool(rate) { rng.gen_range(1..4) as f32 } else { 0.0 })
        .collect();
    let mut data = Vec::with_capacity(steps * base.len());
    for _ in 0..steps {
        data.extend(base.iter().map(|&v| if rng.gen_bool(0.8) { v } else { 0.0 }));
    }
    let shape = [steps, batch, cfg.input[0], cfg.input[1], cfg.input[2]];
    Tensor::new(&shape, data).unwrap()
}

#[allow(clippy::too_many_arguments)]
/// Convolves a 0/1 activity mask with an all-ones kernel and sums every
/// output: the number of synaptic operations of a dense pass.
fn masked_conv_ops(mask: &[bool], c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> u64 {
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut total = 0u64;
    for _co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            if mask[(ci * h + y as usize) * w + x as usize] {
                                total += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    total
}

/// Multiplies a 0/1 row mask through an all-ones `[F, width]` matrix.
fn masked_dense_ops(mask: &[bool], width: usize) -> u64 {
    let ones = vec![1u64; width];
    mask.iter()
        .map(|&m| ones.iter().map(|&o| o * m as u64).sum::<u64>())
        .sum()
}

/// Per-connection, per-step operation counts recomputed from the recorded
/// activity masks without any fan-out bookkeeping.
pub fn dense_mask_oracle(cfg: &NetworkConfig, trace: &ForwardTrace) -> Vec<(String, Vec<u64>)> {
    let (steps, batch) = (trace.steps, trace.batch);
    let mut convs = vec![("common".to_string(), cfg.common_spec(), cfg.input[1], cfg.input[2])];
    let common = cfg.common_spec().geometry(cfg.input[1], cfg.input[2]).unwrap();
    for kind in cfg.streams() {
        let (mut h, mut w) = (common.h_out, common.w_out);
        for (i, spec) in cfg.stream_specs(kind).into_iter().enumerate() {
            convs.push((format!("{}.{i}", kind.name()), spec, h, w));
            let g = spec.geometry(h, w).unwrap();
            (h, w) = (g.h_out, g.w_out);
        }
    }
    let mut out = Vec::new();
    for (name, spec, h, w) in convs {
        let act = trace.activity.iter().find(|a| a.name == name).unwrap();
        let per_sample = spec.in_ch * h * w;
        let counts = (0..steps)
            .map(|t| {
                (0..batch)
                    .map(|n| {
                        let row = t * batch + n;
                        let mask = &act.active[row * per_sample..(row + 1) * per_sample];
                        masked_conv_ops(mask, spec.in_ch, h, w, spec.out_ch, spec.kernel, spec.stride, spec.padding)
                    })
                    .sum()
            })
            .collect();
        out.push((name, counts));
    }
    let per_step = |name: &str, width: usize| -> Vec<u64> {
        let act = trace.activity.iter().find(|a| a.name == name).unwrap();
        let chunk = act.active.len() / steps;
        act.active.chunks(chunk).map(|m| masked_dense_ops(m, width)).collect()
    };
    let f = cfg.fusion_width;
    match cfg.fusion {
        Fusion::None => {}
        Fusion::Plif | Fusion::Adlif => out.push(("fusion.input".into(), per_step("fusion.input", f))),
        Fusion::Egu => {
            out.push(("fusion.input".into(), per_step("fusion.input", 2 * f)));
            out.push(("fusion.update".into(), vec![(batch * f * 2) as u64; steps]));
        }
        Fusion::Egru => {
            out.push(("fusion.input".into(), per_step("fusion.input", 3 * f)));
            out.push(("fusion.recurrent".into(), per_step("fusion.recurrent", 3 * f)));
            out.push(("fusion.update".into(), vec![(batch * f * 3) as u64; steps]));
        }
    }
    out.push(("readout".into(), per_step("readout", cfg.num_classes)));
    out
}
