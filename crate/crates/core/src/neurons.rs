//! Per-timestep neuron dynamics on the tape.
//!
//! PLIF: `v = α·v + (1 − α)·x`, spike `s = v ≥ ϑ`, reset `v ← v·(1 − s)`.
//! adLIF adds an adaptation current `w` fed by the membrane and by spikes.
//! LI is a non-spiking integrator used as the classification readout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Spiking threshold ϑ.
pub const THRESHOLD: f32 = 1.0;

/// Initial decay of every leaky unit; 20 ms time constant at 2 ms bins.
pub const INIT_DECAY: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    Plif,
    Adlif,
}

/// Which membrane value drives the adLIF coupling term `a·u`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    PostReset,
    PreReset,
}

/// Membrane state of a PLIF layer. `alpha` is the bound decay (one scalar).
#[derive(Clone, Copy, Debug)]
pub struct PlifState {
    pub v: Var,
    pub alpha: Var,
    pub threshold: f32,
}

impl PlifState {
    pub fn zeros(tape: &mut Tape, shape: &[usize], alpha: Var) -> Self {
        PlifState {
            v: tape.constant(Tensor::zeros(shape)),
            alpha,
            threshold: THRESHOLD,
        }
    }
}

pub fn plif_step(tape: &mut Tape, state: &PlifState, x: Var) -> Result<(PlifState, Var)> {
    let v = tape.leaky(state.v, x, state.alpha)?;
    let s = tape.spike(v, state.threshold);
    let v = tape.reset(v, s)?;
    Ok((PlifState { v, ..*state }, s))
}

/// adLIF state; every parameter vector has one entry per channel.
#[derive(Clone, Copy, Debug)]
pub struct AdlifState {
    pub v: Var,
    pub w: Var,
    pub alpha: Var,
    pub beta: Var,
    pub a: Var,
    pub b: Var,
    pub threshold: f32,
    pub coupling: Coupling,
}

pub struct AdlifParams {
    pub alpha: Var,
    pub beta: Var,
    pub a: Var,
    pub b: Var,
}

impl AdlifState {
    pub fn zeros(tape: &mut Tape, shape: &[usize], p: AdlifParams, coupling: Coupling) -> Self {
        AdlifState {
            v: tape.constant(Tensor::zeros(shape)),
            w: tape.constant(Tensor::zeros(shape)),
            alpha: p.alpha,
            beta: p.beta,
            a: p.a,
            b: p.b,
            threshold: THRESHOLD,
            coupling,
        }
    }
}

/// Membrane update with the previous adaptation, then spike and reset,
/// then the adaptation update from the current membrane and spike.
pub fn adlif_step(tape: &mut Tape, state: &AdlifState, x: Var) -> Result<(AdlifState, Var)> {
    let drive = tape.sub(x, state.w)?;
    let v_pre = tape.leaky(state.v, drive, state.alpha)?;
    let s = tape.spike(v_pre, state.threshold);
    let v = tape.reset(v_pre, s)?;
    let u = match state.coupling {
        Coupling::PostReset => v,
        Coupling::PreReset => v_pre,
    };
    let au = tape.mul_bcast(u, state.a)?;
    let bs = tape.mul_bcast(s, state.b)?;
    let target = tape.add(au, bs)?;
    let w = tape.leaky(state.w, target, state.beta)?;
    Ok((AdlifState { v, w, ..*state }, s))
}

/// Leaky-integrator readout with its own affine projection.
#[derive(Clone, Copy, Debug)]
pub struct LiState {
    /// `[N, classes]`
    pub v: Var,
    /// Per-class decay, `[classes]`.
    pub alpha: Var,
    /// `[classes, features]`
    pub weight: Var,
    pub bias: Var,
}

impl LiState {
    pub fn zeros(tape: &mut Tape, batch: usize, alpha: Var, weight: Var, bias: Var) -> Self {
        let classes = tape.shape(weight)[0];
        LiState {
            v: tape.constant(Tensor::zeros(&[batch, classes])),
            alpha,
            weight,
            bias,
        }
    }
}

pub fn li_step(tape: &mut Tape, state: &LiState, e: Var) -> Result<LiState> {
    let drive = tape.linear(e, state.weight, Some(state.bias))?;
    li_integrate(tape, state, drive)
}

/// LI update for an already projected input `Linear(e)`.
pub fn li_integrate(tape: &mut Tape, state: &LiState, drive: Var) -> Result<LiState> {
    let v = tape.leaky(state.v, drive, state.alpha)?;
    Ok(LiState { v, ..*state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &mut Tape, v: f32) -> Var {
        tape.constant(Tensor::scalar(v))
    }

    fn vec1(tape: &mut Tape, v: f32) -> Var {
        tape.constant(Tensor::from_vec(vec![v]))
    }

    #[test]
    fn plif_direct_substitution() {
        let mut t = Tape::new();
        let alpha = scalar(&mut t, 0.5);
        let v0 = t.constant(Tensor::from_vec(vec![1.0]));
        let x = t.constant(Tensor::from_vec(vec![2.0]));
        let st = PlifState { v: v0, alpha, threshold: 10.0 };
        let (next, s) = plif_step(&mut t, &st, x).unwrap();
        assert_eq!(t.value(next.v).data(), &[1.5]);
        assert_eq!(t.value(s).data(), &[0.0]);
    }

    #[test]
    fn plif_spikes_at_threshold_and_resets() {
        let mut t = Tape::new();
        let alpha = scalar(&mut t, 0.0);
        let st = PlifState::zeros(&mut t, &[1], alpha);
        let x = t.constant(Tensor::from_vec(vec![THRESHOLD]));
        let (next, s) = plif_step(&mut t, &st, x).unwrap();
        assert_eq!(t.value(s).data(), &[1.0]);
        assert_eq!(t.value(next.v).data(), &[0.0]);
    }

    #[test]
    fn plif_converges_geometrically_to_constant_input() {
        let (a, c, v0) = (0.85f32, 0.6f32, -0.4f32);
        let mut t = Tape::new();
        let alpha = scalar(&mut t, a);
        let mut st = PlifState { v: t.constant(Tensor::scalar(v0)), alpha, threshold: THRESHOLD };
        let x = t.constant(Tensor::scalar(c));
        for _ in 0..50 {
            st = plif_step(&mut t, &st, x).unwrap().0;
        }
        let v = t.value(st.v).item();
        let bound = (a as f64).powi(50) * (v0 - c).abs() as f64 + 1e-6;
        assert!(((v - c).abs() as f64) < bound);
    }

    #[test]
    fn adlif_without_adaptation_matches_plif_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = [2, 3, 2, 2];
        let n: usize = shape.iter().product();
        let mut t = Tape::new();
        let alpha_p = scalar(&mut t, 0.8);
        let alpha_c = t.constant(Tensor::full(&[3], 0.8));
        let zeros = t.constant(Tensor::zeros(&[3]));
        let beta = t.constant(Tensor::full(&[3], 0.9));
        let mut p = PlifState::zeros(&mut t, &shape, alpha_p);
        let mut q = AdlifState::zeros(
            &mut t,
            &shape,
            AdlifParams { alpha: alpha_c, beta, a: zeros, b: zeros },
            Coupling::PostReset,
        );
        for _ in 0..100 {
            let x = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..2.5)).collect()).unwrap();
            let x = t.constant(x);
            let (p2, s1) = plif_step(&mut t, &p, x).unwrap();
            let (q2, s2) = adlif_step(&mut t, &q, x).unwrap();
            assert_eq!(t.value(p2.v), t.value(q2.v));
            assert_eq!(t.value(s1), t.value(s2));
            assert!(t.value(q2.w).data().iter().all(|&w| w == 0.0));
            p = p2;
            q = q2;
        }
    }

    #[test]
    fn spike_feedback_suppresses_the_next_step() {
        let run = |b: f32| -> (f32, f32) {
            let mut t = Tape::new();
            let alpha = vec1(&mut t, 0.5);
            let beta = vec1(&mut t, 0.8);
            let a = vec1(&mut t, 0.0);
            let bv = vec1(&mut t, b);
            let st = AdlifState::zeros(
                &mut t,
                &[1, 1],
                AdlifParams { alpha, beta, a, b: bv },
                Coupling::PostReset,
            );
            let x = t.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
            let (st, s) = adlif_step(&mut t, &st, x).unwrap();
            assert_eq!(t.value(s).item(), 1.0);
            let w = t.value(st.w).item();
            let x = t.constant(Tensor::new(&[1, 1], vec![1.5]).unwrap());
            let (st, s) = adlif_step(&mut t, &st, x).unwrap();
            assert_eq!(t.value(s).item(), 0.0);
            (w, t.value(st.v).item())
        };
        let (w_fb, v_fb) = run(2.0);
        let (_, v_plain) = run(0.0);
        assert!((w_fb - 0.2 * 2.0).abs() < 1e-6);
        assert!((v_plain - 0.75).abs() < 1e-6);
        assert!((v_fb - 0.55).abs() < 1e-6);
    }

    /// Impulse response autocorrelation; coupled adaptation makes it oscillate.
    fn min_autocorr(a: f32) -> f64 {
        let mut t = Tape::new();
        let alpha = vec1(&mut t, 0.8);
        let beta = vec1(&mut t, 0.9);
        let av = vec1(&mut t, a);
        let b = vec1(&mut t, 0.0);
        let mut st = AdlifState::zeros(
            &mut t,
            &[1, 1],
            AdlifParams { alpha, beta, a: av, b },
            Coupling::PostReset,
        );
        let pulse = t.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap());
        let quiet = t.constant(Tensor::zeros(&[1, 1]));
        let mut vs = Vec::new();
        for step in 0..200 {
            let x = if step == 0 { pulse } else { quiet };
            let (next, s) = adlif_step(&mut t, &st, x).unwrap();
            assert_eq!(t.value(s).item(), 0.0);
            vs.push(t.value(next.v).item() as f64);
            st = next;
        }
        let energy: f64 = vs.iter().map(|v| v * v).sum();
        (1..100)
            .map(|k| vs.iter().zip(&vs[k..]).map(|(a, b)| a * b).sum::<f64>() / energy)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn coupling_produces_damped_oscillation() {
        assert!(min_autocorr(1.0) < -0.05);
        assert!(min_autocorr(0.0) >= 0.0);
    }

    #[test]
    fn li_limits_and_convergence() {
        let mut t = Tape::new();
        let w = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let bias = t.constant(Tensor::zeros(&[2]));
        let e = t.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());

        let one = t.constant(Tensor::full(&[2], 1.0));
        let mut st = LiState::zeros(&mut t, 1, one, w, bias);
        st.v = t.constant(Tensor::new(&[1, 2], vec![5.0, 6.0]).unwrap());
        let held = li_step(&mut t, &st, e).unwrap();
        assert_eq!(t.value(held.v).data(), &[5.0, 6.0]);

        let zero = t.constant(Tensor::zeros(&[2]));
        let st = LiState { alpha: zero, ..st };
        let memoryless = li_step(&mut t, &st, e).unwrap();
        assert_eq!(t.value(memoryless.v).data(), &[0.3, -0.7]);

        let a = 0.9f32;
        let decay = t.constant(Tensor::full(&[2], a));
        let mut st = LiState::zeros(&mut t, 1, decay, w, bias);
        for _ in 0..50 {
            st = li_step(&mut t, &st, e).unwrap();
        }
        for (v, c) in t.value(st.v).data().iter().zip([0.3f32, -0.7]) {
            assert!(((v - c).abs() as f64) < (a as f64).powi(50) * c.abs() as f64 + 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let alpha = scalar(&mut t, 0.5);
        let st = PlifState::zeros(&mut t, &[2, 3], alpha);
        let x = t.constant(Tensor::zeros(&[3, 2]));
        assert!(plif_step(&mut t, &st, x).is_err());
    }

    #[test]
    fn reset_zeroes_every_spiking_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let alpha = scalar(&mut t, 0.7);
        let mut st = PlifState::zeros(&mut t, &[4, 8], alpha);
        for _ in 0..200 {
            let x = Tensor::new(&[4, 8], (0..32).map(|_| rng.gen_range(-1.0..4.0)).collect()).unwrap();
            let x = t.constant(x);
            let (next, s) = plif_step(&mut t, &st, x).unwrap();
            for (v, s) in t.value(next.v).data().iter().zip(t.value(s).data()) {
                assert_eq!(v * s, 0.0);
            }
            st = next;
        }
    }

    /// Ten spike-free PLIF steps form a linear recursion with a closed-form
    /// gradient. A far threshold makes the surrogate term through the reset
    /// negligible.
    #[test]
    fn bptt_through_linear_plif_matches_closed_form() {
        let (a, steps) = (0.8f64, 10);
        let xs: Vec<f32> = (0..steps).map(|i| 0.05 * (i as f32 + 1.0)).collect();
        let mut t = Tape::new();
        let alpha = t.param(Tensor::scalar(a as f32));
        let inputs: Vec<Var> = xs.iter().map(|&x| t.param(Tensor::scalar(x))).collect();
        let mut st = PlifState::zeros(&mut t, &[1], alpha);
        st.threshold = 1e4;
        for &x in &inputs {
            let (next, s) = plif_step(&mut t, &st, x).unwrap();
            assert_eq!(t.value(s).item(), 0.0);
            st = next;
        }
        let loss = t.sum_all(st.v);
        t.backward(loss).unwrap();

        // v_T = sum_k (1 - a) a^(T-1-k) x_k
        for (k, &x) in inputs.iter().enumerate() {
            let expected = (1.0 - a) * a.powi((steps - 1 - k) as i32);
            let got = t.grad(x).unwrap()[0] as f64;
            assert!((got - expected).abs() < 1e-4, "step {k}: {got} vs {expected}");
        }
        // dv_T/da by differentiating the recursion v_t = a v_{t-1} + (1 - a) x_t
        let (mut v, mut dv) = (0.0f64, 0.0f64);
        for &x in &xs {
            dv = v + a * dv - x as f64;
            v = a * v + (1.0 - a) * x as f64;
        }
        assert!((t.value(st.v).item() as f64 - v).abs() < 1e-6);
        assert!((t.grad(alpha).unwrap()[0] as f64 - dv).abs() < 1e-4);
    }
}
