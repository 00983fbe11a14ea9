//! Event-based gated units used to fuse the concatenated stream features.
//!
//! Both units keep a real-valued internal state `c` and emit `e = c·H(c − θ)`,
//! which is zero below the per-unit threshold `θ`. The emitted event is
//! subtracted from the state on the next step.
//!
//! EGU gates see only the input:
//!
//! ```text
//! u  = σ(W_u s + b_u)
//! z  = W_z s + b_z
//! c' = u·c + (1 − u)·z − e_prev
//! ```
//!
//! EGRU adds a reset gate and recurrent maps from `c` (no recurrent biases):
//!
//! ```text
//! u  = σ(W_u s + b_u + R_u c)
//! r  = σ(W_r s + b_r + R_r c)
//! z  = tanh(W_z s + b_z + R_z (r·c))
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Egu,
    Egru,
}

/// Affine map `W x + b` stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct AffineMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub f_in: usize,
    pub f_out: usize,
}

impl AffineMap {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (f_in as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            uniform(rng, &[f_out, f_in], bound),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[f_out]),
            )
        });
        AffineMap {
            weight,
            bias,
            f_in,
            f_out,
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), self.bias.map(|b| bound.var(b)))
    }

    pub fn param_count(&self) -> usize {
        self.f_in * self.f_out + if self.bias.is_some() { self.f_out } else { 0 }
    }
}

/// Event threshold, either trained per unit or held fixed.
#[derive(Clone, Copy, Debug)]
pub enum EventThreshold {
    Trained(ParamId),
    Fixed(f32),
}

/// Internal state `c` and the previous event output `e_prev`, both `[N, F]`.
#[derive(Clone, Copy, Debug)]
pub struct GatedState {
    pub c: Var,
    pub e_prev: Var,
}

impl GatedState {
    pub fn zeros(tape: &mut Tape, batch: usize, width: usize) -> Self {
        let c = tape.constant(Tensor::zeros(&[batch, width]));
        GatedState { c, e_prev: c }
    }
}

/// One gated fusion layer.
#[derive(Clone, Debug)]
pub struct GatedUnit {
    pub kind: GateKind,
    pub f_in: usize,
    pub width: usize,
    lin_u: AffineMap,
    lin_z: AffineMap,
    recurrent: Option<Recurrent>,
    theta: EventThreshold,
}

#[derive(Clone, Copy, Debug)]
struct Recurrent {
    lin_r: AffineMap,
    rec_u: AffineMap,
    rec_r: AffineMap,
    rec_z: AffineMap,
}

impl GatedUnit {
    /// Registers the unit's parameters; `train_theta = false` pins θ at 0.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: GateKind,
        f_in: usize,
        width: usize,
        train_theta: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let lin_u = AffineMap::new(store, &format!("{name}.lin_u"), f_in, width, true, rng);
        let lin_z = AffineMap::new(store, &format!("{name}.lin_z"), f_in, width, true, rng);
        let recurrent = (kind == GateKind::Egru).then(|| Recurrent {
            lin_r: AffineMap::new(store, &format!("{name}.lin_r"), f_in, width, true, rng),
            rec_u: AffineMap::new(store, &format!("{name}.rec_u"), width, width, false, rng),
            rec_r: AffineMap::new(store, &format!("{name}.rec_r"), width, width, false, rng),
            rec_z: AffineMap::new(store, &format!("{name}.rec_z"), width, width, false, rng),
        });
        let theta = if train_theta {
            EventThreshold::Trained(store.add(
                format!("{name}.theta"),
                ParamKind::Threshold,
                Tensor::zeros(&[width]),
            ))
        } else {
            EventThreshold::Fixed(0.0)
        };
        GatedUnit {
            kind,
            f_in,
            width,
            lin_u,
            lin_z,
            recurrent,
            theta,
        }
    }

    /// Trainable scalars owned by this unit.
    pub fn param_count(&self) -> usize {
        let mut n = self.lin_u.param_count() + self.lin_z.param_count();
        if let Some(r) = &self.recurrent {
            n += r.lin_r.param_count()
                + r.rec_u.param_count()
                + r.rec_r.param_count()
                + r.rec_z.param_count();
        }
        if let EventThreshold::Trained(_) = self.theta {
            n += self.width;
        }
        n
    }

    /// Input-side maps, each with fan-out `width` per nonzero input.
    pub fn input_maps(&self) -> usize {
        if self.recurrent.is_some() {
            3
        } else {
            2
        }
    }

    /// Recurrent maps driven by `c`, each with fan-out `width`.
    pub fn recurrent_maps(&self) -> usize {
        if self.recurrent.is_some() {
            3
        } else {
            0
        }
    }

    /// Multiply-accumulates per unit per step spent on the state update.
    pub fn update_macs_per_unit(&self) -> usize {
        match self.kind {
            GateKind::Egu => 2,
            GateKind::Egru => 3,
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: &GatedState,
        s: Var,
    ) -> Result<(GatedState, Var)> {
        let shape = tape.shape(s);
        if shape.len() != 2 || shape[1] != self.f_in {
            return Err(Error::arg(format!(
                "gated unit expects [N, {}] input, got {:?}",
                self.f_in, shape
            )));
        }
        let mut u = self.lin_u.apply(tape, bound, s)?;
        let mut z = self.lin_z.apply(tape, bound, s)?;
        match &self.recurrent {
            None => {
                u = tape.sigmoid(u);
            }
            Some(rec) => {
                let ru = rec.rec_u.apply(tape, bound, state.c)?;
                u = tape.add(u, ru)?;
                u = tape.sigmoid(u);
                let r = rec.lin_r.apply(tape, bound, s)?;
                let rr = rec.rec_r.apply(tape, bound, state.c)?;
                let r = tape.add(r, rr)?;
                let r = tape.sigmoid(r);
                let rc = tape.mul(r, state.c)?;
                let rz = rec.rec_z.apply(tape, bound, rc)?;
                z = tape.add(z, rz)?;
                z = tape.tanh(z);
            }
        }
        let keep = tape.mul(u, state.c)?;
        let one_minus_u = tape.affine(u, -1.0, 1.0);
        let write = tape.mul(one_minus_u, z)?;
        let c = tape.add(keep, write)?;
        let c = tape.sub(c, state.e_prev)?;
        let e = self.emit(tape, bound, c)?;
        Ok((GatedState { c, e_prev: e }, e))
    }

    /// `e = c·H(c − θ)` with the spike surrogate standing in for H'.
    fn emit(&self, tape: &mut Tape, bound: &Bound, c: Var) -> Result<Var> {
        let gate = match self.theta {
            EventThreshold::Trained(id) => {
                let shifted = tape.add_bcast(c, bound.var(id), -1.0)?;
                tape.spike(shifted, 0.0)
            }
            EventThreshold::Fixed(theta) => tape.spike(c, theta),
        };
        tape.mul(c, gate)
    }
}
