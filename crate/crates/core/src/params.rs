//! Named trainable tensors and their binding onto a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// What a parameter is, which decides weight decay and projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Unconstrained logit of a decay in (0, 1).
    DecayLogit,
    /// adLIF coupling `a`, projected onto [0, 1].
    Coupling,
    /// adLIF spike feedback `b`, projected onto [0, 2].
    Feedback,
    /// Event threshold of the gated units.
    Threshold,
}

impl ParamKind {
    /// Neuron-dynamics parameters are exempt from weight decay.
    pub fn is_dynamics(self) -> bool {
        matches!(
            self,
            ParamKind::DecayLogit | ParamKind::Coupling | ParamKind::Feedback | ParamKind::Threshold
        )
    }

    pub fn bounds(self) -> Option<(f32, f32)> {
        match self {
            ParamKind::Coupling => Some((0.0, 1.0)),
            ParamKind::Feedback => Some((0.0, 2.0)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat parameter list in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Clamp bounded parameters back into their ranges.
    pub fn project(&mut self) {
        for p in &mut self.params {
            if let Some((lo, hi)) = p.kind.bounds() {
                for v in p.value.data_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }

    /// Record every parameter as a leaf; `trainable` decides `requires_grad`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tensor drawn from U(-bound, bound).
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Logit whose sigmoid equals `p`.
pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}
