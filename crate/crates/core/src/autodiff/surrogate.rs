use serde::{Deserialize, Serialize};
use std::f32::consts::PI;

/// Arctan surrogate for the Heaviside step.
///
/// The backward pass uses `g(u) = slope / (π (1 + (slope·u)²))`, the exact
/// derivative of the smooth step `1/2 + atan(slope·u)/π`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub slope: f32,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate { slope: 2.0 }
    }
}

impl Surrogate {
    #[inline]
    pub fn grad(&self, u: f32) -> f32 {
        let su = self.slope * u;
        self.slope / (PI * (1.0 + su * su))
    }

    /// Smooth primitive of [`Surrogate::grad`].
    pub fn smooth_step(&self, u: f64) -> f64 {
        0.5 + (self.slope as f64 * u).atan() / std::f64::consts::PI
    }
}
