//! Constant-velocity prediction of the target surface and the terminal
//! uncertainty it induces.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::state::SurfaceState;

/// Per-axis variances of the detected surface position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Position variance, m².
    pub sigma_p: Vector3<f64>,
    /// Velocity variance, (m/s)².
    pub sigma_v: Vector3<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            sigma_p: Vector3::zeros(),
            sigma_v: Vector3::zeros(),
        }
    }

    /// Variances of zero-mean uniform noise with the given half-widths,
    /// using `Var[U(-a, a)] = a^2 / 3`.
    pub fn from_uniform_half_widths(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        Self {
            sigma_p: position.map(|a| a * a / 3.0),
            sigma_v: velocity.map(|a| a * a / 3.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sigma_p
            .iter()
            .chain(self.sigma_v.iter())
            .all(|x| *x >= 0.0 && x.is_finite())
    }
}

/// Surface detected at the prediction epoch together with its noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTrack {
    pub s0: SurfaceState,
    pub noise: NoiseSpec,
}

impl SurfaceTrack {
    pub fn new(s0: SurfaceState, noise: NoiseSpec) -> Self {
        Self { s0, noise }
    }

    /// Surface `t` seconds after the epoch, assuming constant velocity and
    /// attitude.
    pub fn predict(&self, t: f64) -> SurfaceState {
        debug_assert!(t >= 0.0, "prediction into the past: {t}");
        SurfaceState {
            p: self.s0.p + self.s0.v * t,
            ..self.s0
        }
    }
}

/// Diagonal covariance of the predicted terminal state after horizon `t`:
/// position `t^2 sigma_v + sigma_p`, velocity `sigma_v`, acceleration zero.
pub fn terminal_covariance(noise: &NoiseSpec, t: f64) -> SVector<f64, 9> {
    let mut var = SVector::<f64, 9>::zeros();
    for i in 0..3 {
        var[i] = t * t * noise.sigma_v[i] + noise.sigma_p[i];
        var[i + 3] = noise.sigma_v[i];
    }
    var
}
