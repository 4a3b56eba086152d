//! Flat-output states, the triple-integrator flow map and perch geometry.
//!
//! The world frame is Z-up; flight happens in the Y-Z (sagittal) plane but
//! every state carries all three axes.

use std::ops::{Add, Neg, Sub};

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

/// World up axis.
pub fn e3() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 1.0)
}

/// Position, velocity and acceleration of a flat-output trajectory point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State9 {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

impl Default for State9 {
    fn default() -> Self {
        Self::zero()
    }
}

impl State9 {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, a: Vector3<f64>) -> Self {
        Self { p, v, a }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), Vector3::zeros())
    }

    /// Zero velocity and acceleration at `p`.
    pub fn hover(p: Vector3<f64>) -> Self {
        Self::new(p, Vector3::zeros(), Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// Stacked `[p, v, a]`.
    pub fn to_vector(&self) -> SVector<f64, 9> {
        let mut out = SVector::<f64, 9>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.a);
        out
    }

    pub fn from_vector(x: &SVector<f64, 9>) -> Self {
        Self::new(
            x.fixed_rows::<3>(0).into_owned(),
            x.fixed_rows::<3>(3).into_owned(),
            x.fixed_rows::<3>(6).into_owned(),
        )
    }

    /// `e^{At} x` for the triple integrator. `A` is nilpotent (`A^3 = 0`) so
    /// the series stops after the quadratic term. Negative `t` runs the flow
    /// backwards.
    pub fn flow(&self, t: f64) -> State9 {
        State9 {
            p: self.p + self.v * t + self.a * (0.5 * t * t),
            v: self.v + self.a * t,
            a: self.a,
        }
    }

    pub fn max_abs_diff(&self, other: &State9) -> f64 {
        (self.to_vector() - other.to_vector()).amax()
    }
}

/// Free-function form of [`State9::flow`].
pub fn flow(x: &State9, t: f64) -> State9 {
    x.flow(t)
}

impl Add for State9 {
    type Output = State9;
    fn add(self, rhs: State9) -> State9 {
        State9::new(self.p + rhs.p, self.v + rhs.v, self.a + rhs.a)
    }
}

impl Sub for State9 {
    type Output = State9;
    fn sub(self, rhs: State9) -> State9 {
        State9::new(self.p - rhs.p, self.v - rhs.v, self.a - rhs.a)
    }
}

impl Neg for State9 {
    type Output = State9;
    fn neg(self) -> State9 {
        State9::new(-self.p, -self.v, -self.a)
    }
}

/// Target surface: a point on it, its velocity, the unit outward normal
/// `z` and the unit up-slope tangent `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub z: Vector3<f64>,
    pub y: Vector3<f64>,
}

const UNIT_TOL: f64 = 1e-9;

impl SurfaceState {
    /// Builds a surface from its normal; the tangent is the component of
    /// world-up orthogonal to `z`, normalized. A horizontal surface gets the
    /// world Y axis as its tangent.
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, z: Vector3<f64>) -> Self {
        let z = z.normalize();
        let up = e3() - z * z.dot(&e3());
        let y = if up.norm() < 1e-12 {
            Vector3::new(0.0, 1.0, 0.0)
        } else {
            up.normalize()
        };
        Self { p, v, z, y }
    }

    /// Surface in the sagittal plane inclined by `phi_s` from horizontal,
    /// facing an approach from -Y.
    pub fn inclined(p: Vector3<f64>, v: Vector3<f64>, phi_s: f64) -> Self {
        Self {
            p,
            v,
            z: Vector3::new(0.0, -phi_s.sin(), phi_s.cos()),
            y: Vector3::new(0.0, phi_s.cos(), phi_s.sin()),
        }
    }

    /// Inclination of the surface in the sagittal plane, i.e. the roll angle
    /// that aligns body-z with the normal.
    pub fn inclination(&self) -> f64 {
        (-self.z.y).atan2(self.z.z)
    }

    pub fn is_valid(&self) -> bool {
        (self.z.norm() - 1.0).abs() <= UNIT_TOL
            && (self.y.norm() - 1.0).abs() <= UNIT_TOL
            && self.z.dot(&self.y).abs() <= UNIT_TOL
            && self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Parameters that map a surface state to the desired vehicle terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerchParams {
    /// Centroid-to-bottom length, m.
    pub l: f64,
    /// Desired normal approach speed, m/s.
    pub v_n: f64,
    /// Desired tangential speed, m/s.
    pub v_tau: f64,
    /// Gravitational acceleration, m/s².
    pub g: f64,
}

impl Default for PerchParams {
    fn default() -> Self {
        Self {
            l: 0.05,
            v_n: 1.25,
            v_tau: 0.6,
            g: 9.81,
        }
    }
}

impl PerchParams {
    pub fn is_valid(&self) -> bool {
        self.l >= 0.0 && self.g > 0.0 && self.v_n.is_finite() && self.v_tau.is_finite()
    }
}

/// Desired vehicle state at contact with surface `s`.
pub fn terminal_from_surface(s: &SurfaceState, params: &PerchParams) -> State9 {
    State9 {
        p: s.p - s.z * params.l,
        v: s.v - s.z * params.v_n + s.y * params.v_tau,
        a: s.z * params.g - e3() * params.g,
    }
}

/// Inclusive interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Acceptance window for an impact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessBounds {
    pub p_tau_range: Range,
    pub v_tau_range: Range,
    pub v_n_range: Range,
    pub phi_err_range: Range,
}

impl Default for SuccessBounds {
    /// Gripper tolerances of the reference 70 degree perching study.
    fn default() -> Self {
        Self {
            p_tau_range: Range::new(-0.15, 0.15),
            v_tau_range: Range::new(-1.0, 2.2),
            v_n_range: Range::new(-2.0, -0.5),
            phi_err_range: Range::new(-0.31, 0.31),
        }
    }
}

impl SuccessBounds {
    pub fn is_valid(&self) -> bool {
        [
            self.p_tau_range,
            self.v_tau_range,
            self.v_n_range,
            self.phi_err_range,
        ]
        .iter()
        .all(|r| r.lo < r.hi)
    }
}

/// True when every impact quantity lies inside its window.
pub fn classify_impact(
    p_ry: f64,
    v_rtau: f64,
    v_rn: f64,
    phi_c: f64,
    phi_s: f64,
    b: &SuccessBounds,
) -> bool {
    b.p_tau_range.contains(p_ry)
        && b.v_tau_range.contains(v_rtau)
        && b.v_n_range.contains(v_rn)
        && b.phi_err_range.contains(phi_c - phi_s)
}
