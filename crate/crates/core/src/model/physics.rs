//! Plain-`f64` longitudinal dynamics on a uniformly time-sampled velocity
//! profile. The graph decoder in the parent module computes the same
//! quantities differentiably.

use serde::{Deserialize, Serialize};

use crate::features::VehicleParams;

/// Joules in one fuel unit (10 ml of diesel at 38.6 MJ/l).
pub const FUEL_UNIT_J: f64 = 0.386e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConstants {
    /// m/s²
    pub g: f64,
    /// kg/m³
    pub air_density: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            g: 9.81,
            air_density: 1.225,
        }
    }
}

/// How segment elevation change enters the power expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElevationTerm {
    /// `g * (h / length) * v`: grade times speed, a climb rate in m/s.
    #[default]
    GradeRate,
    /// `g * h` added as written, independent of speed.
    Literal,
}

/// Sample spacing that makes the profile cover `length`:
/// `2 L / sum_j (v_j + v_{j+1})`.
pub fn delta_t(v: &[f64], length: f64) -> f64 {
    let s: f64 = v.windows(2).map(|p| p[0] + p[1]).sum();
    2.0 * length / s
}

/// First time derivative by central differences, one-sided at both ends.
pub fn derivative(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|j| match j {
            0 => (x[1] - x[0]) / dt,
            j if j == n - 1 => (x[n - 1] - x[n - 2]) / dt,
            j => (x[j + 1] - x[j - 1]) / (2.0 * dt),
        })
        .collect()
}

pub fn acceleration(v: &[f64], dt: f64) -> Vec<f64> {
    derivative(v, dt)
}

pub fn jerk(a: &[f64], dt: f64) -> Vec<f64> {
    derivative(a, dt)
}

/// Segment context for the power expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentGeometry {
    pub length: f64,
    pub elevation_change: f64,
}

/// Tractive power in watts at every sample.
pub fn power(
    v: &[f64],
    a: &[f64],
    vehicle: &VehicleParams,
    seg: SegmentGeometry,
    constants: &PhysicsConstants,
    term: ElevationTerm,
) -> Vec<f64> {
    let m_eta = vehicle.mass / vehicle.efficiency;
    let aero = vehicle.frontal_area / (2.0 * vehicle.efficiency) * vehicle.drag_coeff * constants.air_density;
    let g = constants.g;
    v.iter()
        .zip(a)
        .map(|(&v, &a)| {
            let climb = match term {
                ElevationTerm::GradeRate => g * seg.elevation_change / seg.length * v,
                ElevationTerm::Literal => g * seg.elevation_change,
            };
            m_eta * (a * v + climb + vehicle.rolling_coeff * g * v) + aero * v * v * v
        })
        .collect()
}

/// Trapezoidal energy in joules.
pub fn energy(p: &[f64], dt: f64) -> f64 {
    p.windows(2).map(|w| dt * (w[0] + w[1]) / 2.0).sum()
}

pub fn travel_time(samples: usize, dt: f64) -> f64 {
    samples.saturating_sub(1) as f64 * dt
}

/// Full decode of one profile: (energy J, time s, jerk).
pub fn decode(
    v: &[f64],
    vehicle: &VehicleParams,
    seg: SegmentGeometry,
    constants: &PhysicsConstants,
    term: ElevationTerm,
) -> (f64, f64, Vec<f64>) {
    let dt = delta_t(v, seg.length);
    let a = acceleration(v, dt);
    let p = power(v, &a, vehicle, seg, constants, term);
    (energy(&p, dt), travel_time(v.len(), dt), jerk(&a, dt))
}
