//! Jerk-limited speed profiles for single segments.

use serde::{Deserialize, Serialize};

use crate::features::VehicleParams;
use crate::model::{PhysicsConstants, SegmentGeometry};

/// S-curve speed change with bounded acceleration and jerk, starting and
/// ending at zero acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp {
    pub v0: f64,
    pub v1: f64,
    /// Peak |acceleration| actually reached.
    peak: f64,
    /// Duration of each jerk phase.
    t_jerk: f64,
    /// Duration of the constant-acceleration phase.
    t_flat: f64,
    jerk: f64,
}

impl Ramp {
    pub fn new(v0: f64, v1: f64, a_max: f64, j_max: f64) -> Self {
        let dv = (v1 - v0).abs();
        let (peak, t_jerk, t_flat) = if dv >= a_max * a_max / j_max {
            (a_max, a_max / j_max, dv / a_max - a_max / j_max)
        } else {
            let p = (dv * j_max).sqrt();
            (p, p / j_max, 0.0)
        };
        Self {
            v0,
            v1,
            peak,
            t_jerk,
            t_flat,
            jerk: j_max,
        }
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.t_jerk + self.t_flat
    }

    /// The S-curve is point-symmetric, so the mean speed is the average of
    /// the end speeds.
    pub fn distance(&self) -> f64 {
        (self.v0 + self.v1) / 2.0 * self.duration()
    }

    /// (speed, acceleration) at `tau` seconds into the ramp.
    pub fn eval(&self, tau: f64) -> (f64, f64) {
        let s = if self.v1 >= self.v0 { 1.0 } else { -1.0 };
        let (j, p, t1, t2) = (self.jerk, self.peak, self.t_jerk, self.t_flat);
        let tau = tau.clamp(0.0, self.duration());
        if tau < t1 {
            (self.v0 + s * j * tau * tau / 2.0, s * j * tau)
        } else if tau < t1 + t2 {
            (self.v0 + s * (p * t1 / 2.0 + p * (tau - t1)), s * p)
        } else {
            let u = tau - t1 - t2;
            let base = self.v0 + s * (p * t1 / 2.0 + p * t2);
            (base + s * (p * u - j * u * u / 2.0), s * (p - j * u))
        }
    }
}

/// Distance needed to change speed from `v0` to `v1`.
pub fn ramp_distance(v0: f64, v1: f64, a_max: f64, j_max: f64) -> f64 {
    Ramp::new(v0, v1, a_max, j_max).distance()
}

/// Largest speed in `[v0, cap]` reachable from `v0` within `d` metres.
pub fn reachable(v0: f64, d: f64, cap: f64, a_max: f64, j_max: f64) -> f64 {
    if cap <= v0 || ramp_distance(v0, cap, a_max, j_max) <= d {
        return cap.max(v0);
    }
    let (mut lo, mut hi) = (v0, cap);
    for _ in 0..100 {
        let mid = (lo + hi) / 2.0;
        if ramp_distance(v0, mid, a_max, j_max) <= d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Speed profile of one segment: ramp to a peak, cruise, ramp to the exit
/// speed. A fallback profile is a single constant-acceleration change from
/// entry to exit speed and may violate the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProfile {
    pub up: Ramp,
    pub cruise_speed: f64,
    pub cruise_time: f64,
    pub down: Ramp,
    pub fallback: Option<(f64, f64)>,
}

impl SegmentProfile {
    /// Profile covering `length` from `entry` to `exit` speed with peak at
    /// most `cruise`. Requires `entry, exit <= cruise`.
    pub fn plan(length: f64, entry: f64, exit: f64, cruise: f64, a_max: f64, j_max: f64) -> Self {
        let fits = |p: f64| ramp_distance(entry, p, a_max, j_max) + ramp_distance(p, exit, a_max, j_max) <= length;
        let floor = entry.max(exit);
        if !fits(floor) {
            let t = 2.0 * length / (entry + exit).max(1e-9);
            return Self {
                up: Ramp::new(entry, entry, a_max, j_max),
                cruise_speed: entry,
                cruise_time: 0.0,
                down: Ramp::new(entry, entry, a_max, j_max),
                fallback: Some(((exit - entry) / t, t)),
            };
        }
        let peak = if fits(cruise) {
            cruise
        } else {
            let (mut lo, mut hi) = (floor, cruise);
            for _ in 0..100 {
                let mid = (lo + hi) / 2.0;
                if fits(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let up = Ramp::new(entry, peak, a_max, j_max);
        let down = Ramp::new(peak, exit, a_max, j_max);
        let rest = (length - up.distance() - down.distance()).max(0.0);
        Self {
            up,
            cruise_speed: peak,
            cruise_time: if peak > 0.0 { rest / peak } else { 0.0 },
            down,
            fallback: None,
        }
    }

    pub fn duration(&self) -> f64 {
        match self.fallback {
            Some((_, t)) => t,
            None => self.up.duration() + self.cruise_time + self.down.duration(),
        }
    }

    /// (speed, acceleration) at `t` seconds into the segment.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if let Some((a, _)) = self.fallback {
            return (self.up.v0 + a * t, a);
        }
        let t_up = self.up.duration();
        if t < t_up {
            self.up.eval(t)
        } else if t < t_up + self.cruise_time {
            (self.cruise_speed, 0.0)
        } else {
            self.down.eval(t - t_up - self.cruise_time)
        }
    }

    /// Samples every `1/hz` seconds plus the exact end time.
    pub fn sample(&self, hz: f64) -> DenseProfile {
        let total = self.duration();
        let step = 1.0 / hz;
        let mut t = Vec::new();
        let mut k = 0usize;
        while (k as f64) * step < total - 1e-9 {
            t.push(k as f64 * step);
            k += 1;
        }
        t.push(total);
        let (v, a) = t.iter().map(|&x| self.eval(x)).unzip();
        DenseProfile { t, v, a }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseProfile {
    /// Seconds from segment entry.
    pub t: Vec<f64>,
    /// m/s
    pub v: Vec<f64>,
    /// m/s²
    pub a: Vec<f64>,
}

impl DenseProfile {
    pub fn duration(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0)
    }

    pub fn distance(&self) -> f64 {
        self.t
            .windows(2)
            .zip(self.v.windows(2))
            .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
            .sum()
    }

    /// Trapezoidal integral of tractive power (J), with the elevation term
    /// as grade times speed.
    pub fn energy(&self, vehicle: &VehicleParams, seg: SegmentGeometry, c: &PhysicsConstants) -> f64 {
        let m_eta = vehicle.mass / vehicle.efficiency;
        let aero = vehicle.frontal_area / (2.0 * vehicle.efficiency) * vehicle.drag_coeff * c.air_density;
        let grade = seg.elevation_change / seg.length;
        let p: Vec<f64> = self
            .v
            .iter()
            .zip(&self.a)
            .map(|(&v, &a)| m_eta * (a * v + c.g * grade * v + vehicle.rolling_coeff * c.g * v) + aero * v * v * v)
            .collect();
        self.t
            .windows(2)
            .zip(p.windows(2))
            .map(|(t, p)| (t[1] - t[0]) * (p[0] + p[1]) / 2.0)
            .sum()
    }

    /// Linear interpolation onto `n` points uniformly spaced in time.
    pub fn resample(&self, n: usize) -> Vec<f64> {
        let total = self.duration();
        let mut k = 0;
        (0..n)
            .map(|i| {
                let x = total * i as f64 / (n - 1) as f64;
                while k + 2 < self.t.len() && self.t[k + 1] < x {
                    k += 1;
                }
                let (t0, t1) = (self.t[k], self.t[k + 1]);
                let w = if t1 > t0 { ((x - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
                self.v[k] + w * (self.v[k + 1] - self.v[k])
            })
            .collect()
    }
}
