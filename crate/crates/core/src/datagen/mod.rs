//! Synthetic road networks and trips with physics-derived labels.
//!
//! Networks are jittered grids over a smooth terrain field. Trips follow
//! turn-penalised shortest routes between random waypoints; each segment
//! gets a jerk-limited speed profile whose junction speeds depend on the
//! turn angle, and its energy label is the dense trapezoidal integral of
//! tractive power.

pub mod profile;
mod split;

pub use split::{
    make_queries, make_split, make_test_queries, Query, RepeatSplit, SplitPlan, REPEATS, TEST_PATH_LENGTHS,
};

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Departure, VehicleParams, TIME_SLOTS};
use crate::model::{PhysicsConstants, SegmentGeometry, FUEL_UNIT_J};
use crate::network::{turn_angle, NetworkError, NodeId, RoadNetwork, RoadSegment, SegmentId};
use crate::seeds::derive_seed;
use profile::{reachable, DenseProfile, SegmentProfile};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid datagen config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("trip file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Grid spacing used for node positions and bearings (m).
    pub spacing: f64,
    /// Uniform jitter of node positions (m).
    pub jitter: f64,
    pub length_min: f64,
    pub length_max: f64,
    /// km/h
    pub speed_limits: Vec<f64>,
    /// Terrain amplitude (m) and wavelength (m) of the elevation field.
    pub terrain_amplitude: f64,
    pub terrain_wavelength: f64,
    /// Bound on |elevation change| per segment (m).
    pub elevation_max: f64,
    pub bridge_probability: f64,
    pub n_trips: usize,
    /// Trip lengths in segments: U(short) with probability `short_share`,
    /// otherwise U(long). Bounds are inclusive.
    pub trip_len_short: (usize, usize),
    pub trip_len_long: (usize, usize),
    pub short_share: f64,
    /// Routing cost (s) of a 90° turn.
    pub turn_penalty: f64,
    pub mass_mean: f64,
    pub mass_sd: f64,
    pub mass_min: f64,
    pub mass_max: f64,
    pub vehicle: VehicleParams,
    pub cruise_factor: (f64, f64),
    /// Junction speed at turns of `full_turn_angle` degrees or more (km/h).
    pub turn_speed: f64,
    pub full_turn_angle: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub sample_hz: f64,
    pub constants: PhysicsConstants,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rows: 8,
            cols: 8,
            spacing: 800.0,
            jitter: 50.0,
            length_min: 200.0,
            length_max: 1500.0,
            speed_limits: vec![30.0, 50.0, 70.0, 90.0, 110.0],
            terrain_amplitude: 8.0,
            terrain_wavelength: 6000.0,
            elevation_max: 15.0,
            bridge_probability: 0.05,
            n_trips: 1000,
            trip_len_short: (20, 120),
            trip_len_long: (200, 220),
            short_share: 0.85,
            turn_penalty: 60.0,
            mass_mean: 23257.71,
            mass_sd: 7844.85,
            mass_min: 8000.0,
            mass_max: 40000.0,
            vehicle: VehicleParams::default(),
            cruise_factor: (0.85, 1.0),
            turn_speed: 15.0,
            full_turn_angle: 90.0,
            a_max: 1.0,
            j_max: 0.6,
            sample_hz: 10.0,
            constants: PhysicsConstants::default(),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::Config(m.into()));
        if self.rows < 2 || self.cols < 2 {
            return bad("rows and cols must be >= 2");
        }
        if !(self.length_min > 0.0 && self.length_min <= self.length_max) {
            return bad("need 0 < length_min <= length_max");
        }
        if self.speed_limits.is_empty() || self.speed_limits.iter().any(|s| !(*s > self.turn_speed)) {
            return bad("speed limits must be non-empty and above turn_speed");
        }
        let (a, b) = self.trip_len_short;
        let (c, d) = self.trip_len_long;
        if a == 0 || a > b || c == 0 || c > d {
            return bad("trip length ranges must satisfy 1 <= lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.short_share) || !(0.0..=1.0).contains(&self.bridge_probability) {
            return bad("probabilities must be in [0, 1]");
        }
        let (lo, hi) = self.cruise_factor;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("cruise_factor must satisfy 0 < lo <= hi <= 1");
        }
        if !(self.a_max > 0.0 && self.j_max > 0.0 && self.sample_hz > 0.0) {
            return bad("a_max, j_max and sample_hz must be > 0");
        }
        if !(self.mass_min > 0.0 && self.mass_min <= self.mass_max && self.mass_sd >= 0.0) {
            return bad("mass bounds invalid");
        }
        if self.full_turn_angle <= 0.0 || self.terrain_wavelength <= 0.0 {
            return bad("full_turn_angle and terrain_wavelength must be > 0");
        }
        self.vehicle
            .validate()
            .map_err(|e| DatagenError::Config(e.to_string()))
    }
}

const NETWORK_STREAM: u64 = 1;
const TRIP_STREAM: u64 = 2;

/// Elevation (m) of the smooth terrain field at `(x, y)`.
fn terrain(cfg: &DatagenConfig, phase: [f64; 3], x: f64, y: f64) -> f64 {
    let k = std::f64::consts::TAU / cfg.terrain_wavelength;
    cfg.terrain_amplitude
        * ((k * x + phase[0]).sin() + (k * y + phase[1]).sin() + 0.5 * (0.7 * k * (x - y) + phase[2]).sin())
        / 2.5
}

fn bearing(from: (f64, f64), to: (f64, f64)) -> f64 {
    // clockwise from north, with y pointing north
    let deg = (to.0 - from.0).atan2(to.1 - from.1).to_degrees();
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Grid network: `rows × cols` intersections, two directed segments per
/// grid edge. Speed limits are drawn per grid line so a straight road keeps
/// its class; road type follows the speed class.
pub fn gen_network(cfg: &DatagenConfig) -> Result<RoadNetwork, DatagenError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[NETWORK_STREAM]));
    let node = |r: usize, c: usize| NodeId((r * cfg.cols + c) as u32);
    let pos: Vec<(f64, f64)> = (0..cfg.rows * cfg.cols)
        .map(|i| {
            let (r, c) = (i / cfg.cols, i % cfg.cols);
            (
                c as f64 * cfg.spacing + rng.gen_range(-cfg.jitter..=cfg.jitter),
                r as f64 * cfg.spacing + rng.gen_range(-cfg.jitter..=cfg.jitter),
            )
        })
        .collect();
    let phase = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
    let elevation: Vec<f64> = pos.iter().map(|&(x, y)| terrain(cfg, phase, x, y)).collect();
    let endpoint: Vec<u32> = (0..pos.len()).map(|_| rng.gen_range(0..4)).collect();
    let classes = cfg.speed_limits.len();
    let row_class: Vec<usize> = (0..cfg.rows).map(|_| rng.gen_range(0..classes)).collect();
    let col_class: Vec<usize> = (0..cfg.cols).map(|_| rng.gen_range(0..classes)).collect();

    let mut edges = Vec::new();
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if c + 1 < cfg.cols {
                edges.push((node(r, c), node(r, c + 1), row_class[r]));
            }
            if r + 1 < cfg.rows {
                edges.push((node(r, c), node(r + 1, c), col_class[c]));
            }
        }
    }
    let mut segments = Vec::with_capacity(edges.len() * 2);
    for (a, b, class) in edges {
        let length = rng.gen_range(cfg.length_min..=cfg.length_max);
        let bridge = rng.gen_bool(cfg.bridge_probability);
        let road_type = if rng.gen_bool(0.85) {
            class as u32
        } else {
            rng.gen_range(0..classes as u32)
        };
        let lanes = 1 + u32::from(class >= classes / 2) + u32::from(class + 1 == classes);
        for (from, to) in [(a, b), (b, a)] {
            let (fi, ti) = (from.0 as usize, to.0 as usize);
            let h = (elevation[ti] - elevation[fi]).clamp(-cfg.elevation_max, cfg.elevation_max);
            segments.push(RoadSegment {
                id: SegmentId(segments.len() as u32),
                from_node: from,
                to_node: to,
                length,
                speed_limit: cfg.speed_limits[class],
                elevation_change: h,
                road_type,
                lane_count: lanes,
                is_bridge: bridge,
                start_endpoint_type: endpoint[fi],
                end_endpoint_type: endpoint[ti],
                direction_angle: bearing(pos[fi], pos[ti]),
            });
        }
    }
    Ok(RoadNetwork::new((0..pos.len() as u32).map(NodeId), segments)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    /// s
    pub travel_time: f64,
    /// 10 ml fuel-equivalent units.
    pub fuel_units: Option<f64>,
    /// m/s
    pub entry_speed: f64,
    pub exit_speed: f64,
    /// The jerk-limited plan was infeasible and a plain ramp was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub trip_id: u64,
    pub path: Vec<SegmentId>,
    pub departure: Departure,
    pub vehicle: VehicleParams,
    pub segments: Vec<SegmentRecord>,
}

impl TripRecord {
    pub fn energy_labelled(&self) -> bool {
        self.segments.iter().all(|s| s.fuel_units.is_some())
    }

    pub fn total_fuel(&self) -> Option<f64> {
        self.segments.iter().map(|s| s.fuel_units).sum()
    }
}

/// A simulated trip with its dense per-segment profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrip {
    pub record: TripRecord,
    pub profiles: Vec<DenseProfile>,
}

fn kmh(v: f64) -> f64 {
    v / 3.6
}

/// Speed at the junction between two segments, in m/s.
pub fn junction_speed(cfg: &DatagenConfig, cruise_in: f64, cruise_out: f64, turn_deg: f64) -> f64 {
    let base = cruise_in.min(cruise_out);
    let floor = kmh(cfg.turn_speed).min(base);
    let w = (turn_deg / cfg.full_turn_angle).clamp(0.0, 1.0);
    base - (base - floor) * w
}

/// Simulates driving `path`: cruise speeds per segment, turn-limited
/// junction speeds, forward/backward passes so every speed change fits in
/// its segment, then dense sampling and energy integration.
pub fn simulate_trip(
    net: &RoadNetwork,
    path: &[SegmentId],
    vehicle: &VehicleParams,
    departure: Departure,
    trip_id: u64,
    cfg: &DatagenConfig,
    seed: u64,
) -> Result<SimulatedTrip, DatagenError> {
    net.validate_path(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<&RoadSegment> = path.iter().map(|id| net.segment(*id)).collect::<Result<_, _>>()?;
    let n = segs.len();
    let (lo, hi) = cfg.cruise_factor;
    let cruise: Vec<f64> = segs
        .iter()
        .map(|s| kmh(s.speed_limit) * rng.gen_range(lo..=hi))
        .collect();
    let mut junction = vec![0.0; n + 1];
    for k in 1..n {
        let turn = turn_angle(segs[k - 1], segs[k])?;
        junction[k] = junction_speed(cfg, cruise[k - 1], cruise[k], turn);
    }
    for k in 0..n {
        let cap = junction[k + 1].max(junction[k]);
        junction[k + 1] = junction[k + 1].min(reachable(junction[k], segs[k].length, cap, cfg.a_max, cfg.j_max));
    }
    for k in (0..n).rev() {
        let cap = junction[k].max(junction[k + 1]);
        junction[k] = junction[k].min(reachable(junction[k + 1], segs[k].length, cap, cfg.a_max, cfg.j_max));
    }
    let mut records = Vec::with_capacity(n);
    let mut profiles = Vec::with_capacity(n);
    for k in 0..n {
        let plan = SegmentProfile::plan(segs[k].length, junction[k], junction[k + 1], cruise[k], cfg.a_max, cfg.j_max);
        if plan.fallback.is_some() {
            debug!("trip {trip_id} segment {k}: jerk-limited plan infeasible, using a ramp");
        }
        let dense = plan.sample(cfg.sample_hz);
        let geo = SegmentGeometry {
            length: segs[k].length,
            elevation_change: segs[k].elevation_change,
        };
        let joules = dense.energy(vehicle, geo, &cfg.constants);
        records.push(SegmentRecord {
            travel_time: plan.duration(),
            fuel_units: Some(joules / FUEL_UNIT_J),
            entry_speed: junction[k],
            exit_speed: junction[k + 1],
            fallback: plan.fallback.is_some(),
        });
        profiles.push(dense);
    }
    Ok(SimulatedTrip {
        record: TripRecord {
            trip_id,
            path: path.to_vec(),
            departure,
            vehicle: *vehicle,
            segments: records,
        },
        profiles,
    })
}

#[derive(Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Fastest route (free-flow time plus turn penalties) from the end of
/// segment `from` (or from node `start` when `from` is `None`) to any
/// segment ending at `goal`. Returns segment indices.
fn route(
    net: &RoadNetwork,
    from: Option<usize>,
    start: NodeId,
    goal: NodeId,
    turn_penalty: f64,
) -> Option<Vec<usize>> {
    let n = net.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    let cost = |i: usize| {
        let s = net.by_index(i);
        s.length / kmh(s.speed_limit)
    };
    let firsts: Vec<usize> = match from {
        Some(f) => net.successors(f).to_vec(),
        None => (0..n).filter(|&i| net.by_index(i).from_node == start).collect(),
    };
    for i in firsts {
        let turn = match from {
            Some(f) => turn_angle(net.by_index(f), net.by_index(i)).unwrap_or(180.0),
            None => 0.0,
        };
        let c = cost(i) + turn_penalty * turn / 90.0;
        if c < dist[i] {
            dist[i] = c;
            heap.push(Reverse((Cost(c), i)));
        }
    }
    while let Some(Reverse((Cost(d), i))) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        if net.by_index(i).to_node == goal {
            let mut out = vec![i];
            let mut cur = i;
            while prev[cur] != usize::MAX {
                cur = prev[cur];
                out.push(cur);
            }
            out.reverse();
            return Some(out);
        }
        for &j in net.successors(i) {
            let turn = turn_angle(net.by_index(i), net.by_index(j)).unwrap_or(180.0);
            let c = d + cost(j) + turn_penalty * turn / 90.0;
            if c < dist[j] {
                dist[j] = c;
                prev[j] = i;
                heap.push(Reverse((Cost(c), j)));
            }
        }
    }
    None
}

/// Segment path of exactly `len` segments made of fastest routes between
/// random waypoints.
pub fn random_path(net: &RoadNetwork, len: usize, turn_penalty: f64, rng: &mut impl Rng) -> Vec<SegmentId> {
    let nodes: Vec<NodeId> = net.nodes().iter().copied().collect();
    let mut path: Vec<usize> = Vec::with_capacity(len);
    let mut at = nodes[rng.gen_range(0..nodes.len())];
    while path.len() < len {
        let goal = loop {
            let g = nodes[rng.gen_range(0..nodes.len())];
            if g != at {
                break g;
            }
        };
        if let Some(leg) = route(net, path.last().copied(), at, goal, turn_penalty) {
            path.extend(leg);
            at = goal;
        }
    }
    path.truncate(len);
    path.into_iter().map(|i| net.by_index(i).id).collect()
}

fn draw_len(cfg: &DatagenConfig, rng: &mut impl Rng) -> usize {
    let (lo, hi) = if rng.gen_bool(cfg.short_share) {
        cfg.trip_len_short
    } else {
        cfg.trip_len_long
    };
    rng.gen_range(lo..=hi)
}

/// Draws and simulates `cfg.n_trips` trips. Trip `i` uses its own derived
/// seed, so any trip can be regenerated on its own.
pub fn gen_trips(net: &RoadNetwork, cfg: &DatagenConfig) -> Result<Vec<SimulatedTrip>, DatagenError> {
    cfg.validate()?;
    let mass = Normal::new(cfg.mass_mean, cfg.mass_sd).map_err(|e| DatagenError::Config(e.to_string()))?;
    (0..cfg.n_trips as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TRIP_STREAM, i]));
            let len = draw_len(cfg, &mut rng);
            let path = random_path(net, len, cfg.turn_penalty, &mut rng);
            let vehicle = VehicleParams {
                mass: mass.sample(&mut rng).clamp(cfg.mass_min, cfg.mass_max),
                ..cfg.vehicle
            };
            let departure = Departure {
                day: rng.gen_range(0..7),
                slot: rng.gen_range(0..TIME_SLOTS),
            };
            simulate_trip(net, &path, &vehicle, departure, i, cfg, rng.gen())
        })
        .collect()
}

pub fn save_trips(trips: &[TripRecord], path: &Path) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in trips {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trips(path: &Path) -> Result<Vec<TripRecord>, DatagenError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TripRecord = serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if t.path.len() != t.segments.len() || t.segments.iter().any(|s| !(s.travel_time > 0.0)) {
            return Err(DatagenError::Parse {
                line: i + 1,
                msg: "segment records must match the path and have positive times".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ProfileLine<'a> {
    trip_id: u64,
    segment: usize,
    t: &'a [f64],
    v: &'a [f64],
}

/// Dense profiles, one JSON line per (trip, segment position).
pub fn save_profiles(trips: &[SimulatedTrip], path: &Path) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for trip in trips {
        for (k, p) in trip.profiles.iter().enumerate() {
            let line = ProfileLine {
                trip_id: trip.record.trip_id,
                segment: k,
                t: &p.t,
                v: &p.v,
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}
