//! Query featurisation: per-segment feature rows and the padded subpath
//! windows consumed by the encoder.
//!
//! Row layout (58 columns):
//!
//! | columns | content |
//! |---------|---------|
//! | 0..32   | node2vec embedding (frozen) |
//! | 32..52  | categorical embeddings: road type (4), start endpoint (4), end endpoint (4), lanes (2), bridge (2), day (2), time slot (2) |
//! | 52..58  | z-scored numerics: mass, speed limit, length, turn angle to next, direction, elevation change |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, NaiveTime, Timelike};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingTable, EMBEDDING_DIM};
use crate::network::{turn_angle, NetworkError, RoadNetwork, RoadSegment, SegmentId};

pub const CATEGORICAL_DIM: usize = 20;
pub const NUMERIC_DIM: usize = 6;
pub const FEATURE_DIM: usize = EMBEDDING_DIM + CATEGORICAL_DIM + NUMERIC_DIM;
pub const CATEGORICAL_OFFSET: usize = EMBEDDING_DIM;
pub const NUMERIC_OFFSET: usize = EMBEDDING_DIM + CATEGORICAL_DIM;

pub const NUMERIC_NAMES: [&str; NUMERIC_DIM] = [
    "mass",
    "speed_limit",
    "length",
    "turn_angle",
    "direction_angle",
    "elevation_change",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("normalisation statistics missing for {0}")]
    MissingStats(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid vehicle parameters: {0}")]
    Vehicle(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// m²
    pub frontal_area: f64,
    pub drag_coeff: f64,
    /// Powertrain efficiency in (0, 1].
    pub efficiency: f64,
    pub rolling_coeff: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 23257.71,
            frontal_area: 10.5,
            drag_coeff: 0.6,
            efficiency: 0.56,
            rolling_coeff: 0.006,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let all = [
            self.mass,
            self.frontal_area,
            self.drag_coeff,
            self.efficiency,
            self.rolling_coeff,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(FeatureError::Vehicle(format!("{self:?}: all values must be positive")));
        }
        if self.efficiency > 1.0 {
            return Err(FeatureError::Vehicle(format!("efficiency {} > 1", self.efficiency)));
        }
        Ok(())
    }
}

/// Six equal four-hour slots per day.
pub const TIME_SLOTS: u8 = 6;

pub fn time_slot(t: NaiveTime) -> u8 {
    (t.hour() / 4) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Departure {
    /// 0 = Monday .. 6 = Sunday
    pub day: u8,
    pub slot: u8,
}

impl Departure {
    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        Self {
            day: dt.weekday().num_days_from_monday() as u8,
            slot: time_slot(dt.time()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub path: Vec<SegmentId>,
    pub departure: Departure,
    pub vehicle: VehicleParams,
}

impl QuerySpec {
    pub fn validate(&self, net: &RoadNetwork) -> Result<(), FeatureError> {
        net.validate_path(&self.path)?;
        self.vehicle.validate()?;
        if self.departure.day > 6 || self.departure.slot >= TIME_SLOTS {
            return Err(FeatureError::Format(format!(
                "departure {:?} out of range",
                self.departure
            )));
        }
        Ok(())
    }
}

/// Raw numerics before normalisation; the turn angle is 0 for the last
/// segment of a path.
pub fn raw_numeric(
    seg: &RoadSegment,
    next: Option<&RoadSegment>,
    vehicle: &VehicleParams,
) -> Result<[f64; NUMERIC_DIM], NetworkError> {
    let turn = match next {
        Some(n) => turn_angle(seg, n)?,
        None => 0.0,
    };
    Ok([
        vehicle.mass,
        seg.speed_limit,
        seg.length,
        turn,
        seg.direction_angle,
        seg.elevation_change,
    ])
}

/// z-score statistics for the numeric features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: [f64; NUMERIC_DIM],
    pub sd: [f64; NUMERIC_DIM],
}

impl NormStats {
    /// Population mean and standard deviation over `rows`. A zero spread is
    /// stored as 1 so the feature normalises to 0.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; NUMERIC_DIM]>) -> Result<Self, FeatureError> {
        let mut n = 0.0;
        let mut sum = [0.0; NUMERIC_DIM];
        let mut sq = [0.0; NUMERIC_DIM];
        for r in rows {
            n += 1.0;
            for k in 0..NUMERIC_DIM {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if n == 0.0 {
            return Err(FeatureError::MissingStats("empty training set".into()));
        }
        let mut mean = [0.0; NUMERIC_DIM];
        let mut sd = [1.0; NUMERIC_DIM];
        for k in 0..NUMERIC_DIM {
            mean[k] = sum[k] / n;
            let var = (sq[k] / n - mean[k] * mean[k]).max(0.0);
            if var.sqrt() > 1e-12 {
                sd[k] = var.sqrt();
            }
        }
        Ok(Self { mean, sd })
    }

    pub fn normalize(&self, raw: &[f64; NUMERIC_DIM]) -> [f64; NUMERIC_DIM] {
        let mut out = [0.0; NUMERIC_DIM];
        for k in 0..NUMERIC_DIM {
            out[k] = (raw[k] - self.mean[k]) / self.sd[k];
        }
        out
    }

    /// CSV `feature,mean,sd`.
    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut out = String::from("feature,mean,sd\n");
        for k in 0..NUMERIC_DIM {
            out.push_str(&format!("{},{:?},{:?}\n", NUMERIC_NAMES[k], self.mean[k], self.sd[k]));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path)?;
        let mut found: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let [name, mean, sd] = f[..] else {
                return Err(FeatureError::Format(format!("stats line {}: expected 3 fields", n + 1)));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| FeatureError::Format(format!("stats line {}: {e}", n + 1)))
            };
            found.insert(name.trim().to_string(), (parse(mean)?, parse(sd)?));
        }
        let mut mean = [0.0; NUMERIC_DIM];
        let mut sd = [1.0; NUMERIC_DIM];
        for (k, name) in NUMERIC_NAMES.iter().enumerate() {
            let (m, s) = found
                .get(*name)
                .ok_or_else(|| FeatureError::MissingStats((*name).to_string()))?;
            mean[k] = *m;
            sd[k] = *s;
        }
        Ok(Self { mean, sd })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CategoricalFeature {
    RoadType,
    StartEndpoint,
    EndEndpoint,
    LaneCount,
    Bridge,
    Day,
    TimeSlot,
}

impl CategoricalFeature {
    pub const ALL: [CategoricalFeature; 7] = [
        Self::RoadType,
        Self::StartEndpoint,
        Self::EndEndpoint,
        Self::LaneCount,
        Self::Bridge,
        Self::Day,
        Self::TimeSlot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RoadType => "road_type",
            Self::StartEndpoint => "start_ep_type",
            Self::EndEndpoint => "end_ep_type",
            Self::LaneCount => "lane_count",
            Self::Bridge => "is_bridge",
            Self::Day => "day",
            Self::TimeSlot => "time_slot",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::RoadType | Self::StartEndpoint | Self::EndEndpoint => 4,
            _ => 2,
        }
    }

    /// Day and time slot have a fixed vocabulary and no OOV row.
    fn fixed_rows(self) -> Option<u32> {
        match self {
            Self::Day => Some(7),
            Self::TimeSlot => Some(TIME_SLOTS as u32),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Raw categorical codes of one segment occurrence.
pub fn categorical_codes(seg: &RoadSegment, departure: Departure) -> [u32; 7] {
    [
        seg.road_type,
        seg.start_endpoint_type,
        seg.end_endpoint_type,
        seg.lane_count,
        u32::from(seg.is_bridge),
        u32::from(departure.day),
        u32::from(departure.slot),
    ]
}

/// Category code → embedding-row maps. For the five road attributes row 0
/// is the out-of-vocabulary row and known codes start at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalVocab {
    maps: [BTreeMap<u32, usize>; 7],
}

const OOV: &str = "<oov>";

impl CategoricalVocab {
    pub fn fit<'a>(codes: impl IntoIterator<Item = &'a [u32; 7]>) -> Self {
        let mut seen: [std::collections::BTreeSet<u32>; 7] = Default::default();
        for c in codes {
            for k in 0..7 {
                seen[k].insert(c[k]);
            }
        }
        let maps = std::array::from_fn(|k| {
            let feature = CategoricalFeature::ALL[k];
            match feature.fixed_rows() {
                Some(n) => (0..n).map(|c| (c, c as usize)).collect(),
                None => seen[k].iter().enumerate().map(|(i, &c)| (c, i + 1)).collect(),
            }
        });
        Self { maps }
    }

    pub fn rows(&self, feature: usize) -> usize {
        match CategoricalFeature::ALL[feature].fixed_rows() {
            Some(n) => n as usize,
            None => self.maps[feature].len() + 1,
        }
    }

    pub fn row(&self, feature: usize, code: u32) -> usize {
        self.maps[feature].get(&code).copied().unwrap_or(0)
    }

    pub fn rows_for(&self, codes: &[u32; 7]) -> [usize; 7] {
        std::array::from_fn(|k| self.row(k, codes[k]))
    }

    /// CSV `feature,category,row_index`; the OOV row is written as `<oov>`.
    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut out = String::from("feature,category,row_index\n");
        for (k, feature) in CategoricalFeature::ALL.iter().enumerate() {
            if feature.fixed_rows().is_none() {
                out.push_str(&format!("{},{OOV},0\n", feature.name()));
            }
            for (code, row) in &self.maps[k] {
                out.push_str(&format!("{},{code},{row}\n", feature.name()));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path)?;
        let mut maps: [BTreeMap<u32, usize>; 7] = Default::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| FeatureError::Format(format!("vocab line {}: {m}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            let [name, cat, row] = f[..] else {
                return Err(bad("expected 3 fields"));
            };
            let feature = CategoricalFeature::from_name(name.trim()).ok_or_else(|| bad("unknown feature"))?;
            let k = feature as usize;
            let row: usize = row.trim().parse().map_err(|_| bad("bad row index"))?;
            if cat.trim() == OOV {
                if row != 0 {
                    return Err(bad("OOV row must be 0"));
                }
                continue;
            }
            let code: u32 = cat.trim().parse().map_err(|_| bad("bad category"))?;
            maps[k].insert(code, row);
        }
        Ok(Self { maps })
    }
}

/// Trainable lookup tables for the seven categorical features.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalEmbedder {
    pub vocab: CategoricalVocab,
    pub tables: Vec<Array2<f64>>,
}

impl CategoricalEmbedder {
    /// Tables initialised uniformly in [-1, 1).
    pub fn random(vocab: CategoricalVocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = CategoricalFeature::ALL
            .iter()
            .enumerate()
            .map(|(k, f)| Array2::from_shape_fn((vocab.rows(k), f.dim()), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        Self { vocab, tables }
    }

    pub fn embed_rows(&self, rows: &[usize; 7]) -> [f64; CATEGORICAL_DIM] {
        let mut out = [0.0; CATEGORICAL_DIM];
        let mut off = 0;
        for (k, t) in self.tables.iter().enumerate() {
            for d in 0..t.ncols() {
                out[off + d] = t[[rows[k], d]];
            }
            off += t.ncols();
        }
        out
    }
}

/// Everything known about one segment occurrence in a query.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub segment: SegmentId,
    pub embedding: Vec<f64>,
    /// Embedding-table rows of the categorical features.
    pub categorical: [usize; 7],
    pub numeric: [f64; NUMERIC_DIM],
    pub raw_numeric: [f64; NUMERIC_DIM],
    pub length: f64,
    pub elevation_change: f64,
}

impl SegmentFeatures {
    /// The full 58-wide row given categorical tables.
    pub fn row(&self, cat: &CategoricalEmbedder) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        out[..EMBEDDING_DIM].copy_from_slice(&self.embedding);
        out[CATEGORICAL_OFFSET..NUMERIC_OFFSET].copy_from_slice(&cat.embed_rows(&self.categorical));
        out[NUMERIC_OFFSET..].copy_from_slice(&self.numeric);
        out
    }
}

/// Read-only bundle needed to featurise queries.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer<'a> {
    pub network: &'a RoadNetwork,
    pub embeddings: &'a EmbeddingTable,
    pub stats: Option<&'a NormStats>,
    pub vocab: &'a CategoricalVocab,
}

impl<'a> Featurizer<'a> {
    pub fn numeric_features(
        &self,
        seg: &RoadSegment,
        next: Option<&RoadSegment>,
        vehicle: &VehicleParams,
    ) -> Result<[f64; NUMERIC_DIM], FeatureError> {
        let stats = self
            .stats
            .ok_or_else(|| FeatureError::MissingStats("numeric features".into()))?;
        Ok(stats.normalize(&raw_numeric(seg, next, vehicle)?))
    }

    /// Feature rows of every path segment, in path order.
    pub fn segment_rows(&self, q: &QuerySpec) -> Result<Vec<SegmentFeatures>, FeatureError> {
        q.validate(self.network)?;
        let stats = self
            .stats
            .ok_or_else(|| FeatureError::MissingStats("numeric features".into()))?;
        let segs: Vec<&RoadSegment> = q
            .path
            .iter()
            .map(|id| self.network.segment(*id))
            .collect::<Result<_, _>>()?;
        segs.iter()
            .enumerate()
            .map(|(i, seg)| {
                let raw = raw_numeric(seg, segs.get(i + 1).copied(), &q.vehicle)?;
                Ok(SegmentFeatures {
                    segment: seg.id,
                    embedding: self.embeddings.get(seg.id)?.to_vec(),
                    categorical: self.vocab.rows_for(&categorical_codes(seg, q.departure)),
                    numeric: stats.normalize(&raw),
                    raw_numeric: raw,
                    length: seg.length,
                    elevation_change: seg.elevation_change,
                })
            })
            .collect()
    }
}

/// Row indices of the window centred on position `i` of a sequence of
/// length `n`: `i-w ..= i+w`, `None` outside the sequence.
pub fn window_rows(i: usize, n: usize, w: usize) -> impl Iterator<Item = Option<usize>> {
    (0..=2 * w).map(move |k| {
        let pos = i as isize + k as isize - w as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    })
}

/// Materialised `(2w+1) × 58` window with padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SubpathTensor {
    pub x: Array2<f64>,
    /// `true` for real segments, `false` for zero padding.
    pub mask: Vec<bool>,
    pub center: usize,
}

/// One tensor per path segment.
pub fn build_subpaths(
    rows: &[SegmentFeatures],
    w: usize,
    cat: &CategoricalEmbedder,
) -> Vec<SubpathTensor> {
    let dense: Vec<[f64; FEATURE_DIM]> = rows.iter().map(|r| r.row(cat)).collect();
    (0..rows.len())
        .map(|i| {
            let mut x = Array2::zeros((2 * w + 1, FEATURE_DIM));
            let mut mask = vec![false; 2 * w + 1];
            for (k, src) in window_rows(i, rows.len(), w).enumerate() {
                if let Some(src) = src {
                    mask[k] = true;
                    for d in 0..FEATURE_DIM {
                        x[[k, d]] = dense[src][d];
                    }
                }
            }
            SubpathTensor { x, mask, center: w }
        })
        .collect()
}
