//! Binned fuel-rate lookup table baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::{categorical_codes, raw_numeric, Departure, VehicleParams, NUMERIC_DIM};
use crate::network::{NetworkError, RoadNetwork, SegmentId};

/// Bin widths of the numeric features: mass (kg), speed limit (km/h),
/// length (m), turn angle (deg), direction (deg), elevation change (m).
pub const BIN_WIDTHS: [f64; NUMERIC_DIM] = [10_000.0, 10.0, 100.0, 45.0, 45.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BinKey {
    pub categorical: [u32; 7],
    pub numeric: [i64; NUMERIC_DIM],
}

impl BinKey {
    pub fn new(categorical: [u32; 7], raw: &[f64; NUMERIC_DIM]) -> Self {
        let mut numeric = [0i64; NUMERIC_DIM];
        for k in 0..NUMERIC_DIM {
            numeric[k] = (raw[k] / BIN_WIDTHS[k]).floor() as i64;
        }
        Self { categorical, numeric }
    }

    fn distance_sq(&self, other: &BinKey) -> i64 {
        self.numeric
            .iter()
            .zip(&other.numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// One labelled segment traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookupSample {
    pub categorical: [u32; 7],
    pub raw: [f64; NUMERIC_DIM],
    pub length: f64,
    pub fuel_units: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    /// Mean fuel units per metre.
    pub rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupTable {
    pub bins: BTreeMap<BinKey, BinStats>,
}

/// Features of every segment of a path as the lookup table sees them.
pub fn path_samples(
    net: &RoadNetwork,
    path: &[SegmentId],
    departure: Departure,
    vehicle: &VehicleParams,
) -> Result<Vec<LookupSample>, NetworkError> {
    let segs = path.iter().map(|id| net.segment(*id)).collect::<Result<Vec<_>, _>>()?;
    segs.iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(LookupSample {
                categorical: categorical_codes(s, departure),
                raw: raw_numeric(s, segs.get(i + 1).copied(), vehicle)?,
                length: s.length,
                fuel_units: 0.0,
            })
        })
        .collect()
}

impl LookupTable {
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a LookupSample>) -> Self {
        let mut acc: BTreeMap<BinKey, (f64, usize)> = BTreeMap::new();
        for s in samples {
            let e = acc.entry(BinKey::new(s.categorical, &s.raw)).or_default();
            e.0 += s.fuel_units / s.length;
            e.1 += 1;
        }
        let bins = acc
            .into_iter()
            .map(|(k, (sum, n))| {
                (
                    k,
                    BinStats {
                        rate: sum / n as f64,
                        count: n,
                    },
                )
            })
            .collect();
        Self { bins }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Rate of the exact bin, else of the nearest bin with the same
    /// categorical codes, else of the nearest bin overall. Ties go to the
    /// smallest key.
    pub fn rate(&self, key: &BinKey) -> Option<f64> {
        if let Some(b) = self.bins.get(key) {
            return Some(b.rate);
        }
        let lo = BinKey {
            categorical: key.categorical,
            numeric: [i64::MIN; NUMERIC_DIM],
        };
        let hi = BinKey {
            categorical: key.categorical,
            numeric: [i64::MAX; NUMERIC_DIM],
        };
        nearest(self.bins.range(lo..=hi), key).or_else(|| nearest(self.bins.iter(), key))
    }

    /// Fuel units of a path: the sum of rate × length over its segments.
    pub fn predict(&self, samples: &[LookupSample]) -> Option<f64> {
        samples
            .iter()
            .map(|s| self.rate(&BinKey::new(s.categorical, &s.raw)).map(|r| r * s.length))
            .sum()
    }
}

fn nearest<'a>(bins: impl Iterator<Item = (&'a BinKey, &'a BinStats)>, key: &BinKey) -> Option<f64> {
    let mut best: Option<(i64, f64)> = None;
    for (k, b) in bins {
        let d = k.distance_sq(key);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, b.rate));
        }
    }
    best.map(|(_, r)| r)
}
