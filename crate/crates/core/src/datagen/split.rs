//! Query windows over trips and the repeated train/validation/test split.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatagenError, TripRecord};
use crate::seeds::derive_seed;

pub const TEST_PATH_LENGTHS: [usize; 6] = [1, 10, 20, 50, 100, 200];
pub const REPEATS: usize = 10;
const SPLIT_STREAM: u64 = 3;

/// A contiguous sub-path of a trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub trip_id: u64,
    pub start: usize,
    pub len: usize,
}

/// Windows of `len` segments every `step` segments; trips shorter than
/// `len` give none.
pub fn make_queries(trips: &[TripRecord], len: usize, step: usize) -> Vec<Query> {
    assert!(len > 0 && step > 0, "query length and step must be positive");
    let mut out = Vec::new();
    for t in trips {
        let n = t.path.len();
        let mut start = 0;
        while start + len <= n {
            out.push(Query {
                trip_id: t.trip_id,
                start,
                len,
            });
            start += step;
        }
    }
    out
}

/// Test queries per length, stepping by `min(5, len)`.
pub fn make_test_queries(trips: &[TripRecord], lengths: &[usize]) -> Vec<(usize, Vec<Query>)> {
    lengths
        .iter()
        .map(|&len| {
            let short = trips.iter().filter(|t| t.path.len() < len).count();
            if short > 0 {
                info!("{short} test trips shorter than {len} segments skipped");
            }
            (len, make_queries(trips, len, len.min(5)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSplit {
    pub seed: u64,
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    /// Orders in which training and validation trips receive energy
    /// labels; a fraction `f` labels the first `round(f * n)` of each, so
    /// smaller fractions label subsets of larger ones.
    pub train_label_order: Vec<u64>,
    pub validation_label_order: Vec<u64>,
}

fn prefix(order: &[u64], fraction: f64) -> BTreeSet<u64> {
    let k = (fraction * order.len() as f64).round() as usize;
    order[..k.min(order.len())].iter().copied().collect()
}

impl RepeatSplit {
    /// Energy-labelled trip ids for `fraction` of the training and of the
    /// validation trips.
    pub fn labelled(&self, fraction: f64) -> BTreeSet<u64> {
        let mut out = prefix(&self.train_label_order, fraction);
        out.extend(prefix(&self.validation_label_order, fraction));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Fixed across repeats; always fully labelled.
    pub test: Vec<u64>,
    pub repeats: Vec<RepeatSplit>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DatagenError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// 20% of trips for testing, then per repeat 60% of all trips for training
/// and the rest for validation.
pub fn make_split(trips: &[TripRecord], seed: u64, repeats: usize) -> Result<SplitPlan, DatagenError> {
    if trips.len() < 10 {
        return Err(DatagenError::Config(format!("need at least 10 trips, got {}", trips.len())));
    }
    let mut ids: Vec<u64> = trips.iter().map(|t| t.trip_id).collect();
    ids.sort_unstable();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SPLIT_STREAM]));
    ids.shuffle(&mut rng);
    let n_test = (0.2 * n as f64).round() as usize;
    let n_train = (0.6 * n as f64).round() as usize;
    let mut test = ids[..n_test].to_vec();
    test.sort_unstable();
    let rest = &ids[n_test..];
    let repeats = (0..repeats as u64)
        .map(|r| {
            let rseed = derive_seed(seed, &[SPLIT_STREAM, r + 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(rseed);
            let mut pool = rest.to_vec();
            pool.shuffle(&mut rng);
            let mut train = pool[..n_train].to_vec();
            let mut validation = pool[n_train..].to_vec();
            let mut train_label_order = train.clone();
            train_label_order.shuffle(&mut rng);
            let mut validation_label_order = validation.clone();
            validation_label_order.shuffle(&mut rng);
            train.sort_unstable();
            validation.sort_unstable();
            RepeatSplit {
                seed: rseed,
                train,
                validation,
                train_label_order,
                validation_label_order,
            }
        })
        .collect();
    Ok(SplitPlan { seed, test, repeats })
}
