//! Repeated train/evaluate runs over a split plan, and ablation sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::lookup::{path_samples, LookupSample, LookupTable};
use super::{evaluate, EvalError, EvalReport, Failure};
use crate::datagen::{make_queries, make_test_queries, Query, SplitPlan, TripRecord, TEST_PATH_LENGTHS};
use crate::embedding::EmbeddingTable;
use crate::features::{CategoricalVocab, Featurizer, NormStats, QuerySpec};
use crate::model::{DecoderKind, Model, ModelArtifact, ModelConfig};
use crate::network::RoadNetwork;
use crate::seeds::derive_seed;
use crate::training::{predict_examples, train, write_log, Example, LossWeights, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Encoder with the physics decoder.
    Ecotoll,
    /// Encoder with the linear decoder.
    EncoderFc,
    Lookup,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ecotoll => "ecotoll",
            Method::EncoderFc => "encoder_fc",
            Method::Lookup => "lookup",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Method::Ecotoll => 1,
            Method::EncoderFc => 2,
            Method::Lookup => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub query_len: usize,
    pub query_step: usize,
    pub test_lengths: Vec<usize>,
    pub repeats: usize,
    pub methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            query_len: 20,
            query_step: 5,
            test_lengths: TEST_PATH_LENGTHS.to_vec(),
            repeats: 10,
            methods: vec![Method::Ecotoll, Method::EncoderFc, Method::Lookup],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.query_len == 0 || self.query_step == 0 {
            return Err(EvalError::Config("query_len and query_step must be >= 1".into()));
        }
        if self.test_lengths.is_empty() || self.test_lengths.contains(&0) {
            return Err(EvalError::Config("test_lengths must be non-empty and positive".into()));
        }
        if self.repeats == 0 {
            return Err(EvalError::Config("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(EvalError::Config("no methods selected".into()));
        }
        Ok(())
    }
}

/// Inputs shared by every repeat.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub network: &'a RoadNetwork,
    /// Needed only by the learned methods.
    pub embeddings: Option<&'a EmbeddingTable>,
    pub trips: &'a [TripRecord],
    pub plan: &'a SplitPlan,
}

/// Featurised datasets of one repeat.
#[derive(Debug, Clone)]
pub struct RepeatData {
    pub repeat: usize,
    pub vocab: CategoricalVocab,
    pub stats: NormStats,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    /// Test examples per path length; empty when only the lookup runs.
    pub test: Vec<(usize, Vec<Example>)>,
    /// Path energy of every test query per path length.
    pub test_truth: Vec<(usize, Vec<f64>)>,
    /// Lookup features of the same test queries.
    pub test_lookup: Vec<(usize, Vec<Vec<LookupSample>>)>,
    /// Labelled training segments for the lookup table.
    pub lookup_train: Vec<LookupSample>,
}

fn query_spec(trip: &TripRecord, q: &Query) -> QuerySpec {
    QuerySpec {
        path: trip.path[q.start..q.start + q.len].to_vec(),
        departure: trip.departure,
        vehicle: trip.vehicle,
    }
}

/// Example for a window of a trip; energy labels are attached only when
/// `labelled` and present in the record.
pub fn trip_example(f: &Featurizer<'_>, trip: &TripRecord, q: &Query, labelled: bool) -> Result<Example, EvalError> {
    let spec = query_spec(trip, q);
    let segs = &trip.segments[q.start..q.start + q.len];
    let seg_energy = if labelled {
        segs.iter().map(|s| s.fuel_units).collect::<Option<Vec<f64>>>()
    } else {
        None
    };
    Ok(Example {
        rows: f.segment_rows(&spec)?,
        vehicle: trip.vehicle,
        seg_time: segs.iter().map(|s| s.travel_time).collect(),
        seg_energy,
    })
}

fn trips_by_id<'a>(trips: &'a [TripRecord], ids: &[u64]) -> Result<Vec<&'a TripRecord>, EvalError> {
    let index: BTreeMap<u64, &TripRecord> = trips.iter().map(|t| (t.trip_id, t)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| EvalError::Data(format!("split refers to unknown trip {id}")))
        })
        .collect()
}

fn owned(trips: &[&TripRecord]) -> Vec<TripRecord> {
    trips.iter().map(|t| (*t).clone()).collect()
}

/// Fits vocabulary and normalisation on the repeat's training trips and
/// featurises its training, validation and test queries.
pub fn prepare_repeat(corpus: &Corpus<'_>, repeat: usize, cfg: &ExperimentConfig) -> Result<RepeatData, EvalError> {
    let split = corpus
        .plan
        .repeats
        .get(repeat)
        .ok_or_else(|| EvalError::Config(format!("split plan has no repeat {repeat}")))?;
    let labelled = split.labelled(cfg.train.energy_label_fraction);
    let train_trips = trips_by_id(corpus.trips, &split.train)?;
    let val_trips = trips_by_id(corpus.trips, &split.validation)?;
    let test_trips = trips_by_id(corpus.trips, &corpus.plan.test)?;

    let mut fitted = Vec::new();
    let mut lookup_train = Vec::new();
    for t in &train_trips {
        let samples = path_samples(corpus.network, &t.path, t.departure, &t.vehicle)?;
        if labelled.contains(&t.trip_id) {
            for (s, rec) in samples.iter().zip(&t.segments) {
                if let Some(f) = rec.fuel_units {
                    lookup_train.push(LookupSample { fuel_units: f, ..*s });
                }
            }
        }
        fitted.extend(samples);
    }
    let stats = NormStats::fit(fitted.iter().map(|s| &s.raw))?;
    let vocab = CategoricalVocab::fit(fitted.iter().map(|s| &s.categorical));
    let learned = cfg.methods.iter().any(|m| *m != Method::Lookup);
    let embeddings = match (learned, corpus.embeddings) {
        (true, None) => return Err(EvalError::Config("learned methods need segment embeddings".into())),
        (_, e) => e,
    };
    let empty = EmbeddingTable::new(0, Vec::new(), Vec::new()).map_err(|e| EvalError::Data(e.to_string()))?;
    let featurizer = Featurizer {
        network: corpus.network,
        embeddings: embeddings.unwrap_or(&empty),
        stats: Some(&stats),
        vocab: &vocab,
    };

    let windows = |trips: &[&TripRecord]| -> Result<Vec<Example>, EvalError> {
        let index: BTreeMap<u64, &TripRecord> = trips.iter().map(|t| (t.trip_id, *t)).collect();
        make_queries(&owned(trips), cfg.query_len, cfg.query_step)
            .iter()
            .map(|q| {
                let t = index[&q.trip_id];
                trip_example(&featurizer, t, q, labelled.contains(&t.trip_id))
            })
            .collect()
    };
    let (train_set, validation) = if learned {
        (windows(&train_trips)?, windows(&val_trips)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let test_index: BTreeMap<u64, &TripRecord> = test_trips.iter().map(|t| (t.trip_id, *t)).collect();
    let mut test = Vec::new();
    let mut test_truth = Vec::new();
    let mut test_lookup = Vec::new();
    for (len, queries) in make_test_queries(&owned(&test_trips), &cfg.test_lengths) {
        let mut ex = Vec::new();
        let mut truth = Vec::with_capacity(queries.len());
        let mut lk = Vec::with_capacity(queries.len());
        for q in &queries {
            let t = test_index[&q.trip_id];
            let energy: Option<f64> = t.segments[q.start..q.start + q.len].iter().map(|s| s.fuel_units).sum();
            truth.push(energy.ok_or_else(|| EvalError::Data(format!("test trip {} has no energy labels", t.trip_id)))?);
            if learned {
                ex.push(trip_example(&featurizer, t, q, true)?);
            }
            let spec = query_spec(t, q);
            lk.push(path_samples(corpus.network, &spec.path, spec.departure, &spec.vehicle)?);
        }
        test.push((len, ex));
        test_truth.push((len, truth));
        test_lookup.push((len, lk));
    }
    info!(
        "repeat {repeat}: {} train / {} validation queries, {} labelled trips, {} lookup segments",
        train_set.len(),
        validation.len(),
        labelled.len(),
        lookup_train.len()
    );
    Ok(RepeatData {
        repeat,
        vocab,
        stats,
        train: train_set,
        validation,
        test,
        test_truth,
        test_lookup,
        lookup_train,
    })
}

fn run_lookup(data: &RepeatData) -> Result<Vec<(usize, Option<f64>)>, String> {
    let table = LookupTable::build(&data.lookup_train);
    if table.is_empty() {
        return Err("no labelled training segments".into());
    }
    let buckets: Vec<(usize, Vec<f64>, Vec<f64>)> = data
        .test_lookup
        .iter()
        .zip(&data.test_truth)
        .map(|((len, samples), (_, truth))| {
            let pred = samples
                .iter()
                .map(|s| table.predict(s).unwrap_or(f64::NAN))
                .collect();
            (*len, pred, truth.clone())
        })
        .collect();
    Ok(evaluate(&buckets))
}

/// Trains a fresh model of `method` on a repeat's data.
pub fn fit_model(data: &RepeatData, method: Method, cfg: &ExperimentConfig) -> Result<TrainOutcome, EvalError> {
    let mut model_cfg = cfg.model;
    model_cfg.decoder = match method {
        Method::EncoderFc => DecoderKind::Linear,
        Method::Ecotoll => DecoderKind::Physics,
        Method::Lookup => return Err(EvalError::Config("the lookup table is not trained".into())),
    };
    let seed = derive_seed(cfg.train.seed, &[data.repeat as u64, method.stream()]);
    let model = Model::new(model_cfg, &data.vocab, seed)?;
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let outcome = train(model, &data.train, &data.validation, &train_cfg, &cfg.loss)?;
    info!(
        "repeat {} {}: best epoch {} of {}",
        data.repeat,
        method.name(),
        outcome.best_epoch,
        outcome.log.len() - 1
    );
    Ok(outcome)
}

/// Test MAPE per path length of a saved model, featurising the test trips
/// with the artifact's own vocabulary and statistics.
pub fn evaluate_artifact(
    corpus: &Corpus<'_>,
    artifact: &ModelArtifact,
    test_lengths: &[usize],
) -> Result<Vec<(usize, Option<f64>)>, EvalError> {
    let featurizer = artifact.featurizer(corpus.network);
    let test_trips = owned(&trips_by_id(corpus.trips, &corpus.plan.test)?);
    let index: BTreeMap<u64, &TripRecord> = test_trips.iter().map(|t| (t.trip_id, t)).collect();
    let mut buckets = Vec::new();
    for (len, queries) in make_test_queries(&test_trips, test_lengths) {
        let ex = queries
            .iter()
            .map(|q| trip_example(&featurizer, index[&q.trip_id], q, true))
            .collect::<Result<Vec<_>, _>>()?;
        let truth = ex
            .iter()
            .map(|e| e.path_energy().ok_or_else(|| EvalError::Data("test trip without energy labels".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = predict_examples(&artifact.model, &ex)?.into_iter().map(|p| p.0).collect();
        buckets.push((len, pred, truth));
    }
    Ok(evaluate(&buckets))
}

fn run_model(
    corpus: &Corpus<'_>,
    data: &RepeatData,
    method: Method,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<(usize, Option<f64>)>, EvalError> {
    let embeddings = corpus
        .embeddings
        .ok_or_else(|| EvalError::Config("learned methods need segment embeddings".into()))?;
    let outcome = fit_model(data, method, cfg)?;
    let mut buckets = Vec::with_capacity(data.test.len());
    for ((len, ex), (_, truth)) in data.test.iter().zip(&data.test_truth) {
        let pred: Vec<f64> = predict_examples(&outcome.model, ex)?.into_iter().map(|p| p.0).collect();
        buckets.push((*len, pred, truth.clone()));
    }
    if let Some(dir) = out_dir {
        let name = format!("{}_r{}", method.name(), data.repeat);
        fs::create_dir_all(dir.join("logs"))?;
        write_log(&outcome.log, &dir.join("logs").join(format!("{name}.csv")))?;
        ModelArtifact {
            model: outcome.model,
            stats: data.stats.clone(),
            vocab: data.vocab.clone(),
            embeddings: embeddings.clone(),
        }
        .save(&dir.join("models").join(name))?;
    }
    Ok(evaluate(&buckets))
}

/// Trains and evaluates every method on `cfg.repeats` repeats. A method
/// that fails on a repeat is recorded and the run continues. Reports, logs
/// and model artifacts go under `out_dir` when given.
pub fn run_experiment(
    corpus: &Corpus<'_>,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if cfg.repeats > corpus.plan.repeats.len() {
        return Err(EvalError::Config(format!(
            "{} repeats requested but the split plan has {}",
            cfg.repeats,
            corpus.plan.repeats.len()
        )));
    }
    let mut report = EvalReport::default();
    for r in 0..cfg.repeats {
        let data = prepare_repeat(corpus, r, cfg)?;
        for &method in &cfg.methods {
            let result = match method {
                Method::Lookup => run_lookup(&data),
                _ => run_model(corpus, &data, method, cfg, out_dir).map_err(|e| e.to_string()),
            };
            match result {
                Ok(m) => report.push(method.name(), r, &m),
                Err(error) => {
                    warn!("repeat {r} {} failed: {error}", method.name());
                    report.failures.push(Failure {
                        method: method.name().to_string(),
                        repeat: r,
                        error,
                    });
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Jerk penalty weight.
    Jerk,
    /// Energy task weight; the time weight is `1 - value`.
    EnergyWeight,
    /// Context half-width.
    Window,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Jerk => "jerk",
            SweepKind::EnergyWeight => "energy_weight",
            SweepKind::Window => "window",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

impl Sweep {
    /// Experiment config for one sweep value; only the physics model runs.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, EvalError> {
        let mut cfg = base.clone();
        cfg.methods = vec![Method::Ecotoll];
        match self.kind {
            SweepKind::Jerk => cfg.loss.jerk = value,
            SweepKind::EnergyWeight => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(EvalError::Config(format!("energy weight {value} outside [0, 1]")));
                }
                cfg.loss.energy = value;
                cfg.loss.time = 1.0 - value;
            }
            SweepKind::Window => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(EvalError::Config(format!("window {value} is not a non-negative integer")));
                }
                cfg.model.window = value as usize;
            }
        }
        Ok(cfg)
    }
}

/// Runs one experiment per sweep value in `out_dir/<kind>_<value>/` and
/// writes `sweep_<kind>.csv` with one row per value, path length and
/// repeat.
pub fn run_sweep(
    corpus: &Corpus<'_>,
    base: &ExperimentConfig,
    sweep: &Sweep,
    out_dir: Option<&Path>,
) -> Result<Vec<(f64, EvalReport)>, EvalError> {
    if sweep.values.is_empty() {
        return Err(EvalError::Config("sweep has no values".into()));
    }
    let configs = sweep
        .values
        .iter()
        .map(|&v| sweep.apply(base, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    let mut csv = String::from("sweep,value,method,path_len,repeat,mape\n");
    let mut seen = BTreeSet::new();
    for (value, cfg) in configs {
        if !seen.insert(value.to_bits()) {
            return Err(EvalError::Config(format!("duplicate sweep value {value}")));
        }
        let dir = out_dir.map(|d| d.join(format!("{}_{value:?}", sweep.kind.name())));
        let report = run_experiment(corpus, &cfg, dir.as_deref())?;
        for s in &report.scores {
            let m = s.mape.map_or_else(|| "n/a".to_string(), |m| format!("{m:?}"));
            let _ = writeln!(
                csv,
                "{},{value:?},{},{},{},{m}",
                sweep.kind.name(),
                s.method,
                s.path_len,
                s.repeat
            );
        }
        out.push((value, report));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("sweep_{}.csv", sweep.kind.name())), csv)?;
    }
    Ok(out)
}
