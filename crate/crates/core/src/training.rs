//! Multitask loss and the Adam training loop with early stopping.
//!
//! Energy labels are in fuel units and times in seconds. Paths without an
//! energy label still contribute to the time and jerk terms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{huber_value, Adam, AdamConfig, DiffError, Graph, Var};
use crate::features::{SegmentFeatures, VehicleParams};
use crate::model::{DecoderKind, Forward, Model, ModelError, PathInput, SegmentBatch, FUEL_UNIT_J};
use crate::seeds::derive_seed;

/// Truth values at or below this are left out of MAPE.
pub const MAPE_GUARD: f64 = 1e-6;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub energy: f64,
    pub time: f64,
    pub jerk: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            energy: 0.2,
            time: 0.8,
            jerk: 1e-6,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !(ok(self.energy) && ok(self.time) && ok(self.jerk)) {
            return Err(TrainError::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        if !(self.huber_delta > 0.0) {
            return Err(TrainError::Config("huber_delta must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Share of training and validation trips that keep energy labels;
    /// applied when datasets are assembled.
    pub energy_label_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-4,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            energy_label_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.energy_label_fraction) {
            return Err(TrainError::Config("energy_label_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One labelled query path.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub rows: Vec<SegmentFeatures>,
    pub vehicle: VehicleParams,
    /// Seconds per segment.
    pub seg_time: Vec<f64>,
    /// Fuel units per segment, when the path is energy-labelled.
    pub seg_energy: Option<Vec<f64>>,
}

impl Example {
    pub fn path_time(&self) -> f64 {
        self.seg_time.iter().sum()
    }

    pub fn path_energy(&self) -> Option<f64> {
        self.seg_energy.as_ref().map(|e| e.iter().sum())
    }

    fn input(&self) -> PathInput<'_> {
        PathInput {
            rows: &self.rows,
            vehicle: &self.vehicle,
        }
    }
}

pub fn huber(err: f64, delta: f64) -> f64 {
    huber_value(err, delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// `NaN` when no path passed the guard.
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Mean of `|pred - truth| / truth` over paths whose truth exceeds
/// [`MAPE_GUARD`].
pub fn path_mape(pred: &[f64], truth: &[f64]) -> Mape {
    let mut sum = 0.0;
    let mut used = 0;
    for (p, t) in pred.iter().zip(truth) {
        if *t > MAPE_GUARD {
            sum += (p - t).abs() / t;
            used += 1;
        }
    }
    let excluded = truth.len() - used;
    if excluded > 0 {
        debug!("{excluded} paths excluded from MAPE by the guard");
    }
    Mape {
        value: if used == 0 { f64::NAN } else { sum / used as f64 },
        used,
        excluded,
    }
}

/// One task's loss over labelled paths given per-segment predictions and
/// labels: path-level MAPE plus the per-path mean of segment Huber losses,
/// averaged over paths. No paths gives 0.
pub fn task_loss(paths: &[(Vec<f64>, Vec<f64>)], delta: f64) -> f64 {
    if paths.is_empty() {
        return 0.0;
    }
    let seg: f64 = paths
        .iter()
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| huber(a - b, delta)).sum::<f64>() / p.len() as f64)
        .sum::<f64>()
        / paths.len() as f64;
    let sums: (Vec<f64>, Vec<f64>) = paths.iter().map(|(p, t)| (p.iter().sum::<f64>(), t.iter().sum::<f64>())).unzip();
    let m = path_mape(&sums.0, &sums.1);
    seg + if m.used == 0 { 0.0 } else { m.value }
}

/// Mean over paths of the mean over segments of the summed squared jerk.
pub fn jerk_penalty(paths: &[Vec<Vec<f64>>]) -> f64 {
    if paths.is_empty() {
        return 0.0;
    }
    paths
        .iter()
        .map(|segs| segs.iter().map(|j| j.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / segs.len() as f64)
        .sum::<f64>()
        / paths.len() as f64
}

/// Graph handles of the loss terms; a term is absent when its weight is 0
/// or no path carries the label.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub energy: Option<Var>,
    pub time: Option<Var>,
    pub jerk: Option<Var>,
}

/// Per-row labels aligned with a [`SegmentBatch`].
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub time: Vec<f64>,
    pub energy: Vec<Option<f64>>,
}

impl BatchLabels {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let mut time = Vec::new();
        let mut energy = Vec::new();
        for ex in examples {
            time.extend_from_slice(&ex.seg_time);
            match &ex.seg_energy {
                Some(e) => energy.extend(e.iter().map(|v| Some(*v))),
                None => energy.extend(std::iter::repeat(None).take(ex.rows.len())),
            }
        }
        Self { time, energy }
    }
}

fn task_graph(
    g: &mut Graph,
    pred: Var,
    labels: &[Option<f64>],
    batch: &SegmentBatch,
    delta: f64,
) -> Result<Option<Var>, DiffError> {
    let p = batch.n_paths;
    let mut seg_count = vec![0usize; p];
    let mut labelled = vec![true; p];
    let mut truth = vec![0.0; p];
    for (row, &k) in batch.path.iter().enumerate() {
        seg_count[k] += 1;
        match labels[row] {
            Some(v) => truth[k] += v,
            None => labelled[k] = false,
        }
    }
    let n = labelled.iter().filter(|&&l| l).count();
    if n == 0 {
        debug!("batch has no labelled paths for a task");
        return Ok(None);
    }
    let label_col: Vec<f64> = labels.iter().map(|l| l.unwrap_or(0.0)).collect();
    let seg_w: Vec<f64> = batch
        .path
        .iter()
        .map(|&k| if labelled[k] { 1.0 / (n * seg_count[k]) as f64 } else { 0.0 })
        .collect();
    let target = g.column(&label_col);
    let err = g.sub(pred, target)?;
    let h = g.huber(err, delta);
    let w = g.column(&seg_w);
    let weighted = g.mul(h, w)?;
    let seg = g.sum(weighted);

    let used = (0..p).filter(|&k| labelled[k] && truth[k] > MAPE_GUARD).count();
    if used == 0 {
        return Ok(Some(seg));
    }
    let sums = g.segment_sum(pred, batch.path.clone(), p)?;
    let t = g.column(&truth);
    let diff = g.sub(sums, t)?;
    let abs = g.abs(diff);
    let path_w: Vec<f64> = (0..p)
        .map(|k| {
            if labelled[k] && truth[k] > MAPE_GUARD {
                1.0 / (used as f64 * truth[k])
            } else {
                0.0
            }
        })
        .collect();
    let pw = g.column(&path_w);
    let weighted = g.mul(abs, pw)?;
    let path = g.sum(weighted);
    Ok(Some(g.add(seg, path)?))
}

fn jerk_graph(g: &mut Graph, jerk_sq: Var, batch: &SegmentBatch) -> Result<Var, DiffError> {
    let mut seg_count = vec![0usize; batch.n_paths];
    for &k in &batch.path {
        seg_count[k] += 1;
    }
    let w: Vec<f64> = batch
        .path
        .iter()
        .map(|&k| 1.0 / (batch.n_paths * seg_count[k]) as f64)
        .collect();
    let wc = g.column(&w);
    let weighted = g.mul(jerk_sq, wc)?;
    Ok(g.sum(weighted))
}

/// Weighted total loss. Zero-weight terms are not built at all.
pub fn loss_graph(
    g: &mut Graph,
    fwd: &Forward,
    batch: &SegmentBatch,
    labels: &BatchLabels,
    weights: &LossWeights,
) -> Result<LossTerms, DiffError> {
    let mut parts = Vec::new();
    let energy = if weights.energy > 0.0 {
        task_graph(g, fwd.energy, &labels.energy, batch, weights.huber_delta)?
    } else {
        None
    };
    if let Some(e) = energy {
        parts.push(g.scale(e, weights.energy));
    }
    let time = if weights.time > 0.0 {
        let t: Vec<Option<f64>> = labels.time.iter().map(|v| Some(*v)).collect();
        task_graph(g, fwd.time, &t, batch, weights.huber_delta)?
    } else {
        None
    };
    if let Some(t) = time {
        parts.push(g.scale(t, weights.time));
    }
    let jerk = match (weights.jerk > 0.0, fwd.jerk_sq) {
        (true, Some(j)) => Some(jerk_graph(g, j, batch)?),
        _ => None,
    };
    if let Some(j) = jerk {
        parts.push(g.scale(j, weights.jerk));
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => g.scalar(0.0),
    };
    for &p in &parts[1.min(parts.len())..] {
        total = g.add(total, p)?;
    }
    Ok(LossTerms {
        total,
        energy,
        time,
        jerk,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_energy_mape: f64,
    pub val_time_mape: f64,
    pub stopped: bool,
}

pub fn write_log(log: &[EpochLog], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("epoch,train_loss,val_energy_mape,val_time_mape,stopped\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{}",
            r.epoch, r.train_loss, r.val_energy_mape, r.val_time_mape, r.stopped
        );
    }
    fs::write(path, out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Path-level predictions in (fuel units, seconds).
pub fn predict_examples(model: &Model, examples: &[Example]) -> Result<Vec<(f64, f64)>, ModelError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let inputs: Vec<PathInput<'_>> = chunk.iter().map(Example::input).collect();
        for p in model.predict_paths(&inputs)? {
            out.push((p.energy_j / FUEL_UNIT_J, p.time_s));
        }
    }
    Ok(out)
}

/// (energy MAPE over energy-labelled paths, time MAPE over all paths).
pub fn validation_mape(model: &Model, examples: &[Example]) -> Result<(f64, f64), ModelError> {
    let preds = predict_examples(model, examples)?;
    let (mut pe, mut te) = (Vec::new(), Vec::new());
    for (ex, (e, _)) in examples.iter().zip(&preds) {
        if let Some(t) = ex.path_energy() {
            pe.push(*e);
            te.push(t);
        }
    }
    let pt: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let tt: Vec<f64> = examples.iter().map(Example::path_time).collect();
    Ok((path_mape(&pe, &te).value, path_mape(&pt, &tt).value))
}

/// Starts each linear output at its mean label; outputs with zero loss
/// weight keep their initial bias.
fn init_linear_bias(model: &mut Model, train: &[Example], weights: &LossWeights) {
    let Some(slot) = model.params.slot("fc.b") else {
        return;
    };
    let (mut e, mut ne, mut t, mut nt) = (0.0, 0usize, 0.0, 0usize);
    for ex in train {
        t += ex.path_time();
        nt += ex.seg_time.len();
        if let Some(s) = &ex.seg_energy {
            e += s.iter().sum::<f64>();
            ne += s.len();
        }
    }
    let b = model.params.value_mut(slot);
    if ne > 0 && weights.energy > 0.0 {
        b[[0, 0]] = e / ne as f64;
    }
    if nt > 0 && weights.time > 0.0 {
        b[[0, 1]] = t / nt as f64;
    }
}

fn batch_loss(
    model: &Model,
    batch_examples: &[&Example],
    weights: &LossWeights,
    backward: bool,
) -> Result<(f64, Vec<crate::diff::Matrix>), TrainError> {
    let inputs: Vec<PathInput<'_>> = batch_examples.iter().map(|e| e.input()).collect();
    let batch = SegmentBatch::from_paths(&inputs, model.config.window);
    let labels = BatchLabels::from_examples(batch_examples);
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, backward);
    let fwd = model.forward(&mut g, &bound, &batch)?;
    let terms = loss_graph(&mut g, &fwd, &batch, &labels, weights)?;
    let loss = g.scalar_value(terms.total);
    if !backward || !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    g.backward(terms.total)?;
    Ok((loss, model.params.grads(&g, &bound)))
}

fn describe_batch(batch: &[&Example]) -> String {
    let segs: usize = batch.iter().map(|e| e.rows.len()).sum();
    let first: Vec<String> = batch
        .iter()
        .take(3)
        .map(|e| format!("[{}..]", e.rows.first().map(|r| r.segment.to_string()).unwrap_or_default()))
        .collect();
    format!("{} paths, {segs} segments, first paths {}", batch.len(), first.join(" "))
}

/// Trains from `model`'s current parameters and returns the parameters of
/// the best validation epoch. Epoch 0 in the log is the untrained model.
pub fn train(
    mut model: Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    weights.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if model.config.decoder == DecoderKind::Linear {
        init_linear_bias(&mut model, train_set, weights);
    }
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
        &model.params,
    );
    let score = |m: &Model| -> Result<(f64, f64), TrainError> {
        let (e, t) = validation_mape(m, val_set)?;
        Ok((e, t))
    };
    // NaN energy MAPE (no labelled validation path) ranks every epoch equal
    // on energy, leaving time MAPE to decide.
    let key = |(e, t): (f64, f64)| (if e.is_nan() { 0.0 } else { e }, if t.is_nan() { 0.0 } else { t });
    let better = |a: (f64, f64), b: (f64, f64)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let initial_loss = {
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let ex: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            total += batch_loss(&model, &ex, weights, false)?.0;
        }
        total / order.len().div_ceil(cfg.batch_size) as f64
    };
    let s0 = score(&model)?;
    log.push(EpochLog {
        epoch: 0,
        train_loss: initial_loss,
        val_energy_mape: s0.0,
        val_time_mape: s0.1,
        stopped: false,
    });
    let mut best = (key(s0), model.clone(), 0usize);
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ex: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss(&model, &ex, weights, true)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}; {}", describe_batch(&ex)),
                });
            }
            adam.step(&mut model.params, &grads);
            total += loss;
            batches += 1;
        }
        if !model.params.all_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: batches,
                detail: "non-finite parameters after update".into(),
            });
        }
        let s = score(&model)?;
        let train_loss = total / batches as f64;
        info!(
            "epoch {epoch}: loss {train_loss:.5} val energy {:.4} time {:.4}",
            s.0, s.1
        );
        if better(key(s), best.0) {
            best = (key(s), model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        let stopped = stale >= cfg.patience;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_energy_mape: s.0,
            val_time_mape: s.1,
            stopped,
        });
        if stopped {
            break;
        }
    }
    if log.last().is_some_and(|l| !l.stopped) && log.len() > 1 {
        warn!("max_epochs reached before early stopping");
    }
    Ok(TrainOutcome {
        model: best.1,
        best_epoch: best.2,
        log,
    })
}
