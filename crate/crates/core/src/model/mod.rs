//! Contextual attention encoder and the decoders on top of it.
//!
//! The encoder maps each segment's subpath window to a positive
//! pseudo-velocity profile. The physics decoder turns that profile into
//! energy and travel time; the linear decoder is a plain 2-output head used
//! as an ablation.
//!
//! Everything is batched: a [`SegmentBatch`] holds the feature rows of many
//! paths plus, for every output row, the indices of its window rows.

mod artifact;
pub mod physics;
#[cfg(test)]
pub(crate) mod tests;

pub use artifact::ModelArtifact;
pub use physics::{ElevationTerm, PhysicsConstants, SegmentGeometry, FUEL_UNIT_J};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{softplus_inverse, DiffError, Graph, Matrix, ParamStore, Var};
use crate::embedding::EMBEDDING_DIM;
use crate::features::{
    window_rows, CategoricalEmbedder, CategoricalFeature, CategoricalVocab, FeatureError,
    SegmentFeatures, SubpathTensor, VehicleParams, FEATURE_DIM, NUMERIC_DIM,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    #[default]
    Physics,
    /// Linear map from the profile to (energy units, seconds).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Context half-width `w`; windows hold `2w + 1` segments.
    pub window: usize,
    pub profile_len: usize,
    pub ffn_hidden: usize,
    pub decoder: DecoderKind,
    pub elevation_term: ElevationTerm,
    pub constants: PhysicsConstants,
    /// Initial speed (m/s) produced by the output head bias.
    pub init_speed: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 1,
            profile_len: 60,
            ffn_hidden: 32,
            decoder: DecoderKind::Physics,
            elevation_term: ElevationTerm::GradeRate,
            constants: PhysicsConstants::default(),
            init_speed: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.profile_len < 2 {
            return Err(ModelError::Config("profile_len must be >= 2".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(ModelError::Config("ffn_hidden must be >= 1".into()));
        }
        if !(self.init_speed > 0.0 && self.init_speed.is_finite()) {
            return Err(ModelError::Config("init_speed must be > 0".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.window + 1
    }
}

/// Feature rows and window structure of a batch.
#[derive(Debug, Clone)]
pub enum BatchRows {
    /// Fully materialised 58-wide rows (categorical columns included).
    Dense(Matrix),
    /// Rows whose categorical columns are looked up in the trainable
    /// tables while the graph is built.
    Parts {
        embedding: Matrix,
        categorical: [Vec<usize>; 7],
        numeric: Matrix,
    },
}

/// One path worth of featurised segments.
#[derive(Debug, Clone, Copy)]
pub struct PathInput<'a> {
    pub rows: &'a [SegmentFeatures],
    pub vehicle: &'a VehicleParams,
}

#[derive(Debug, Clone)]
pub struct SegmentBatch {
    pub rows: BatchRows,
    /// Input row of each output's centre segment; `None` means output `i`
    /// is centred on input row `i`.
    pub centers: Option<Vec<usize>>,
    /// `width` optional input-row references per output row.
    pub index: Vec<Option<usize>>,
    pub width: usize,
    pub geometry: Vec<SegmentGeometry>,
    pub vehicles: Vec<VehicleParams>,
    /// Path of each output row.
    pub path: Vec<usize>,
    pub n_paths: usize,
}

impl SegmentBatch {
    /// Every segment of every path becomes an output row, with windows
    /// confined to its own path.
    pub fn from_paths(paths: &[PathInput<'_>], window: usize) -> Self {
        let n: usize = paths.iter().map(|p| p.rows.len()).sum();
        let width = 2 * window + 1;
        let mut embedding = Array2::zeros((n, EMBEDDING_DIM));
        let mut numeric = Array2::zeros((n, NUMERIC_DIM));
        let mut categorical: [Vec<usize>; 7] = Default::default();
        let mut index = Vec::with_capacity(n * width);
        let mut geometry = Vec::with_capacity(n);
        let mut vehicles = Vec::with_capacity(n);
        let mut path = Vec::with_capacity(n);
        let mut base = 0;
        for (k, p) in paths.iter().enumerate() {
            for (i, r) in p.rows.iter().enumerate() {
                let row = base + i;
                for (d, v) in r.embedding.iter().enumerate() {
                    embedding[[row, d]] = *v;
                }
                for d in 0..NUMERIC_DIM {
                    numeric[[row, d]] = r.numeric[d];
                }
                for (f, col) in categorical.iter_mut().enumerate() {
                    col.push(r.categorical[f]);
                }
                index.extend(window_rows(i, p.rows.len(), window).map(|o| o.map(|o| base + o)));
                geometry.push(SegmentGeometry {
                    length: r.length,
                    elevation_change: r.elevation_change,
                });
                vehicles.push(*p.vehicle);
                path.push(k);
            }
            base += p.rows.len();
        }
        Self {
            rows: BatchRows::Parts {
                embedding,
                categorical,
                numeric,
            },
            centers: None,
            index,
            width,
            geometry,
            vehicles,
            path,
            n_paths: paths.len(),
        }
    }

    /// A single materialised window; padded rows are never referenced.
    pub fn from_subpath(x: &SubpathTensor, vehicle: &VehicleParams, geometry: SegmentGeometry) -> Self {
        let index = x.mask.iter().enumerate().map(|(k, &m)| m.then_some(k)).collect();
        Self {
            rows: BatchRows::Dense(x.x.clone()),
            centers: Some(vec![x.center]),
            index,
            width: x.mask.len(),
            geometry: vec![geometry],
            vehicles: vec![*vehicle],
            path: vec![0],
            n_paths: 1,
        }
    }

    pub fn outputs(&self) -> usize {
        self.geometry.len()
    }
}

/// Graph handles produced by [`Model::forward`]; all are `outputs × k`.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Pseudo-velocity profiles (m/s), `outputs × profile_len`.
    pub profile: Var,
    /// Segment energy in fuel units.
    pub energy: Var,
    /// Segment travel time in seconds.
    pub time: Var,
    /// Per-segment sum of squared jerk; absent for the linear decoder.
    pub jerk_sq: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPrediction {
    pub energy_j: f64,
    pub time_s: f64,
    pub profile: Vec<f64>,
    pub jerk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPrediction {
    pub energy_j: f64,
    pub time_s: f64,
    /// Per-segment (energy J, time s).
    pub segments: Vec<(f64, f64)>,
}

const ENCODER_MATS: [&str; 4] = ["enc.m_q", "enc.m_k", "enc.m_v", "enc.m_o"];

fn cat_name(f: CategoricalFeature) -> String {
    format!("cat.{}", f.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters. Weight matrices and biases are uniform in
    /// ±1/sqrt(fan_in); layer norms start as identity; categorical tables
    /// are uniform in [-1, 1); the profile head bias starts at
    /// `softplus⁻¹(init_speed)`.
    pub fn new(config: ModelConfig, vocab: &CategoricalVocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cat = CategoricalEmbedder::random(vocab.clone(), rng.gen());
        for (f, t) in CategoricalFeature::ALL.iter().zip(cat.tables) {
            params.insert(cat_name(*f), t)?;
        }
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-b..b))
        };
        let d = FEATURE_DIM;
        let h = config.ffn_hidden;
        let n = config.profile_len;
        for name in ENCODER_MATS {
            params.insert(name, uniform(d, d, d))?;
        }
        params.insert("enc.ln1.gain", Array2::ones((1, d)))?;
        params.insert("enc.ln1.bias", Array2::zeros((1, d)))?;
        params.insert("enc.ffn1.w", uniform(d, h, d))?;
        params.insert("enc.ffn1.b", uniform(1, h, d))?;
        params.insert("enc.ffn2.w", uniform(h, d, h))?;
        params.insert("enc.ffn2.b", uniform(1, d, h))?;
        params.insert("enc.ln2.gain", Array2::ones((1, d)))?;
        params.insert("enc.ln2.bias", Array2::zeros((1, d)))?;
        params.insert("head.w", uniform(d, n, d))?;
        params.insert("head.b", Array2::from_elem((1, n), softplus_inverse(config.init_speed)))?;
        if config.decoder == DecoderKind::Linear {
            params.insert("fc.w", uniform(n, 2, n))?;
            params.insert("fc.b", uniform(1, 2, n))?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let d = FEATURE_DIM;
        let (h, n) = (config.ffn_hidden, config.profile_len);
        let mut expected = vec![
            ("enc.ln1.gain", (1, d)),
            ("enc.ln1.bias", (1, d)),
            ("enc.ffn1.w", (d, h)),
            ("enc.ffn1.b", (1, h)),
            ("enc.ffn2.w", (h, d)),
            ("enc.ffn2.b", (1, d)),
            ("enc.ln2.gain", (1, d)),
            ("enc.ln2.bias", (1, d)),
            ("head.w", (d, n)),
            ("head.b", (1, n)),
        ];
        expected.extend(ENCODER_MATS.iter().map(|m| (*m, (d, d))));
        if config.decoder == DecoderKind::Linear {
            expected.push(("fc.w", (n, 2)));
            expected.push(("fc.b", (1, 2)));
        }
        for (name, shape) in expected {
            match params.get(name) {
                Some(m) if m.dim() == shape => {}
                Some(m) => {
                    return Err(ModelError::Artifact(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        m.dim()
                    )))
                }
                None => return Err(ModelError::Artifact(format!("missing parameter {name}"))),
            }
        }
        for f in CategoricalFeature::ALL {
            match params.get(&cat_name(f)) {
                Some(m) if m.ncols() == f.dim() => {}
                _ => return Err(ModelError::Artifact(format!("bad or missing table {}", cat_name(f)))),
            }
        }
        Ok(Self { config, params })
    }

    /// Current categorical tables, for materialising dense windows.
    pub fn categorical_embedder(&self, vocab: &CategoricalVocab) -> CategoricalEmbedder {
        let tables = CategoricalFeature::ALL
            .iter()
            .map(|f| self.params.get(&cat_name(*f)).expect("validated").clone())
            .collect();
        CategoricalEmbedder {
            vocab: vocab.clone(),
            tables,
        }
    }

    fn p(&self, bound: &[Var], name: &str) -> Result<Var, ModelError> {
        self.params
            .slot(name)
            .map(|s| bound[s])
            .ok_or_else(|| ModelError::Artifact(format!("missing parameter {name}")))
    }

    /// Builds the graph for `batch` on parameters already bound into `g`
    /// (see [`ParamStore::bind`]).
    pub fn forward(&self, g: &mut Graph, bound: &[Var], batch: &SegmentBatch) -> Result<Forward, ModelError> {
        let h = self.encode_graph(g, bound, batch)?;
        match self.config.decoder {
            DecoderKind::Physics => self.physics_graph(g, h, batch),
            DecoderKind::Linear => {
                let w = self.p(bound, "fc.w")?;
                let b = self.p(bound, "fc.b")?;
                let lin = g.matmul(h, w)?;
                let out = g.add_row(lin, b)?;
                let energy = g.slice_cols(out, 0, 1)?;
                let time = g.slice_cols(out, 1, 2)?;
                Ok(Forward {
                    profile: h,
                    energy,
                    time,
                    jerk_sq: None,
                })
            }
        }
    }

    /// Encoder up to and including the softplus profile head.
    fn encode_graph(&self, g: &mut Graph, bound: &[Var], batch: &SegmentBatch) -> Result<Var, ModelError> {
        let x = match &batch.rows {
            BatchRows::Dense(m) => g.constant(m.clone()),
            BatchRows::Parts {
                embedding,
                categorical,
                numeric,
            } => {
                let mut parts = vec![g.constant(embedding.clone())];
                for (f, rows) in CategoricalFeature::ALL.iter().zip(categorical) {
                    let table = self.p(bound, &cat_name(*f))?;
                    parts.push(g.gather_rows(table, rows.clone())?);
                }
                parts.push(g.constant(numeric.clone()));
                g.concat_cols(&parts)?
            }
        };
        if batch.index.len() != batch.outputs() * batch.width {
            return Err(ModelError::Config("batch index does not match outputs".into()));
        }
        let center = match &batch.centers {
            Some(c) => g.gather_rows(x, c.clone())?,
            None => x,
        };
        let [mq, mk, mv, mo] = ENCODER_MATS.map(|n| self.p(bound, n));
        let q = g.matmul(center, mq?)?;
        let k = g.matmul(x, mk?)?;
        let v = g.matmul(x, mv?)?;
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let scores = g.window_scores(q, k, batch.index.clone(), batch.width, scale)?;
        let mask = batch.index.iter().map(Option::is_some).collect();
        let attn = g.masked_softmax(scores, mask)?;
        let mixed = g.window_mix(attn, v, batch.index.clone(), batch.width)?;
        let out = g.matmul(mixed, mo?)?;
        let res1 = g.add(center, out)?;
        let h1 = g.layer_norm(res1, self.p(bound, "enc.ln1.gain")?, self.p(bound, "enc.ln1.bias")?)?;
        let f1 = g.matmul(h1, self.p(bound, "enc.ffn1.w")?)?;
        let f1 = g.add_row(f1, self.p(bound, "enc.ffn1.b")?)?;
        let f1 = g.relu(f1);
        let f2 = g.matmul(f1, self.p(bound, "enc.ffn2.w")?)?;
        let f2 = g.add_row(f2, self.p(bound, "enc.ffn2.b")?)?;
        let res2 = g.add(h1, f2)?;
        let h2 = g.layer_norm(res2, self.p(bound, "enc.ln2.gain")?, self.p(bound, "enc.ln2.bias")?)?;
        let head = g.matmul(h2, self.p(bound, "head.w")?)?;
        let head = g.add_row(head, self.p(bound, "head.b")?)?;
        Ok(g.softplus(head))
    }

    fn physics_graph(&self, g: &mut Graph, v: Var, batch: &SegmentBatch) -> Result<Forward, ModelError> {
        let n = self.config.profile_len;
        let c = self.config.constants;
        let trap = g.constant(trapezoid_weights(n));
        let diff = g.constant(difference_matrix(n));
        let col = |f: &dyn Fn(&SegmentGeometry, &VehicleParams) -> f64| -> Vec<f64> {
            batch.geometry.iter().zip(&batch.vehicles).map(|(s, veh)| f(s, veh)).collect()
        };
        let two_len = g.column(&col(&|s, _| 2.0 * s.length));
        let mass_eta = g.column(&col(&|_, veh| veh.mass / veh.efficiency));
        let aero = g.column(&col(&|_, veh| {
            veh.frontal_area / (2.0 * veh.efficiency) * veh.drag_coeff * c.air_density
        }));

        // dt = 2L / sum_j (v_j + v_{j+1})
        let adjacent = g.matmul(v, trap)?;
        let dt = g.div(two_len, adjacent)?;
        let dv = g.matmul(v, diff)?;
        let acc = g.div_col(dv, dt)?;

        let av = g.mul(acc, v)?;
        let mut inner = match self.config.elevation_term {
            ElevationTerm::GradeRate => {
                let rate = g.column(&col(&|s, veh| {
                    c.g * s.elevation_change / s.length + veh.rolling_coeff * c.g
                }));
                let climb = g.mul_col(v, rate)?;
                g.add(av, climb)?
            }
            ElevationTerm::Literal => {
                let roll = g.column(&col(&|_, veh| veh.rolling_coeff * c.g));
                let rolling = g.mul_col(v, roll)?;
                let sum = g.add(av, rolling)?;
                let gh = g.column(&col(&|s, _| c.g * s.elevation_change));
                g.add_col(sum, gh)?
            }
        };
        inner = g.mul_col(inner, mass_eta)?;
        let v2 = g.square(v);
        let v3 = g.mul(v2, v)?;
        let drag = g.mul_col(v3, aero)?;
        let p = g.add(inner, drag)?;

        let p_sum = g.matmul(p, trap)?;
        let joules = g.mul(dt, p_sum)?;
        let energy = g.scale(joules, 0.5 / FUEL_UNIT_J);
        let time = g.scale(dt, (n - 1) as f64);

        let da = g.matmul(acc, diff)?;
        let jerk = g.div_col(da, dt)?;
        let jerk2 = g.square(jerk);
        let jerk_sq = g.sum_cols(jerk2);
        Ok(Forward {
            profile: v,
            energy,
            time,
            jerk_sq: Some(jerk_sq),
        })
    }

    /// Inference on one materialised window.
    pub fn predict_segment(
        &self,
        x: &SubpathTensor,
        vehicle: &VehicleParams,
        geometry: SegmentGeometry,
    ) -> Result<SegmentPrediction, ModelError> {
        let batch = SegmentBatch::from_subpath(x, vehicle, geometry);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &bound, &batch)?;
        let profile = g.value(f.profile).row(0).to_vec();
        let jerk = match self.config.decoder {
            DecoderKind::Physics => {
                physics::decode(&profile, vehicle, geometry, &self.config.constants, self.config.elevation_term).2
            }
            DecoderKind::Linear => Vec::new(),
        };
        Ok(SegmentPrediction {
            energy_j: g.value(f.energy)[[0, 0]] * FUEL_UNIT_J,
            time_s: g.value(f.time)[[0, 0]],
            profile,
            jerk,
        })
    }

    /// Path totals are sums of per-segment predictions.
    pub fn predict_paths(&self, paths: &[PathInput<'_>]) -> Result<Vec<PathPrediction>, ModelError> {
        let batch = SegmentBatch::from_paths(paths, self.config.window);
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &bound, &batch)?;
        let (e, t) = (g.value(f.energy), g.value(f.time));
        let mut out: Vec<PathPrediction> = paths
            .iter()
            .map(|p| PathPrediction {
                energy_j: 0.0,
                time_s: 0.0,
                segments: Vec::with_capacity(p.rows.len()),
            })
            .collect();
        for (row, &k) in batch.path.iter().enumerate() {
            let (ej, ts) = (e[[row, 0]] * FUEL_UNIT_J, t[[row, 0]]);
            out[k].energy_j += ej;
            out[k].time_s += ts;
            out[k].segments.push((ej, ts));
        }
        Ok(out)
    }
}

/// `[1, 2, ..., 2, 1]ᵀ`: `v · w` is the sum of adjacent pairs.
pub fn trapezoid_weights(n: usize) -> Matrix {
    Array2::from_shape_fn((n, 1), |(i, _)| if i == 0 || i == n - 1 { 1.0 } else { 2.0 })
}

/// `n × n` matrix `D` with `v · D` the time-unit difference of
/// [`physics::derivative`].
pub fn difference_matrix(n: usize) -> Matrix {
    let mut d = Array2::zeros((n, n));
    for j in 0..n {
        if j == 0 {
            d[[0, 0]] = -1.0;
            d[[1, 0]] = 1.0;
        } else if j == n - 1 {
            d[[n - 2, j]] = -1.0;
            d[[n - 1, j]] = 1.0;
        } else {
            d[[j - 1, j]] = -0.5;
            d[[j + 1, j]] = 0.5;
        }
    }
    d
}
