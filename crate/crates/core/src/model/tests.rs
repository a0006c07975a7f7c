use approx::assert_relative_eq;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::physics::*;
use super::*;
use crate::features::{build_subpaths, CategoricalVocab, SegmentFeatures};
use crate::network::SegmentId;

pub(crate) fn vocab() -> CategoricalVocab {
    let codes: Vec<[u32; 7]> = (0..4).map(|c| [c, c % 3, c % 2, 1 + c % 2, c % 2, c, c]).collect();
    CategoricalVocab::fit(&codes)
}

pub(crate) fn random_rows(rng: &mut ChaCha8Rng, n: usize, vocab: &CategoricalVocab) -> Vec<SegmentFeatures> {
    (0..n)
        .map(|i| SegmentFeatures {
            segment: SegmentId(i as u32),
            embedding: (0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            categorical: std::array::from_fn(|k| rng.gen_range(0..vocab.rows(k))),
            numeric: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
            raw_numeric: [0.0; NUMERIC_DIM],
            length: rng.gen_range(200.0..1500.0),
            elevation_change: rng.gen_range(-15.0..15.0),
        })
        .collect()
}

fn model(decoder: DecoderKind, window: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        decoder,
        window,
        ..Default::default()
    };
    Model::new(cfg, &vocab(), seed).unwrap()
}

// ---- physics oracles ----

#[test]
fn delta_t_worked_example() {
    assert_eq!(delta_t(&[1.0, 2.0, 3.0, 2.0], 6.5), 1.0);
    assert_eq!(delta_t(&[10.0, 10.0, 10.0], 40.0), 2.0);
    let c = 7.0;
    let v = vec![c; 60];
    assert_relative_eq!(delta_t(&v, 1234.0), 1234.0 / (c * 59.0), max_relative = 1e-15);
}

#[test]
fn acceleration_and_jerk_examples() {
    let a = acceleration(&[1.0, 2.0, 3.0, 2.0], 1.0);
    assert_eq!(a, vec![1.0, 1.0, 0.0, -1.0]);
    assert!(acceleration(&[4.0; 10], 0.3).iter().all(|&x| x == 0.0));
    let j = jerk(&[1.0, 1.0, 0.0, -1.0], 1.0);
    assert_eq!(j, vec![0.0, -0.5, -1.0, -1.0]);
    assert!(jerk(&[2.5; 6], 0.7).iter().all(|&x| x == 0.0));
    let ramp: Vec<f64> = (1..=6).map(f64::from).collect();
    assert_eq!(acceleration(&ramp, 1.0)[0], 1.0);
    assert_eq!(acceleration(&ramp, 0.5)[5], 2.0);
}

#[test]
fn power_term_by_term() {
    let veh = VehicleParams::default();
    let flat = SegmentGeometry {
        length: 500.0,
        elevation_change: 0.0,
    };
    let c = PhysicsConstants::default();
    let p = power(&[10.0], &[0.0], &veh, flat, &c, ElevationTerm::GradeRate);
    // rolling 24445.514475 W + aero 6890.625 W
    assert_relative_eq!(p[0], 31336.139475, max_relative = 1e-12);
    assert_eq!(power(&[0.0], &[0.0], &veh, flat, &c, ElevationTerm::GradeRate)[0], 0.0);

    let heavy = VehicleParams {
        mass: 2.0 * veh.mass,
        ..veh
    };
    let p2 = power(&[10.0], &[0.0], &heavy, flat, &c, ElevationTerm::GradeRate);
    assert_relative_eq!(p2[0] - 6890.625, 2.0 * 24445.514475, max_relative = 1e-12);

    let hill = SegmentGeometry {
        length: 500.0,
        elevation_change: 10.0,
    };
    let grade = power(&[10.0], &[0.0], &veh, hill, &c, ElevationTerm::GradeRate)[0];
    assert_relative_eq!(grade - p[0], veh.mass / veh.efficiency * 9.81 * 0.02 * 10.0, max_relative = 1e-12);
    let literal = power(&[10.0], &[0.0], &veh, hill, &c, ElevationTerm::Literal)[0];
    assert_relative_eq!(literal - p[0], veh.mass / veh.efficiency * 9.81 * 10.0, max_relative = 1e-12);
}

#[test]
fn energy_and_time() {
    assert_eq!(energy(&[1.0, 3.0], 2.0), 4.0);
    assert_relative_eq!(energy(&[5.0; 60], 0.25), 59.0 * 0.25 * 5.0, max_relative = 1e-14);
    assert_eq!(travel_time(60, 0.5), 29.5);
    assert_eq!(travel_time(60, 1.0), 59.0);
}

#[test]
fn travel_time_times_mean_speed_is_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let v: Vec<f64> = (0..60).map(|_| rng.gen_range(0.5..30.0)).collect();
        let len = rng.gen_range(10.0..2000.0);
        let dt = delta_t(&v, len);
        let mean_adj: f64 = v.windows(2).map(|p| (p[0] + p[1]) / 2.0).sum::<f64>() / 59.0;
        assert_relative_eq!(travel_time(60, dt) * mean_adj, len, max_relative = 1e-9);
    }
}

#[test]
fn smooth_profile_matches_refined_quadrature() {
    // v(t) = 12 + 3 sin(t / 8), a(t) = (3/8) cos(t / 8), over 60 s
    let veh = VehicleParams::default();
    let c = PhysicsConstants::default();
    let total = 60.0;
    let vf = |t: f64| 12.0 + 3.0 * (t / 8.0).sin();
    let af = |t: f64| 3.0 / 8.0 * (t / 8.0).cos();
    let fine = 600;
    let h = total / fine as f64;
    let (mut len, mut w) = (0.0, 0.0);
    let pf = |t: f64| {
        let v = vf(t);
        veh.mass / veh.efficiency * (af(t) * v + veh.rolling_coeff * c.g * v)
            + veh.frontal_area / (2.0 * veh.efficiency) * veh.drag_coeff * c.air_density * v * v * v
    };
    for k in 0..fine {
        let (t0, t1) = (k as f64 * h, (k + 1) as f64 * h);
        len += h * (vf(t0) + vf(t1)) / 2.0;
        w += h * (pf(t0) + pf(t1)) / 2.0;
    }
    let v: Vec<f64> = (0..60).map(|j| vf(total * j as f64 / 59.0)).collect();
    let (e, t, _) = decode(
        &v,
        &veh,
        SegmentGeometry {
            length: len,
            elevation_change: 0.0,
        },
        &c,
        ElevationTerm::GradeRate,
    );
    assert!((e - w).abs() / w < 0.01, "{e} vs {w}");
    assert!((t - total).abs() / total < 0.01);
}

#[test]
fn difference_matrix_matches_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 7, 60] {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = Array2::from_shape_vec((1, n), v.clone()).unwrap().dot(&difference_matrix(n));
        let d = derivative(&v, 1.0);
        for j in 0..n {
            assert_relative_eq!(m[[0, j]], d[j], epsilon = 1e-14);
        }
        let t = Array2::from_shape_vec((1, n), v.clone()).unwrap().dot(&trapezoid_weights(n));
        let s: f64 = v.windows(2).map(|p| p[0] + p[1]).sum();
        assert_relative_eq!(t[[0, 0]], s, epsilon = 1e-12);
    }
}

#[test]
fn graph_decoder_matches_scalar_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for term in [ElevationTerm::GradeRate, ElevationTerm::Literal] {
        let mut m = model(DecoderKind::Physics, 1, 0);
        m.config.elevation_term = term;
        let rows = random_rows(&mut rng, 4, &vocab());
        let veh = VehicleParams {
            mass: 15000.0,
            ..Default::default()
        };
        let batch = SegmentBatch::from_paths(&[PathInput { rows: &rows, vehicle: &veh }], 1);
        let profiles = Array2::from_shape_fn((4, 60), |_| rng.gen_range(2.0..25.0));
        let mut g = Graph::new();
        let v = g.constant(profiles.clone());
        let f = m.physics_graph(&mut g, v, &batch).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let geo = SegmentGeometry {
                length: r.length,
                elevation_change: r.elevation_change,
            };
            let (e, t, j) = decode(&profiles.row(i).to_vec(), &veh, geo, &m.config.constants, term);
            assert_relative_eq!(g.value(f.energy)[[i, 0]] * FUEL_UNIT_J, e, max_relative = 1e-10);
            assert_relative_eq!(g.value(f.time)[[i, 0]], t, max_relative = 1e-12);
            let jsq: f64 = j.iter().map(|x| x * x).sum();
            assert_relative_eq!(g.value(f.jerk_sq.unwrap())[[i, 0]], jsq, max_relative = 1e-10);
        }
    }
}

// ---- encoder oracle ----

fn mat(m: &Model, name: &str) -> Vec<Vec<f64>> {
    let a = m.params.get(name).unwrap();
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    (0..w[0].len()).map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Straight-line single-window encoder.
fn oracle_encode(m: &Model, x: &SubpathTensor) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = x.x.rows().into_iter().map(|r| r.to_vec()).collect();
    let c = &rows[x.center];
    let q = vecmat(c, &mat(m, "enc.m_q"));
    let mk = mat(m, "enc.m_k");
    let mv = mat(m, "enc.m_v");
    let live: Vec<usize> = (0..rows.len()).filter(|&k| x.mask[k]).collect();
    let scores: Vec<f64> = live
        .iter()
        .map(|&k| {
            let key = vecmat(&rows[k], &mk);
            q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() / 58f64.sqrt()
        })
        .collect();
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
    let mut mix = vec![0.0; 58];
    for (s, &k) in scores.iter().zip(&live) {
        let val = vecmat(&rows[k], &mv);
        for d in 0..58 {
            mix[d] += (s - mx).exp() / z * val[d];
        }
    }
    let attn = vecmat(&mix, &mat(m, "enc.m_o"));
    let row = |n: &str| mat(m, n)[0].clone();
    let h1 = layer_norm(&add(c, &attn), &row("enc.ln1.gain"), &row("enc.ln1.bias"));
    let f1: Vec<f64> = add(&vecmat(&h1, &mat(m, "enc.ffn1.w")), &row("enc.ffn1.b"))
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let f2 = add(&vecmat(&f1, &mat(m, "enc.ffn2.w")), &row("enc.ffn2.b"));
    let h2 = layer_norm(&add(&h1, &f2), &row("enc.ln2.gain"), &row("enc.ln2.bias"));
    add(&vecmat(&h2, &mat(m, "head.w")), &row("head.b"))
        .into_iter()
        .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
        .collect()
}

fn window_for(m: &Model, rows: &[SegmentFeatures], w: usize) -> Vec<SubpathTensor> {
    build_subpaths(rows, w, &m.categorical_embedder(&vocab()))
}

fn geo(r: &SegmentFeatures) -> SegmentGeometry {
    SegmentGeometry {
        length: r.length,
        elevation_change: r.elevation_change,
    }
}

#[test]
fn encoder_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = model(DecoderKind::Physics, 2, 4);
    let rows = random_rows(&mut rng, 3, &vocab());
    let veh = VehicleParams::default();
    for (i, t) in window_for(&m, &rows, 2).iter().enumerate() {
        let got = m.predict_segment(t, &veh, geo(&rows[i])).unwrap();
        let want = oracle_encode(&m, t);
        for (a, b) in got.profile.iter().zip(&want) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
        let (e, tt, _) = decode(&want, &veh, geo(&rows[i]), &m.config.constants, ElevationTerm::GradeRate);
        assert_relative_eq!(got.energy_j, e, max_relative = 1e-9);
        assert_relative_eq!(got.time_s, tt, max_relative = 1e-9);
    }
}

#[test]
fn single_key_attention_is_center_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(DecoderKind::Physics, 0, 1);
    let rows = random_rows(&mut rng, 1, &vocab());
    let t = window_for(&m, &rows, 0).remove(0);
    let veh = VehicleParams::default();
    let single = m.predict_segment(&t, &veh, geo(&rows[0])).unwrap();
    // a window of three with both neighbours masked behaves the same
    let mut x3 = Array2::zeros((3, FEATURE_DIM));
    x3.row_mut(1).assign(&t.x.row(0));
    let padded = SubpathTensor {
        x: x3,
        mask: vec![false, true, false],
        center: 1,
    };
    assert_eq!(single.profile, m.predict_segment(&padded, &veh, geo(&rows[0])).unwrap().profile);
    let want = oracle_encode(&m, &padded);
    for (a, b) in single.profile.iter().zip(&want) {
        assert_relative_eq!(*a, *b, max_relative = 1e-10);
    }
}

#[test]
fn padded_rows_do_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = model(DecoderKind::Physics, 2, 5);
    let rows = random_rows(&mut rng, 2, &vocab());
    let veh = VehicleParams::default();
    for (i, t) in window_for(&m, &rows, 2).into_iter().enumerate() {
        let clean = m.predict_segment(&t, &veh, geo(&rows[i])).unwrap();
        for _ in 0..20 {
            let mut fuzzed = t.clone();
            for (k, live) in t.mask.iter().enumerate() {
                if !live {
                    fuzzed.x.row_mut(k).mapv_inplace(|_| rng.gen_range(-1e3..1e3));
                }
            }
            let got = m.predict_segment(&fuzzed, &veh, geo(&rows[i])).unwrap();
            assert_eq!(got, clean);
        }
    }
}

#[test]
fn profiles_are_strictly_positive() {
    let m = model(DecoderKind::Physics, 0, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let x = Array2::from_shape_fn((n, FEATURE_DIM), |_| rng.gen_range(-3.0..3.0));
    let batch = SegmentBatch {
        rows: BatchRows::Dense(x),
        centers: None,
        index: (0..n).map(Some).collect(),
        width: 1,
        geometry: vec![
            SegmentGeometry {
                length: 100.0,
                elevation_change: 0.0
            };
            n
        ],
        vehicles: vec![VehicleParams::default(); n],
        path: (0..n).collect(),
        n_paths: n,
    };
    let mut g = Graph::new();
    let bound = m.params.bind(&mut g, false);
    let f = m.forward(&mut g, &bound, &batch).unwrap();
    assert!(g.value(f.profile).iter().all(|&v| v > 0.0));
    assert!(g.value(f.time).iter().all(|&v| v > 0.0));
}

#[test]
fn initial_speed_is_near_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = model(DecoderKind::Physics, 1, 7);
    let rows = random_rows(&mut rng, 5, &vocab());
    let p = m
        .predict_paths(&[PathInput {
            rows: &rows,
            vehicle: &VehicleParams::default(),
        }])
        .unwrap();
    for ((_, t), r) in p[0].segments.iter().zip(&rows) {
        let speed = r.length / t;
        assert!((2.0..40.0).contains(&speed), "{speed}");
    }
}

// ---- prediction contracts ----

#[test]
fn single_segment_path_equals_segment_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for window in [0, 1, 2] {
        let m = model(DecoderKind::Physics, window, 8);
        let rows = random_rows(&mut rng, 1, &vocab());
        let veh = VehicleParams::default();
        let t = &window_for(&m, &rows, window)[0];
        let seg = m.predict_segment(t, &veh, geo(&rows[0])).unwrap();
        let path = m.predict_paths(&[PathInput { rows: &rows, vehicle: &veh }]).unwrap();
        assert_relative_eq!(path[0].energy_j, seg.energy_j, max_relative = 1e-12);
        assert_relative_eq!(path[0].time_s, seg.time_s, max_relative = 1e-12);
    }
}

#[test]
fn path_segments_match_windowed_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = model(DecoderKind::Physics, 1, 9);
    let rows = random_rows(&mut rng, 6, &vocab());
    let veh = VehicleParams::default();
    let path = m.predict_paths(&[PathInput { rows: &rows, vehicle: &veh }]).unwrap();
    let mut total = 0.0;
    for (i, t) in window_for(&m, &rows, 1).iter().enumerate() {
        let s = m.predict_segment(t, &veh, geo(&rows[i])).unwrap();
        assert_relative_eq!(path[0].segments[i].0, s.energy_j, max_relative = 1e-10);
        total += s.energy_j;
    }
    assert_relative_eq!(path[0].energy_j, total, max_relative = 1e-10);
}

#[test]
fn batch_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = model(DecoderKind::Physics, 1, 10);
    let a = random_rows(&mut rng, 4, &vocab());
    let b = random_rows(&mut rng, 7, &vocab());
    let va = VehicleParams::default();
    let vb = VehicleParams {
        mass: 30000.0,
        ..va
    };
    let pa = PathInput { rows: &a, vehicle: &va };
    let pb = PathInput { rows: &b, vehicle: &vb };
    let ab = m.predict_paths(&[pa, pb]).unwrap();
    let ba = m.predict_paths(&[pb, pa]).unwrap();
    assert_relative_eq!(ab[0].energy_j, ba[1].energy_j, max_relative = 1e-12);
    assert_relative_eq!(ab[1].time_s, ba[0].time_s, max_relative = 1e-12);
}

#[test]
fn identical_segments_scale_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = model(DecoderKind::Physics, 0, 11);
    let one = random_rows(&mut rng, 1, &vocab());
    let k = 5;
    let many: Vec<SegmentFeatures> = std::iter::repeat(one[0].clone()).take(k).collect();
    let veh = VehicleParams::default();
    let p1 = m.predict_paths(&[PathInput { rows: &one, vehicle: &veh }]).unwrap();
    let pk = m.predict_paths(&[PathInput { rows: &many, vehicle: &veh }]).unwrap();
    assert_relative_eq!(pk[0].energy_j, k as f64 * p1[0].energy_j, max_relative = 1e-12);
}

#[test]
fn zero_window_ignores_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = model(DecoderKind::Physics, 0, 12);
    let rows = random_rows(&mut rng, 3, &vocab());
    let veh = VehicleParams::default();
    let base = m.predict_paths(&[PathInput { rows: &rows, vehicle: &veh }]).unwrap();
    let mut other = random_rows(&mut rng, 3, &vocab());
    other[1] = rows[1].clone();
    let moved = m.predict_paths(&[PathInput { rows: &other, vehicle: &veh }]).unwrap();
    assert_eq!(base[0].segments[1], moved[0].segments[1]);

    let m1 = model(DecoderKind::Physics, 1, 12);
    let a = m1.predict_paths(&[PathInput { rows: &rows, vehicle: &veh }]).unwrap();
    let b = m1.predict_paths(&[PathInput { rows: &other, vehicle: &veh }]).unwrap();
    assert_ne!(a[0].segments[1], b[0].segments[1]);
}

#[test]
fn energy_is_affine_in_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m = model(DecoderKind::Physics, 1, 13);
    let rows = random_rows(&mut rng, 1, &vocab());
    let t = &window_for(&m, &rows, 1)[0];
    let at = |mass: f64| {
        let veh = VehicleParams {
            mass,
            ..Default::default()
        };
        m.predict_segment(t, &veh, geo(&rows[0])).unwrap().energy_j
    };
    let (w1, w2, w3) = (at(10000.0), at(20000.0), at(35000.0));
    let slope = (w2 - w1) / 10000.0;
    assert_relative_eq!(w3, w1 + slope * 25000.0, max_relative = 1e-9);
}

#[test]
fn predictions_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let rows = random_rows(&mut rng, 4, &vocab());
    let veh = VehicleParams::default();
    let a = model(DecoderKind::Physics, 1, 77)
        .predict_paths(&[PathInput { rows: &rows, vehicle: &veh }])
        .unwrap();
    let b = model(DecoderKind::Physics, 1, 77)
        .predict_paths(&[PathInput { rows: &rows, vehicle: &veh }])
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn linear_decoder_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = model(DecoderKind::Linear, 1, 14);
    assert!(m.params.get("fc.w").is_some());
    let rows = random_rows(&mut rng, 3, &vocab());
    let t = &window_for(&m, &rows, 1)[1];
    let s = m.predict_segment(t, &VehicleParams::default(), geo(&rows[1])).unwrap();
    assert!(s.jerk.is_empty());
    assert!(s.energy_j.is_finite() && s.time_s.is_finite());
}

// ---- gradients ----

/// Energy of segment 0 plus time of segment 1, as a function of parameters.
fn probe_loss(m: &Model, batch: &SegmentBatch, trainable: bool) -> (f64, Graph, Vec<Var>) {
    let mut g = Graph::new();
    let bound = m.params.bind(&mut g, trainable);
    let f = m.forward(&mut g, &bound, batch).unwrap();
    let e = g.sum(f.energy);
    let t = g.sum(f.time);
    let t = g.scale(t, 0.01);
    let l = g.add(e, t).unwrap();
    let v = g.scalar_value(l);
    if trainable {
        g.backward(l).unwrap();
    }
    (v, g, bound)
}

#[test]
fn energy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for decoder in [DecoderKind::Physics, DecoderKind::Linear] {
        let m = model(decoder, 1, 15);
        let rows = random_rows(&mut rng, 3, &vocab());
        let veh = VehicleParams::default();
        let batch = SegmentBatch::from_paths(&[PathInput { rows: &rows, vehicle: &veh }], 1);
        let (_, g, bound) = probe_loss(&m, &batch, true);
        let grads = m.params.grads(&g, &bound);
        for slot in 0..m.params.len() {
            let name = m.params.name(slot).to_string();
            let dir = m.params.value(slot).mapv(|_| rng.gen_range(-1.0..1.0));
            let analytic: f64 = (&grads[slot] * &dir).sum();
            let eps = 1e-4;
            let mut plus = m.clone();
            *plus.params.value_mut(slot) = m.params.value(slot) + &(&dir * eps);
            let mut minus = m.clone();
            *minus.params.value_mut(slot) = m.params.value(slot) - &(&dir * eps);
            let numeric = (probe_loss(&plus, &batch, false).0 - probe_loss(&minus, &batch, false).0) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{decoder:?} {name}: analytic {analytic} numeric {numeric}");
        }
    }
}

// ---- artifact ----

#[test]
fn artifact_round_trip() {
    use crate::embedding::EmbeddingTable;
    use crate::features::NormStats;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let m = model(DecoderKind::Linear, 2, 16);
    let ids = vec![SegmentId(0), SegmentId(1)];
    let vecs = (0..2).map(|_| (0..EMBEDDING_DIM).map(|_| rng.gen()).collect()).collect();
    let art = ModelArtifact {
        model: m,
        stats: NormStats {
            mean: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            sd: [0.5; 6],
        },
        vocab: vocab(),
        embeddings: EmbeddingTable::new(EMBEDDING_DIM, ids, vecs).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    art.save(dir.path()).unwrap();
    let back = ModelArtifact::load(dir.path()).unwrap();
    assert_eq!(back.model, art.model);
    assert_eq!(back.stats, art.stats);
    assert_eq!(back.vocab, art.vocab);
    assert_eq!(back.embeddings.vectors, art.embeddings.vectors);
    let text = std::fs::read_to_string(dir.path().join("model.toml")).unwrap();
    assert!(text.contains("window = 2"));
    std::fs::write(dir.path().join("model.toml"), "window = 1\nbogus = 3\n").unwrap();
    assert!(ModelArtifact::load(dir.path()).is_err());
}

#[test]
fn wrong_shapes_are_rejected() {
    let m = model(DecoderKind::Physics, 1, 17);
    let mut p = m.params.clone();
    *p.value_mut(p.slot("head.w").unwrap()) = Array2::zeros((58, 30));
    assert!(matches!(Model::from_params(m.config, p), Err(ModelError::Artifact(_))));
    let cfg = ModelConfig {
        profile_len: 1,
        ..Default::default()
    };
    assert!(Model::new(cfg, &vocab(), 0).is_err());
}
