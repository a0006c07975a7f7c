use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::datagen::{gen_network, gen_trips, make_split, DatagenConfig};
use crate::embedding::{embed_network, WalkConfig};

fn sample(cat: u32, raw: [f64; 6], length: f64, fuel: f64) -> LookupSample {
    LookupSample {
        categorical: [cat, 0, 0, 1, 0, 2, 3],
        raw,
        length,
        fuel_units: fuel,
    }
}

const RAW: [f64; 6] = [23257.71, 52.0, 410.0, 10.0, 100.0, 3.0];

#[test]
fn bin_index_of_mass() {
    let k = BinKey::new([0; 7], &RAW);
    assert_eq!(k.numeric, [2, 5, 4, 0, 2, 0]);
    assert_eq!(BinKey::new([0; 7], &[0.0, 0.0, 0.0, 0.0, 0.0, -3.0]).numeric[5], -1);
}

#[test]
fn bin_rates_are_means_per_metre() {
    let one = LookupTable::build(&[sample(0, RAW, 400.0, 20.0)]);
    assert_eq!(one.len(), 1);
    assert_relative_eq!(one.bins.values().next().unwrap().rate, 0.05);
    let two = LookupTable::build(&[sample(0, RAW, 100.0, 10.0), sample(0, RAW, 100.0, 30.0)]);
    let b = two.bins.values().next().unwrap();
    assert_eq!(b.count, 2);
    assert_relative_eq!(b.rate, 0.2, epsilon = 1e-15);
}

#[test]
fn exact_hit_and_single_bin_miss() {
    let table = LookupTable::build(&[sample(0, RAW, 100.0, 10.0)]);
    let hit = sample(0, RAW, 450.0, 0.0);
    assert_relative_eq!(table.predict(&[hit]).unwrap(), 45.0, epsilon = 1e-12);
    let far = sample(3, [90000.0, 110.0, 1500.0, 180.0, 350.0, -15.0], 200.0, 0.0);
    assert_relative_eq!(table.predict(&[far]).unwrap(), 20.0, epsilon = 1e-12);
    assert_eq!(LookupTable::default().predict(&[far]), None);
}

#[test]
fn equidistant_bins_resolve_to_lowest_key() {
    let mut lo = RAW;
    lo[1] = 40.0;
    let mut hi = RAW;
    hi[1] = 60.0;
    let table = LookupTable::build(&[sample(0, hi, 100.0, 30.0), sample(0, lo, 100.0, 10.0)]);
    // speed bin 5 sits between bins 4 and 6
    assert_relative_eq!(table.rate(&BinKey::new(sample(0, RAW, 1.0, 0.0).categorical, &RAW)).unwrap(), 0.1);
}

#[test]
fn categorical_match_wins_over_numeric_distance() {
    let mut far = RAW;
    far[0] = 95000.0;
    let table = LookupTable::build(&[sample(0, far, 100.0, 10.0), sample(1, RAW, 100.0, 30.0)]);
    let q = sample(0, RAW, 100.0, 0.0);
    assert_relative_eq!(table.predict(&[q]).unwrap(), 10.0, epsilon = 1e-12);
    let q = sample(2, RAW, 100.0, 0.0);
    assert_relative_eq!(table.predict(&[q]).unwrap(), 30.0, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn lookup_is_scale_consistent(len in 100.0f64..199.0, fuel in -5.0f64..50.0, speed in 0.0f64..120.0) {
        let mut raw = RAW;
        raw[1] = speed;
        let table = LookupTable::build(&[sample(0, raw, len, fuel)]);
        let q = sample(0, raw, len, 0.0);
        let q2 = LookupSample { length: 2.0 * len, ..q };
        let (a, b) = (table.predict(&[q]).unwrap(), table.predict(&[q2]).unwrap());
        prop_assert!((b - 2.0 * a).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn report_aggregates_recompute(values in proptest::collection::vec(0.0f64..100.0, 1..12)) {
        let mut r = EvalReport::default();
        for (k, v) in values.iter().enumerate() {
            r.push("m", k, &[(20, Some(*v))]);
        }
        let row = &r.rows()[0];
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        prop_assert!((row.mape_mean.unwrap() - mean).abs() <= 1e-12);
        prop_assert!((row.mape_sd.unwrap() - sd).abs() <= 1e-12);
        prop_assert_eq!(row.n_repeats, values.len());
    }
}

#[test]
fn perfect_and_biased_predictors() {
    let truth = vec![3.0, 7.5, 120.0];
    let over: Vec<f64> = truth.iter().map(|t| 1.1 * t).collect();
    let buckets = vec![(1, truth.clone(), truth.clone()), (10, over, truth.clone())];
    let r = evaluate(&buckets);
    assert_eq!(r[0], (1, Some(0.0)));
    assert_relative_eq!(r[1].1.unwrap(), 10.0, epsilon = 1e-12);
    assert_eq!(evaluate(&[(200, vec![], vec![])]), vec![(200, None)]);
}

#[test]
fn report_csv_layout() {
    let mut r = EvalReport::default();
    r.push("ecotoll", 0, &[(1, Some(10.0)), (200, None)]);
    r.push("ecotoll", 1, &[(1, Some(14.0)), (200, None)]);
    r.push("lookup", 0, &[(1, Some(5.0))]);
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,path_len,mape_mean,mape_sd,n_repeats");
    assert_eq!(lines[1], format!("ecotoll,1,12.0,{:?},2", 8f64.sqrt()));
    assert_eq!(lines[2], "ecotoll,200,n/a,n/a,0");
    assert_eq!(lines[3], "lookup,1,5.0,0.0,1");
    assert!(!r.partial());
    r.failures.push(Failure {
        method: "lookup".into(),
        repeat: 1,
        error: "boom".into(),
    });
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    assert_eq!(EvalReport::load(dir.path()).unwrap(), r);
    assert!(std::fs::read_to_string(dir.path().join("report.json")).unwrap().contains("\"partial\": true"));
}

#[test]
fn sweep_configs() {
    let base = ExperimentConfig::default();
    let s = Sweep {
        kind: SweepKind::EnergyWeight,
        values: vec![1.0],
    };
    let c = s.apply(&base, 1.0).unwrap();
    assert_eq!((c.loss.energy, c.loss.time), (1.0, 0.0));
    assert_eq!(c.methods, vec![Method::Ecotoll]);
    assert!(s.apply(&base, 1.5).is_err());
    let w = Sweep {
        kind: SweepKind::Window,
        values: vec![],
    };
    assert_eq!(w.apply(&base, 2.0).unwrap().model.window, 2);
    assert!(w.apply(&base, 0.5).is_err());
    let j = Sweep {
        kind: SweepKind::Jerk,
        values: vec![],
    };
    assert_eq!(j.apply(&base, 0.0).unwrap().loss.jerk, 0.0);
}

#[test]
fn experiment_config_rejects_unknown_keys() {
    assert!(toml::from_str::<ExperimentConfig>("repeats = 2\nbogus = 1").is_err());
    let c: ExperimentConfig = toml::from_str("repeats = 2\nmethods = [\"lookup\"]\n[train]\nmax_epochs = 3").unwrap();
    assert_eq!(c.repeats, 2);
    assert_eq!(c.train.max_epochs, 3);
    assert_eq!(c.methods, vec![Method::Lookup]);
}

fn tiny_corpus() -> (RoadNetwork, EmbeddingTable, Vec<TripRecord>, SplitPlan) {
    let dcfg = DatagenConfig {
        rows: 4,
        cols: 4,
        n_trips: 20,
        trip_len_short: (10, 25),
        trip_len_long: (30, 35),
        ..Default::default()
    };
    let net = gen_network(&dcfg).unwrap();
    let trips: Vec<TripRecord> = gen_trips(&net, &dcfg).unwrap().into_iter().map(|t| t.record).collect();
    let emb = embed_network(
        &net,
        &WalkConfig {
            walks_per_node: 2,
            epochs: 1,
            ..Default::default()
        },
    )
    .unwrap()
    .table;
    let plan = make_split(&trips, 5, 2).unwrap();
    (net, emb, trips, plan)
}

use crate::datagen::{SplitPlan, TripRecord};
use crate::embedding::EmbeddingTable;
use crate::network::RoadNetwork;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        query_len: 5,
        query_step: 5,
        test_lengths: vec![1, 5, 500],
        repeats: 1,
        train: crate::training::TrainConfig {
            max_epochs: 2,
            batch_size: 16,
            learning_rate: 1e-3,
            energy_label_fraction: 0.5,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn experiment_end_to_end_is_reproducible() {
    let (net, emb, trips, plan) = tiny_corpus();
    let corpus = Corpus {
        network: &net,
        embeddings: Some(&emb),
        trips: &trips,
        plan: &plan,
    };
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&corpus, &cfg, Some(a.path())).unwrap();
    let rb = run_experiment(&corpus, &cfg, Some(b.path())).unwrap();
    assert_eq!(ra, rb);
    assert!(!ra.partial(), "{:?}", ra.failures);
    let rows = ra.rows();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().filter(|r| r.path_len == 500).all(|r| r.mape_mean.is_none()));
    assert!(rows.iter().filter(|r| r.path_len == 5).all(|r| r.mape_mean.unwrap().is_finite()));
    for f in [
        "report.csv",
        "report.json",
        "logs/ecotoll_r0.csv",
        "logs/encoder_fc_r0.csv",
        "models/ecotoll_r0/checkpoint.txt",
        "models/encoder_fc_r0/checkpoint.txt",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let artifact = crate::model::ModelArtifact::load(&a.path().join("models/ecotoll_r0")).unwrap();
    assert_eq!(artifact.model.config.decoder, crate::model::DecoderKind::Physics);
    // the saved model scores the same on the test set as during the run
    let again = evaluate_artifact(&corpus, &artifact, &cfg.test_lengths).unwrap();
    for (len, m) in again {
        let stored = ra.values("ecotoll", len);
        match m {
            Some(m) => assert_relative_eq!(m, stored[0].1, max_relative = 1e-12),
            None => assert!(stored.is_empty()),
        }
    }
}

#[test]
fn repeat_data_respects_the_split() {
    let (net, emb, trips, plan) = tiny_corpus();
    let corpus = Corpus {
        network: &net,
        embeddings: Some(&emb),
        trips: &trips,
        plan: &plan,
    };
    let cfg = tiny_config();
    let d = prepare_repeat(&corpus, 0, &cfg).unwrap();
    let split = &plan.repeats[0];
    let labelled = split.labelled(0.5);
    let n_labelled_train = split.train.iter().filter(|id| labelled.contains(id)).count();
    let segs: usize = trips
        .iter()
        .filter(|t| split.train.contains(&t.trip_id) && labelled.contains(&t.trip_id))
        .map(|t| t.path.len())
        .sum();
    assert!(n_labelled_train > 0);
    assert_eq!(d.lookup_train.len(), segs);
    assert!(d.train.iter().any(|e| e.seg_energy.is_none()));
    assert!(d.train.iter().any(|e| e.seg_energy.is_some()));
    let ones = &d.test.iter().find(|t| t.0 == 1).unwrap().1;
    let test_segs: usize = trips
        .iter()
        .filter(|t| plan.test.contains(&t.trip_id))
        .map(|t| t.path.len())
        .sum();
    assert_eq!(ones.len(), test_segs);
    assert!(ones.iter().all(|e| e.seg_energy.is_some()));
    assert!(prepare_repeat(&corpus, 5, &cfg).is_err());
}

#[test]
fn sweep_writes_long_format() {
    let (net, emb, trips, plan) = tiny_corpus();
    let corpus = Corpus {
        network: &net,
        embeddings: Some(&emb),
        trips: &trips,
        plan: &plan,
    };
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 1;
    cfg.test_lengths = vec![5];
    let dir = tempfile::tempdir().unwrap();
    let sweep = Sweep {
        kind: SweepKind::Jerk,
        values: vec![0.0, 1e-6],
    };
    let out = run_sweep(&corpus, &cfg, &sweep, Some(dir.path())).unwrap();
    assert_eq!(out.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("sweep_jerk.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sweep,value,method,path_len,repeat,mape");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("jerk,0.0,ecotoll,5,0,"));
    assert!(dir.path().join("jerk_1e-6/logs/ecotoll_r0.csv").exists());
}

#[test]
fn lookup_runs_without_embeddings() {
    let (net, _, trips, plan) = tiny_corpus();
    let corpus = Corpus {
        network: &net,
        embeddings: None,
        trips: &trips,
        plan: &plan,
    };
    let mut cfg = tiny_config();
    cfg.repeats = 2;
    cfg.methods = vec![Method::Lookup];
    let r = run_experiment(&corpus, &cfg, None).unwrap();
    assert_eq!(r.rows().len(), 3);
    assert_eq!(r.rows()[1].n_repeats, 2);
    cfg.methods = vec![Method::Ecotoll];
    assert!(matches!(run_experiment(&corpus, &cfg, None), Err(EvalError::Config(_))));
}
