use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ecotoll::datagen::{
    gen_network, gen_trips, load_trips, make_split, save_profiles, save_trips, SplitPlan, TripRecord, REPEATS,
};
use ecotoll::embedding::{embed_network, load_embeddings, save_embeddings, EmbeddingTable};
use ecotoll::evaluation::{
    evaluate_artifact, fit_model, prepare_repeat, run_experiment, run_sweep, Corpus, EvalReport, Method, Sweep,
    SweepKind,
};
use ecotoll::features::QuerySpec;
use ecotoll::model::{DecoderKind, ModelArtifact, PathInput, FUEL_UNIT_J};
use ecotoll::network::{load_network, save_network, RoadNetwork};
use ecotoll::training::write_log;
use log::{info, warn};
use serde::Serialize;

use crate::config::{RunConfig, RunManifest};
use crate::error::CliError;
use crate::{Cli, Command, Decoder, SweepArg};

const NETWORK_DIR: &str = "network";
const TRIPS: &str = "trips.jsonl";
const SPLIT: &str = "split.json";

struct DataSet {
    network: RoadNetwork,
    trips: Vec<TripRecord>,
    plan: SplitPlan,
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} not found", path.display())))
    }
}

fn load_data(dir: &Path) -> Result<DataSet, CliError> {
    for p in [NETWORK_DIR, TRIPS, SPLIT] {
        require(&dir.join(p))?;
    }
    let network = load_network(&dir.join(NETWORK_DIR))?;
    let trips = load_trips(&dir.join(TRIPS))?;
    let plan = SplitPlan::load(&dir.join(SPLIT))?;
    Ok(DataSet { network, trips, plan })
}

fn load_table(path: &Path) -> Result<EmbeddingTable, CliError> {
    require(path)?;
    Ok(load_embeddings(path)?)
}

fn load_artifact(dir: &Path) -> Result<ModelArtifact, CliError> {
    require(dir)?;
    Ok(ModelArtifact::load(dir)?)
}

fn corpus<'a>(d: &'a DataSet, embeddings: Option<&'a EmbeddingTable>) -> Corpus<'a> {
    Corpus {
        network: &d.network,
        embeddings,
        trips: &d.trips,
        plan: &d.plan,
    }
}

fn path_input(name: &str, p: &Path) -> (String, String) {
    (name.to_string(), p.display().to_string())
}

fn method_of(decoder: DecoderKind) -> Method {
    match decoder {
        DecoderKind::Physics => Method::Ecotoll,
        DecoderKind::Linear => Method::EncoderFc,
    }
}

fn check_repeats(cfg: &mut RunConfig, repeats: Option<usize>, plan: &SplitPlan) -> Result<(), CliError> {
    if let Some(r) = repeats {
        cfg.experiment.repeats = r;
    }
    if cfg.experiment.repeats > plan.repeats.len() {
        return Err(CliError::Config(format!(
            "{} repeats requested but the split plan has {}",
            cfg.experiment.repeats,
            plan.repeats.len()
        )));
    }
    Ok(())
}

pub fn run(cli: &Cli, mut cfg: RunConfig) -> Result<PathBuf, CliError> {
    let manifest = |command: &'static str, inputs: Vec<(String, String)>, cfg: &RunConfig| {
        RunManifest { command, inputs, config: cfg }.create_dir(&cli.out)
    };
    match &cli.command {
        Command::GenData(a) => {
            if let Some(v) = a.rows {
                cfg.data.rows = v;
            }
            if let Some(v) = a.cols {
                cfg.data.cols = v;
            }
            if let Some(v) = a.trips {
                cfg.data.n_trips = v;
            }
            cfg.data.validate()?;
            let inputs = vec![("profiles".to_string(), a.profiles.to_string())];
            let dir = manifest("gen-data", inputs, &cfg)?;
            let net = gen_network(&cfg.data)?;
            save_network(&net, &dir.join(NETWORK_DIR))?;
            let sims = gen_trips(&net, &cfg.data)?;
            let records: Vec<TripRecord> = sims.iter().map(|t| t.record.clone()).collect();
            save_trips(&records, &dir.join(TRIPS))?;
            make_split(&records, cfg.data.seed, REPEATS)?.save(&dir.join(SPLIT))?;
            if a.profiles {
                save_profiles(&sims, &dir.join("profiles.jsonl"))?;
            }
            info!("{} segments, {} trips", net.len(), records.len());
            Ok(dir)
        }
        Command::Embed(a) => {
            let net_dir = a.data.join(NETWORK_DIR);
            require(&net_dir)?;
            let net = load_network(&net_dir)?;
            let dir = manifest("embed", vec![path_input("data", &a.data)], &cfg)?;
            let run = embed_network(&net, &cfg.embedding)?;
            save_embeddings(&run.table, &dir.join("embeddings.csv"))?;
            let mut log = String::from("epoch,loss\n");
            for (k, l) in run.epoch_losses.iter().enumerate() {
                let _ = writeln!(log, "{},{l:?}", k + 1);
            }
            fs::write(dir.join("embedding_log.csv"), log)?;
            Ok(dir)
        }
        Command::Train(a) => {
            if let Some(v) = a.max_epochs {
                cfg.experiment.train.max_epochs = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.experiment.train.learning_rate = v;
            }
            if let Some(v) = a.label_fraction {
                cfg.experiment.train.energy_label_fraction = v;
            }
            let method = match a.decoder {
                Decoder::Physics => Method::Ecotoll,
                Decoder::Linear => Method::EncoderFc,
            };
            cfg.experiment.methods = vec![method];
            cfg.experiment.validate()?;
            let data = load_data(&a.data)?;
            let table = load_table(&a.embeddings)?;
            let inputs = vec![
                path_input("data", &a.data),
                path_input("embeddings", &a.embeddings),
                ("repeat".into(), a.repeat.to_string()),
                ("method".into(), method.name().into()),
            ];
            let dir = manifest("train", inputs, &cfg)?;
            let c = corpus(&data, Some(&table));
            let repeat = prepare_repeat(&c, a.repeat, &cfg.experiment)?;
            let outcome = fit_model(&repeat, method, &cfg.experiment)?;
            write_log(&outcome.log, &dir.join("train_log.csv"))?;
            ModelArtifact {
                model: outcome.model,
                stats: repeat.stats,
                vocab: repeat.vocab,
                embeddings: table,
            }
            .save(&dir.join("model"))?;
            Ok(dir)
        }
        Command::Evaluate(a) => {
            let artifact = load_artifact(&a.model)?;
            let data = load_data(&a.data)?;
            cfg.experiment.validate()?;
            let inputs = vec![path_input("data", &a.data), path_input("model", &a.model)];
            let dir = manifest("evaluate", inputs, &cfg)?;
            let mapes = evaluate_artifact(&corpus(&data, None), &artifact, &cfg.experiment.test_lengths)?;
            let mut report = EvalReport::default();
            report.push(method_of(artifact.model.config.decoder).name(), 0, &mapes);
            report.save(&dir)?;
            Ok(dir)
        }
        Command::Experiment(a) => {
            let data = load_data(&a.data)?;
            check_repeats(&mut cfg, a.repeats, &data.plan)?;
            cfg.experiment.validate()?;
            let table = load_table(&a.embeddings)?;
            let inputs = vec![path_input("data", &a.data), path_input("embeddings", &a.embeddings)];
            let dir = manifest("experiment", inputs, &cfg)?;
            let report = run_experiment(&corpus(&data, Some(&table)), &cfg.experiment, Some(&dir))?;
            if report.partial() {
                warn!("{} method/repeat runs failed; report is partial", report.failures.len());
            }
            Ok(dir)
        }
        Command::Predict(a) => {
            let artifact = load_artifact(&a.model)?;
            require(&a.network)?;
            let net = load_network(&a.network)?;
            require(&a.queries)?;
            let text = fs::read_to_string(&a.queries)?;
            let mut queries = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let q: QuerySpec = serde_json::from_str(line)
                    .map_err(|e| CliError::Data(format!("{} line {}: {e}", a.queries.display(), i + 1)))?;
                queries.push(q);
            }
            let inputs = vec![
                path_input("model", &a.model),
                path_input("network", &a.network),
                path_input("queries", &a.queries),
            ];
            let dir = manifest("predict", inputs, &cfg)?;
            let out = predict(&artifact, &net, &queries)?;
            fs::write(dir.join("predictions.jsonl"), out)?;
            Ok(dir)
        }
        Command::Baseline(a) => {
            let data = load_data(&a.data)?;
            check_repeats(&mut cfg, a.repeats, &data.plan)?;
            cfg.experiment.methods = vec![Method::Lookup];
            cfg.experiment.validate()?;
            let dir = manifest("baseline", vec![path_input("data", &a.data)], &cfg)?;
            run_experiment(&corpus(&data, None), &cfg.experiment, Some(&dir))?;
            Ok(dir)
        }
        Command::Sweep(a) => {
            let data = load_data(&a.data)?;
            check_repeats(&mut cfg, a.repeats, &data.plan)?;
            cfg.experiment.validate()?;
            let sweep = Sweep {
                kind: match a.kind {
                    SweepArg::Jerk => SweepKind::Jerk,
                    SweepArg::EnergyWeight => SweepKind::EnergyWeight,
                    SweepArg::Window => SweepKind::Window,
                },
                values: a.values.clone(),
            };
            for v in &sweep.values {
                sweep.apply(&cfg.experiment, *v)?;
            }
            let table = load_table(&a.embeddings)?;
            let values: Vec<String> = a.values.iter().map(|v| format!("{v:?}")).collect();
            let inputs = vec![
                path_input("data", &a.data),
                path_input("embeddings", &a.embeddings),
                ("kind".into(), sweep.kind.name().into()),
                ("values".into(), values.join(",")),
            ];
            let dir = manifest("sweep", inputs, &cfg)?;
            run_sweep(&corpus(&data, Some(&table)), &cfg.experiment, &sweep, Some(&dir))?;
            Ok(dir)
        }
    }
}

#[derive(Serialize)]
struct SegmentOut {
    segment: u32,
    energy_units: f64,
    time_s: f64,
}

#[derive(Serialize)]
struct PredictionOut {
    query: usize,
    energy_units: f64,
    energy_j: f64,
    time_s: f64,
    segments: Vec<SegmentOut>,
}

/// One JSON line per query.
fn predict(artifact: &ModelArtifact, net: &RoadNetwork, queries: &[QuerySpec]) -> Result<String, CliError> {
    let f = artifact.featurizer(net);
    let rows = queries
        .iter()
        .enumerate()
        .map(|(i, q)| f.segment_rows(q).map_err(|e| CliError::Data(format!("query {}: {e}", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<PathInput<'_>> = rows
        .iter()
        .zip(queries)
        .map(|(r, q)| PathInput {
            rows: r,
            vehicle: &q.vehicle,
        })
        .collect();
    let mut out = String::new();
    for (i, (p, q)) in artifact.model.predict_paths(&inputs)?.into_iter().zip(queries).enumerate() {
        let line = PredictionOut {
            query: i,
            energy_units: p.energy_j / FUEL_UNIT_J,
            energy_j: p.energy_j,
            time_s: p.time_s,
            segments: p
                .segments
                .iter()
                .zip(&q.path)
                .map(|((e, t), id)| SegmentOut {
                    segment: id.0,
                    energy_units: e / FUEL_UNIT_J,
                    time_s: *t,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
