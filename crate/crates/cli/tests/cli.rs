use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.rows=4",
    "--set",
    "data.cols=4",
    "--set",
    "data.n_trips=24",
    "--set",
    "data.trip_len_short=[10,25]",
    "--set",
    "data.trip_len_long=[25,30]",
    "--set",
    "embedding.walks_per_node=2",
    "--set",
    "embedding.epochs=1",
    "--set",
    "experiment.query_len=5",
    "--set",
    "experiment.test_lengths=[1,5]",
    "--set",
    "experiment.train.max_epochs=2",
    "--set",
    "experiment.train.batch_size=16",
    "--set",
    "experiment.train.energy_label_fraction=0.5",
];

fn ecotoll(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecotoll"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> PathBuf {
    let o = ecotoll(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn code(out: &Path, args: &[&str]) -> i32 {
    ecotoll(out, args).status.code().unwrap()
}

struct Pipeline {
    data: PathBuf,
    embeddings: PathBuf,
    model: PathBuf,
}

fn pipeline(out: &Path) -> Pipeline {
    let data = ok(out, &["gen-data"]);
    let emb_dir = ok(out, &["embed", "--data", data.to_str().unwrap()]);
    let embeddings = emb_dir.join("embeddings.csv");
    let train = ok(
        out,
        &["train", "--data", data.to_str().unwrap(), "--embeddings", embeddings.to_str().unwrap()],
    );
    Pipeline {
        data,
        embeddings,
        model: train.join("model"),
    }
}

#[test]
fn gen_data_writes_the_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let data = ok(tmp.path(), &["gen-data", "--profiles"]);
    assert!(data.file_name().unwrap().to_str().unwrap().starts_with("gen-data-"));
    for f in ["network/nodes.csv", "network/segments.csv", "trips.jsonl", "split.json", "profiles.jsonl", "run.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(data.join("trips.jsonl")).unwrap().lines().count(), 24);
    let run = fs::read_to_string(data.join("run.toml")).unwrap();
    assert!(run.contains("command = \"gen-data\""));
    assert!(run.contains("n_trips = 24"));
    // flags win over --set
    let d2 = ok(tmp.path(), &["gen-data", "--trips", "12"]);
    assert_eq!(fs::read_to_string(d2.join("trips.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn full_pipeline_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    assert!(p.model.join("checkpoint.txt").exists());
    assert!(p.model.parent().unwrap().join("train_log.csv").exists());

    let eval = ok(
        tmp.path(),
        &["evaluate", "--data", p.data.to_str().unwrap(), "--model", p.model.to_str().unwrap()],
    );
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,path_len,mape_mean,mape_sd,n_repeats\necotoll,1,"));

    let seg: u32 = {
        let trips = fs::read_to_string(p.data.join("trips.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(trips.lines().next().unwrap()).unwrap();
        first["path"][0].as_u64().unwrap() as u32
    };
    let q = tmp.path().join("q.jsonl");
    fs::write(
        &q,
        format!(
            "{{\"path\": [{seg}], \"departure\": {{\"day\": 2, \"slot\": 2}}, \"vehicle\": {{\"mass\": 23257.71, \"frontal_area\": 10.5, \"drag_coeff\": 0.6, \"efficiency\": 0.56, \"rolling_coeff\": 0.006}}}}\n"
        ),
    )
    .unwrap();
    let pred = ok(
        tmp.path(),
        &[
            "predict",
            "--model",
            p.model.to_str().unwrap(),
            "--network",
            p.data.join("network").to_str().unwrap(),
            "--queries",
            q.to_str().unwrap(),
        ],
    );
    let line = fs::read_to_string(pred.join("predictions.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["energy_units"].as_f64().unwrap().is_finite());
    assert!(v["time_s"].as_f64().unwrap() > 0.0);
    assert_eq!(v["segments"].as_array().unwrap().len(), 1);

    let base = ok(tmp.path(), &["baseline", "--data", p.data.to_str().unwrap(), "--repeats", "2"]);
    let csv = fs::read_to_string(base.join("report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("lookup,1,"));

    let sweep = ok(
        tmp.path(),
        &[
            "sweep",
            "--data",
            p.data.to_str().unwrap(),
            "--embeddings",
            p.embeddings.to_str().unwrap(),
            "--kind",
            "window",
            "--values",
            "0,1",
            "--repeats",
            "1",
        ],
    );
    let csv = fs::read_to_string(sweep.join("sweep_window.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn same_config_gives_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (pipeline(a.path()), pipeline(b.path()));
    for (x, y) in [
        (pa.data.join("trips.jsonl"), pb.data.join("trips.jsonl")),
        (pa.data.join("split.json"), pb.data.join("split.json")),
        (pa.embeddings.clone(), pb.embeddings.clone()),
        (pa.model.join("checkpoint.txt"), pb.model.join("checkpoint.txt")),
    ] {
        assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
    }
    assert_eq!(pa.data.file_name(), pb.data.file_name());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    // missing required flag and bad values are usage errors
    assert_eq!(code(out, &["evaluate", "--data", "x"]), 2);
    assert_eq!(code(out, &["gen-data", "--set", "data.bogus=1"]), 2);
    assert_eq!(code(out, &["gen-data", "--rows", "1"]), 2);
    let cfg = out.join("bad.toml");
    fs::write(&cfg, "[experiment]\nunknown = true\n").unwrap();
    assert_eq!(code(out, &["--config", cfg.to_str().unwrap(), "gen-data"]), 2);
    // missing inputs are data errors
    let data = ok(out, &["gen-data"]);
    assert_eq!(
        code(out, &["evaluate", "--data", data.to_str().unwrap(), "--model", "/nonexistent/model"]),
        3
    );
    assert_eq!(code(out, &["embed", "--data", "/nonexistent"]), 3);
    // an exploding learning rate is a divergence
    let emb = ok(out, &["embed", "--data", data.to_str().unwrap()]).join("embeddings.csv");
    assert_eq!(
        code(
            out,
            &[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--embeddings",
                emb.to_str().unwrap(),
                "--learning-rate",
                "1e300"
            ]
        ),
        4
    );
}

#[test]
fn config_file_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 7\n[data]\nrows = 3\ncols = 3\nn_trips = 15\n").unwrap();
    let d = ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "gen-data", "--trips", "10"]);
    let run = fs::read_to_string(d.join("run.toml")).unwrap();
    assert!(run.contains("seed = 7"));
    assert_eq!(fs::read_to_string(d.join("trips.jsonl")).unwrap().lines().count(), 10);
    // --set wins over the file
    let d2 = ok(tmp.path(), &["--config", cfg.to_str().unwrap(), "--set", "data.rows=4", "gen-data"]);
    assert_ne!(d, d2);
    assert!(fs::read_to_string(d2.join("run.toml")).unwrap().contains("rows = 4"));
}
