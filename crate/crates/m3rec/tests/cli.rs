use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "sim.n_items=25",
    "sim.d_item=4",
    "sim.n_train_users=30",
    "sim.n_test_users=10",
    "sim.episode_len=6",
    "sim.slate_size=3",
    "model.window=3",
    "model.d_context=3",
    "model.d_latent=3",
    "model.hidden=[8]",
    "schedule.pretrain_epochs=1",
    "schedule.n_outer_iters=2",
    "schedule.users_per_iter=0",
    "eval.slate_sizes=[3]",
];

fn m3rec(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m3rec"));
    cmd.env_remove("M3REC_SEED");
    cmd.args(args);
    for s in SMALL.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.args(["--set", &format!("paths.dir={:?}", dir.display().to_string())]);
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metrics(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn simulate_train_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(m3rec(dir, &[], &["simulate"]));
    assert!(dir.join("train.jsonl").exists() && dir.join("test.jsonl").exists());
    ok(m3rec(dir, &[], &["train"]));
    let m = metrics(dir);
    assert_eq!(m.len(), 2);
    assert!(m.iter().all(|r| r["mi_bound"].is_number() && r["disc_loss"].is_number()));

    let online: serde_json::Value = {
        ok(m3rec(dir, &[], &["eval-online"]));
        serde_json::from_str(&std::fs::read_to_string(dir.join("reports/online.json")).unwrap()).unwrap()
    };
    let mean = |name: &str| {
        online["rows"].as_array().unwrap().iter().find(|r| r["policy"] == name).unwrap()["mean"].as_f64().unwrap()
    };
    assert!(mean("oracle-affinity") >= mean("random"));
    assert!(mean("learned").is_finite());

    let offline = ok(m3rec(dir, &[], &["eval-offline"]));
    for name in ["P@1", "P@5", "P@10", "NDCG@5", "NDCG@10", "Recall@5", "Recall@10"] {
        assert!(offline.contains(name), "{offline}");
    }
    assert!(dir.join("reports/offline.tsv").exists());

    ok(m3rec(dir, &[], &["probe", "--model", "true"]));
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reports/probe-true.json")).unwrap()).unwrap();
    for row in probe["rows"].as_array().unwrap() {
        assert_eq!(row["model_error"].as_f64().unwrap(), 0.0);
    }
    ok(m3rec(dir, &[], &["probe"]));
    assert!(dir.join("reports/probe-learned.txt").exists());
}

#[test]
fn ablations_and_zero_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(m3rec(dir, &[], &["simulate"]));
    ok(m3rec(dir, &[], &["train", "--ablate", "no_mi"]));
    let m = metrics(dir);
    assert!(m.iter().all(|r| r["mi_bound"].is_null() && r["disc_loss"].is_number()));

    ok(m3rec(dir, &["schedule.n_outer_iters=0"], &["train"]));
    assert!(metrics(dir).is_empty());
    ok(m3rec(dir, &[], &["eval-online", "--no-baselines"]));

    let out = m3rec(dir, &[], &["train", "--ablate", "no_bananas"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_bananas"));
}

#[test]
fn invalid_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = m3rec(tmp.path(), &["schedule.learning_rate=0.1"], &["simulate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(!tmp.path().join("train.jsonl").exists());
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = m3rec(tmp.path(), &[], &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing logs"));
    let out = m3rec(tmp.path(), &[], &["eval-offline", "--checkpoint", "nowhere.json"]);
    assert!(!out.status.success());
}

#[test]
fn reference_config_file_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../m3rec.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_m3rec"))
        .args(["--config", cfg.to_str().unwrap(), "simulate", "--set"])
        .arg(format!("paths.dir={:?}", tmp.path().display().to_string()))
        .args(["--set", "sim.n_train_users=3", "--set", "sim.n_test_users=2"])
        .output()
        .unwrap();
    ok(out);
    assert!(tmp.path().join("train.jsonl").exists());
}

#[test]
fn seed_comes_from_the_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(m3rec(a.path(), &[], &["simulate"]));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m3rec"));
    cmd.env("M3REC_SEED", "99").arg("simulate");
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(["--set", &format!("paths.dir={:?}", b.path().display().to_string())]);
    ok(cmd.output().unwrap());
    let read = |d: &Path| std::fs::read(d.join("train.jsonl")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn ingest_then_train_and_rerank() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sessions.csv");
    let extra = ["paths.source=ingested", "ingest.time=timestamp", "ingest.reward=reward", "ingest.train_frac=0.5", "ingest.embedding_dim=4"];
    let out = ok(m3rec(dir, &extra, &["ingest", "--input", fixture.to_str().unwrap()]));
    assert!(out.contains("4 sessions over 7 items"), "{out}");
    let train = m3rec::logs::read_logs(&dir.join("train.jsonl")).unwrap();
    let test = m3rec::logs::read_logs(&dir.join("test.jsonl")).unwrap();
    assert_eq!(train.trajectories.len() + test.trajectories.len(), 4);
    assert_eq!(train.header.n_items, 7);
    assert_eq!(train.header.k, 3);
    ok(m3rec(dir, &extra, &["train"]));
    let report = ok(m3rec(dir, &extra, &["eval-offline"]));
    assert!(report.contains("NDCG@10"), "{report}");
    let out = m3rec(dir, &extra, &["eval-online"]);
    assert!(!out.status.success());
}

#[test]
fn help_is_not_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_m3rec")).arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval-offline"));
}
