//! The pipeline steps behind each CLI command.

use std::path::{Path, PathBuf};

use m3rec_core::config::Ablations;
use m3rec_core::data::{split_users, ItemEmbeddings, Trajectory};
use m3rec_core::envsim::{OraclePolicy, RandomPolicy, SlatePolicy, Simulator, UserPool};
use m3rec_core::evalmetrics::{offline_rerank_eval, MetricTable, STANDARD_METRICS};
use m3rec_core::orchestrate::{
    meta_train, model_error_probe, ChoiceModel, LearnedChoiceModel, LearnedRecPolicy, Networks, TrainReport,
    TrueChoiceModel, UniformChoiceModel,
};
use m3rec_core::recagent::SlateMode;
use m3rec_core::rng::{self, tag};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::ingest::{ingest_session_log, EmbeddingsFile, Ingested};
use crate::logs::{read_logs, write_logs, LogFile, LogHeader};
use crate::report::{self, OnlineRow, OnlineTable, ProbeRow, ProbeTable};

pub fn simulator(cfg: &ExperimentConfig) -> Result<Simulator> {
    if cfg.paths.source != DataSource::Simulator {
        return Err(Error::Config("this command needs paths.source = \"simulator\"".into()));
    }
    Ok(Simulator::new(cfg.sim.clone(), cfg.seed)?)
}

/// Writes train and test logs generated by the logging policy.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let sim = simulator(cfg)?;
    let s = &cfg.sim;
    let mut policy = sim.logging_policy();
    let header = LogHeader::new(s.n_items, s.slate_size);
    let train = sim.generate_offline_logs(UserPool::Train, s.n_train_users, s.episode_len, s.slate_size, &mut policy)?;
    let test = sim.generate_offline_logs(UserPool::Test, s.n_test_users, s.episode_len, s.slate_size, &mut policy)?;
    write_logs(&cfg.paths.train_logs(), &header, &train)?;
    write_logs(&cfg.paths.test_logs(), &header, &test)?;
    Ok((train.len(), test.len()))
}

fn embeddings(cfg: &ExperimentConfig, header: &LogHeader) -> Result<ItemEmbeddings> {
    let emb = match cfg.paths.source {
        DataSource::Simulator => ItemEmbeddings::fixed(simulator(cfg)?.catalog().embeddings().clone()),
        DataSource::Ingested => EmbeddingsFile::load(&cfg.paths.embeddings())?.embeddings()?,
    };
    if emb.n_items() != header.n_items {
        return Err(Error::Config(format!(
            "logs declare {} items but the embeddings have {}",
            header.n_items,
            emb.n_items()
        )));
    }
    Ok(emb)
}

fn logs(path: &Path) -> Result<LogFile> {
    if !path.exists() {
        return Err(Error::Config(format!("missing logs {}", path.display())));
    }
    read_logs(path)
}

/// Meta-trains on the run's train logs; writes checkpoint, metrics and a
/// summary report.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let data = logs(&cfg.paths.train_logs())?;
    let emb = embeddings(cfg, &data.header)?;
    let mut nets = Networks::new(&cfg.model, emb, cfg.seed)?;
    let result = meta_train(
        &mut nets,
        &cfg.schedule,
        &cfg.ablations,
        &data.trajectories,
        data.header.k,
        cfg.seed,
    )?;
    Checkpoint::new(cfg.seed, cfg.ablations.clone(), nets).save(&cfg.paths.checkpoint())?;
    report::write_text(&cfg.paths.metrics(), &report::metrics_jsonl(&result.iterations))?;
    report::write_text(&cfg.paths.reports().join("train.txt"), &report::train_summary(&result))?;
    Ok(result)
}

fn checkpoint_paths(cfg: &ExperimentConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if given.is_empty() {
        vec![cfg.paths.checkpoint()]
    } else {
        given.to_vec()
    }
}

fn load_checkpoints(cfg: &ExperimentConfig, given: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    checkpoint_paths(cfg, given)
        .iter()
        .map(|p| {
            if p.exists() {
                Checkpoint::load(p)
            } else {
                Err(Error::Config(format!("missing checkpoint {}", p.display())))
            }
        })
        .collect()
}

fn eval_users(cfg: &ExperimentConfig) -> usize {
    if cfg.eval.n_users == 0 {
        cfg.sim.n_test_users
    } else {
        cfg.eval.n_users.min(cfg.sim.n_test_users)
    }
}

fn eval_horizon(cfg: &ExperimentConfig) -> usize {
    if cfg.eval.horizon == 0 {
        cfg.sim.episode_len
    } else {
        cfg.eval.horizon
    }
}

fn label(i: usize, n: usize, c: &Checkpoint) -> String {
    let mut name = String::from("learned");
    let flags = ablation_names(&c.ablations);
    if !flags.is_empty() {
        name = format!("{name}[{flags}]");
    }
    if n > 1 {
        name = format!("{name}#{i}");
    }
    name
}

pub fn ablation_names(a: &Ablations) -> String {
    let mut v = Vec::new();
    if a.no_context {
        v.push("no_context");
    }
    if a.no_mi {
        v.push("no_mi");
    }
    if a.model_free {
        v.push("model_free");
    }
    if a.detach_rec_in_mi {
        v.push("detach_rec_in_mi");
    }
    v.join(",")
}

/// Cumulative true reward on held-out users for each configured slate size.
pub fn eval_online(cfg: &ExperimentConfig, checkpoints: &[PathBuf], baselines: bool) -> Result<OnlineTable> {
    let sim = simulator(cfg)?;
    let ckpts = load_checkpoints(cfg, checkpoints)?;
    let (n, h) = (eval_users(cfg), eval_horizon(cfg));
    let mut table = OnlineTable {
        horizon: h,
        rows: Vec::new(),
    };
    for &k in &cfg.eval.slate_sizes {
        let run = |name: &str, p: &mut dyn SlatePolicy| -> Result<OnlineRow> {
            let r = sim.evaluate_online(p, n, h, k, cfg.seed)?;
            Ok(OnlineRow {
                policy: name.to_string(),
                k,
                mean: r.mean,
                std: r.std,
                n_users: n,
            })
        };
        let mut means = Vec::new();
        for (i, c) in ckpts.iter().enumerate() {
            let mut p = LearnedRecPolicy::new(&c.networks, c.use_context(), SlateMode::Greedy);
            let row = run(&label(i, ckpts.len(), c), &mut p)?;
            means.push(row.mean);
            table.rows.push(row);
        }
        if means.len() > 1 {
            table.rows.push(OnlineRow {
                policy: "learned(mean of runs)".into(),
                k,
                mean: m3rec_core::math::mean(&means),
                std: m3rec_core::math::std_dev(&means),
                n_users: n,
            });
        }
        if baselines {
            table.rows.push(run("random", &mut RandomPolicy)?);
            table.rows.push(run("logging", &mut sim.logging_policy())?);
            table.rows.push(run("oracle-affinity", &mut OraclePolicy)?);
        }
    }
    let dir = cfg.paths.reports();
    report::write_json(&dir.join("online.json"), &table)?;
    report::write_text(&dir.join("online.txt"), &table.report())?;
    Ok(table)
}

/// Offline reranking metrics on the run's test logs. Several checkpoints
/// are combined into mean ± std across runs.
pub fn eval_offline(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<MetricTable> {
    let data = logs(&cfg.paths.test_logs())?;
    let ckpts = load_checkpoints(cfg, checkpoints)?;
    let pool = cfg.rerank_pool(data.header.n_items);
    let mut runs = Vec::new();
    for c in &ckpts {
        let mut r = LearnedRecPolicy::new(&c.networks, c.use_context(), SlateMode::Greedy);
        let mut rng = rng::stream(cfg.seed, tag::EVAL, 1);
        runs.push(offline_rerank_eval(
            &mut r,
            &data.trajectories,
            &STANDARD_METRICS,
            pool,
            c.networks.window(),
            &mut rng,
        )?);
    }
    let table = if runs.len() == 1 {
        runs.remove(0)
    } else {
        MetricTable::combine(&runs)?
    };
    let dir = cfg.paths.reports();
    report::write_text(&dir.join("offline.txt"), &table.report())?;
    report::write_text(&dir.join("offline.tsv"), &table.to_tsv())?;
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeModel {
    Learned,
    True,
    Uniform,
}

/// Model error of the checkpoint's user model under the current greedy
/// agent and under the affinity oracle.
pub fn probe(cfg: &ExperimentConfig, checkpoint: Option<&Path>, model: ProbeModel) -> Result<ProbeTable> {
    let sim = simulator(cfg)?;
    let given: Vec<PathBuf> = checkpoint.map(Path::to_path_buf).into_iter().collect();
    let ckpt = load_checkpoints(cfg, &given)?.remove(0);
    let (n, h, k) = (eval_users(cfg), eval_horizon(cfg), cfg.sim.slate_size);
    let mut table = ProbeTable {
        n_users: n,
        horizon: h,
        rows: Vec::new(),
    };
    let name = format!("{model:?}").to_lowercase();
    let nets = &ckpt.networks;
    let mut current = LearnedRecPolicy::new(nets, ckpt.use_context(), SlateMode::Greedy);
    let policies: [(&str, &mut dyn SlatePolicy); 2] = [("current", &mut current), ("oracle", &mut OraclePolicy)];
    for (pname, policy) in policies {
        let mut learned = LearnedChoiceModel::new(nets, ckpt.use_context());
        let m: &mut dyn ChoiceModel = match model {
            ProbeModel::Learned => &mut learned,
            ProbeModel::True => &mut TrueChoiceModel,
            ProbeModel::Uniform => &mut UniformChoiceModel,
        };
        table.rows.push(ProbeRow {
            policy: pname.into(),
            model: name.clone(),
            model_error: model_error_probe(&sim, policy, m, n, h, k, cfg.seed)?,
        });
    }
    let dir = cfg.paths.reports();
    report::write_json(&dir.join(format!("probe-{name}.json")), &table)?;
    report::write_text(&dir.join(format!("probe-{name}.txt")), &table.report())?;
    Ok(table)
}

/// Converts a session log into train/test logs and an embedding file in
/// the run directory.
pub fn ingest(cfg: &ExperimentConfig, input: &Path, embeddings: Option<&Path>) -> Result<Ingested> {
    let mut map = cfg.ingest.clone();
    if let Some(e) = embeddings {
        map.embeddings = Some(e.to_path_buf());
    }
    let g = ingest_session_log(input, &map, cfg.seed)?;
    let (train, test): (Vec<Trajectory>, Vec<Trajectory>) = split_users(&g.trajectories, map.train_frac, cfg.seed)?;
    let header = LogHeader::new(g.item_ids.len(), g.k);
    write_logs(&cfg.paths.train_logs(), &header, &train)?;
    write_logs(&cfg.paths.test_logs(), &header, &test)?;
    EmbeddingsFile::new(g.item_ids.clone(), &g.embeddings).save(&cfg.paths.embeddings())?;
    Ok(g)
}
