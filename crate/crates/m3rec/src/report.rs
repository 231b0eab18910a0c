//! Evaluation reports: plain-text tables plus machine-readable copies.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use m3rec_core::orchestrate::{IterationMetrics, TrainReport};
use serde::{Deserialize, Serialize};

use crate::error::{io, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineRow {
    pub policy: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_users: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineTable {
    pub horizon: usize,
    pub rows: Vec<OnlineRow>,
}

impl OnlineTable {
    pub fn report(&self) -> String {
        let mut s = format!("online evaluation, {} steps per user\n", self.horizon);
        let _ = writeln!(s, "{:<24} {:>3} {:>10} {:>10} {:>6}", "policy", "k", "mean", "std", "users");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>3} {:>10.4} {:>10.4} {:>6}", r.policy, r.k, r.mean, r.std, r.n_users);
        }
        s
    }

    pub fn get(&self, policy: &str, k: usize) -> Option<&OnlineRow> {
        self.rows.iter().find(|r| r.policy == policy && r.k == k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub policy: String,
    pub model: String,
    pub model_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub n_users: usize,
    pub horizon: usize,
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    pub fn report(&self) -> String {
        let mut s = format!(
            "model error (mean KL of true to modelled choice), {} users x {} steps\n",
            self.n_users, self.horizon
        );
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:<10} {:.6}", r.policy, r.model, r.model_error);
        }
        s
    }
}

/// One JSON object per outer iteration; skipped phases are `null`.
pub fn metrics_jsonl(iterations: &[IterationMetrics]) -> String {
    let mut s = String::new();
    for m in iterations {
        s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        s.push('\n');
    }
    s
}

pub fn train_summary(report: &TrainReport) -> String {
    let mut s = String::new();
    if let (Some(a), Some(b)) = (report.pretrain_loss.first(), report.pretrain_loss.last()) {
        let _ = writeln!(
            s,
            "warm-start: {} epochs, loss {a:.4} -> {b:.4}",
            report.pretrain_loss.len()
        );
    }
    let _ = writeln!(s, "outer iterations: {}", report.iterations.len());
    if let Some(m) = report.iterations.last() {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            s,
            "last: disc {} user_pg {} rec_pg {} model_reward {} mi {}",
            f(m.disc_loss),
            f(m.user_pg_loss),
            f(m.rec_pg_loss),
            f(m.model_reward),
            f(m.mi_bound)
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut f = std::fs::File::create(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_text(path, &s)
}
