//! Offline reranking metrics and the per-user evaluation harness.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;
use serde::{Deserialize, Serialize};

use crate::data::{make_state, ItemId, State, Trajectory};
use crate::math;
use crate::rng::Rng;
use crate::{Error, Result};

fn check(ranked: &[ItemId], k: usize) -> Result<()> {
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("ranking is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be positive".into()));
    }
    Ok(())
}

fn hits(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

/// Binary-relevance NDCG; `None` when nothing is relevant.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<Option<f64>> {
    check(ranked, k)?;
    if relevant.is_empty() {
        return Ok(None);
    }
    let disc = |j: usize| 1.0 / math::log2(j as f64 + 2.0);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(j, _)| disc(j))
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(disc).sum();
    Ok(Some(dcg / ideal))
}

/// `hits / k`; `None` when nothing is relevant.
pub fn precision_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<Option<f64>> {
    check(ranked, k)?;
    if relevant.is_empty() {
        return Ok(None);
    }
    Ok(Some(hits(ranked, relevant, k) as f64 / k as f64))
}

/// `hits / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<Option<f64>> {
    check(ranked, k)?;
    if relevant.is_empty() {
        return Ok(None);
    }
    Ok(Some(hits(ranked, relevant, k) as f64 / relevant.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Precision,
    Ndcg,
    Recall,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Precision => "P",
            Metric::Ndcg => "NDCG",
            Metric::Recall => "Recall",
        }
    }

    pub fn eval(self, ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<Option<f64>> {
        match self {
            Metric::Precision => precision_at_k(ranked, relevant, k),
            Metric::Ndcg => ndcg_at_k(ranked, relevant, k),
            Metric::Recall => recall_at_k(ranked, relevant, k),
        }
    }
}

/// The reported set: P@1, P@5, P@10, NDCG@5, NDCG@10, Recall@5, Recall@10.
pub const STANDARD_METRICS: [(Metric, usize); 7] = [
    (Metric::Precision, 1),
    (Metric::Precision, 5),
    (Metric::Precision, 10),
    (Metric::Ndcg, 5),
    (Metric::Ndcg, 10),
    (Metric::Recall, 5),
    (Metric::Recall, 10),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

impl MetricRow {
    pub fn name(&self) -> String {
        format!("{}@{}", self.metric.label(), self.k)
    }
}

/// Metric means and standard deviations across users (or across runs,
/// after [`MetricTable::combine`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub n_users: usize,
    /// Users without a held-out step or a relevant item.
    pub skipped: usize,
}

impl MetricTable {
    pub fn get(&self, metric: Metric, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == metric && r.k == k)
    }

    pub fn names(&self) -> Vec<String> {
        self.rows.iter().map(MetricRow::name).collect()
    }

    /// Mean of the per-run means, with the spread across runs.
    pub fn combine(runs: &[MetricTable]) -> Result<MetricTable> {
        let first = runs.first().ok_or(Error::EmptyBatch("metric runs"))?;
        let rows = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v: Vec<f64> = runs.iter().map(|t| t.rows[i].mean).collect();
                MetricRow {
                    metric: r.metric,
                    k: r.k,
                    mean: math::mean(&v),
                    std: math::std_dev(&v),
                }
            })
            .collect();
        Ok(MetricTable {
            rows,
            n_users: first.n_users,
            skipped: first.skipped,
        })
    }

    /// Human-readable report, one metric per line.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "users\t{}\tskipped\t{}", self.n_users, self.skipped);
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:.6} ± {:.6}", r.name(), r.mean, r.std);
        }
        s
    }

    /// Tab-separated `metric\tk\tmean\tstd` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tk\tmean\tstd\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.9}\t{:.9}", r.metric.label(), r.k, r.mean, r.std);
        }
        s
    }
}

/// Candidate pool for each held-out step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankPool {
    /// The logged slate.
    Slate,
    /// Every item of a catalog of this size.
    Catalog(usize),
}

/// A scorer conditioned on one context trajectory per user.
pub trait Reranker {
    /// Called once per user with the context part of the trajectory.
    fn adapt(&mut self, context: &Trajectory, rng: &mut Rng) -> Result<()>;
    /// One score per candidate; higher ranks first.
    fn score(&mut self, state: &State, candidates: &[ItemId], rng: &mut Rng) -> Result<Vec<f64>>;
}

/// Candidates ordered by descending score, ties to the earlier candidate.
pub fn rank_by_scores(candidates: &[ItemId], scores: &[f64]) -> Vec<ItemId> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().map(|i| candidates[i]).collect()
}

/// Splits each trajectory in half: the first `⌈n/2⌉` steps condition the
/// reranker, the rest are held out. Each held-out step's logged click is
/// the single relevant item. Metrics are averaged per user, then across
/// users.
pub fn offline_rerank_eval(
    reranker: &mut dyn Reranker,
    test: &[Trajectory],
    metrics: &[(Metric, usize)],
    pool: RerankPool,
    window: usize,
    rng: &mut Rng,
) -> Result<MetricTable> {
    let mut per_user: Vec<Vec<f64>> = alloc::vec![Vec::new(); metrics.len()];
    let mut skipped = 0;
    let catalog: Vec<ItemId> = match pool {
        RerankPool::Catalog(n) => (0..n).collect(),
        RerankPool::Slate => Vec::new(),
    };
    for traj in test {
        let n_ctx = traj.len().div_ceil(2);
        if n_ctx == traj.len() {
            skipped += 1;
            continue;
        }
        let context = traj.prefix(n_ctx);
        reranker.adapt(&context, rng)?;
        let history: Vec<ItemId> = context.clicks().collect();
        let mut state = make_state(&history, window);
        let mut sums = alloc::vec![0.0; metrics.len()];
        for step in &traj.steps[n_ctx..] {
            let candidates = match pool {
                RerankPool::Slate => &step.slate[..],
                RerankPool::Catalog(_) => &catalog[..],
            };
            let scores = reranker.score(&state, candidates, rng)?;
            let ranked = rank_by_scores(candidates, &scores);
            let relevant: BTreeSet<ItemId> = [step.click].into_iter().collect();
            for (m, &(metric, k)) in metrics.iter().enumerate() {
                sums[m] += metric.eval(&ranked, &relevant, k)?.unwrap_or(0.0);
            }
            state = state.advance(step.click);
        }
        let n = (traj.len() - n_ctx) as f64;
        for (m, s) in sums.into_iter().enumerate() {
            per_user[m].push(s / n);
        }
    }
    let rows = metrics
        .iter()
        .zip(&per_user)
        .map(|(&(metric, k), v)| MetricRow {
            metric,
            k,
            mean: math::mean(v),
            std: math::std_dev(v),
        })
        .collect();
    Ok(MetricTable {
        rows,
        n_users: test.len() - skipped,
        skipped,
    })
}

/// Uniformly random scores.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomReranker;

impl Reranker for RandomReranker {
    fn adapt(&mut self, _: &Trajectory, _: &mut Rng) -> Result<()> {
        Ok(())
    }

    fn score(&mut self, _: &State, candidates: &[ItemId], rng: &mut Rng) -> Result<Vec<f64>> {
        use rand::Rng as _;
        Ok(candidates.iter().map(|_| rng.random::<f64>()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::envsim::{Simulator, UserPool};
    use crate::rng::{stream, tag};
    use alloc::vec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn hand_examples() {
        let r = [3, 1, 4, 5, 9, 2, 6];
        assert_eq!(ndcg_at_k(&r, &set(&[3]), 5).unwrap(), Some(1.0));
        let v = ndcg_at_k(&r, &set(&[1]), 2).unwrap().unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(precision_at_k(&r, &set(&[3, 1, 4]), 3).unwrap(), Some(1.0));
        assert_eq!(precision_at_k(&r, &set(&[6]), 5).unwrap(), Some(0.0));
        assert_eq!(recall_at_k(&r, &set(&[6]), 5).unwrap(), Some(0.0));
        assert_eq!(precision_at_k(&r, &set(&[1, 9, 7, 8]), 5).unwrap(), Some(0.4));
        assert_eq!(recall_at_k(&r, &set(&[1, 9, 7, 8]), 5).unwrap(), Some(0.5));
        assert_eq!(ndcg_at_k(&r, &set(&[]), 5).unwrap(), None);
        assert!(ndcg_at_k(&[], &set(&[1]), 5).is_err());
        assert!(precision_at_k(&r, &set(&[1]), 0).is_err());
    }

    /// Second implementation: graded relevance vector, explicit ideal
    /// ordering by sort.
    fn brute(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> (f64, f64, f64) {
        let rel: Vec<f64> = ranked.iter().map(|i| if relevant.contains(i) { 1.0 } else { 0.0 }).collect();
        let mut dcg = 0.0;
        let mut h = 0.0;
        for (pos, r) in rel.iter().enumerate() {
            if pos >= k {
                break;
            }
            dcg += r / ((pos + 2) as f64).ln() * core::f64::consts::LN_2;
            h += r;
        }
        let mut ideal_rel = vec![1.0; relevant.len()];
        ideal_rel.resize(ideal_rel.len().max(k), 0.0);
        let idcg: f64 = ideal_rel
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, r)| r / ((pos + 2) as f64).ln() * core::f64::consts::LN_2)
            .sum();
        (h / k as f64, h / relevant.len() as f64, dcg / idcg)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metrics_match_brute_force(
            ranked in proptest::sample::subsequence((0..30usize).collect::<Vec<_>>(), 1..30).prop_shuffle(),
            relevant in proptest::collection::btree_set(0..30usize, 1..10),
            k in 1..15usize,
        ) {
            let (p, r, n) = brute(&ranked, &relevant, k);
            let pp = precision_at_k(&ranked, &relevant, k).unwrap().unwrap();
            let rr = recall_at_k(&ranked, &relevant, k).unwrap().unwrap();
            let nn = ndcg_at_k(&ranked, &relevant, k).unwrap().unwrap();
            prop_assert!((pp - p).abs() <= 1e-12);
            prop_assert!((rr - r).abs() <= 1e-12);
            prop_assert!((nn - n).abs() <= 1e-12);
            for v in [pp, rr, nn] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // the ideal ranking scores exactly 1
            let mut ideal: Vec<usize> = relevant.iter().copied().collect();
            ideal.extend((100..100 + k).filter(|i| !relevant.contains(i)));
            prop_assert_eq!(ndcg_at_k(&ideal, &relevant, k).unwrap().unwrap(), 1.0);
        }
    }

    #[test]
    fn rank_ties_keep_candidate_order() {
        assert_eq!(rank_by_scores(&[7, 3, 5], &[1.0, 2.0, 1.0]), vec![3, 7, 5]);
    }

    struct AffinityRanker<'a> {
        sim: &'a Simulator,
        pref: Vec<f64>,
    }

    impl Reranker for AffinityRanker<'_> {
        fn adapt(&mut self, _: &Trajectory, _: &mut Rng) -> Result<()> {
            Ok(())
        }
        fn score(&mut self, _: &State, c: &[ItemId], _: &mut Rng) -> Result<Vec<f64>> {
            Ok(c.iter().map(|&i| math::dot(&self.pref, self.sim.catalog().embedding(i))).collect())
        }
    }

    #[test]
    fn affinity_ranker_beats_random_and_random_hits_one_in_ten() {
        let cfg = SimConfig {
            n_items: 60,
            slate_size: 10,
            n_test_users: 500,
            ..SimConfig::default()
        };
        let sim = Simulator::new(cfg.clone(), 3).unwrap();
        let logs = sim
            .generate_offline_logs(UserPool::Test, 500, cfg.episode_len, cfg.slate_size, &mut sim.logging_policy())
            .unwrap();
        let mut rng = stream(3, tag::EVAL, 0);
        let metrics = [(Metric::Precision, 1)];
        let random = offline_rerank_eval(&mut RandomReranker, &logs, &metrics, RerankPool::Slate, 10, &mut rng).unwrap();
        let p = random.rows[0].mean;
        let n = (500 * 10) as f64;
        assert!((p - 0.1).abs() < 3.0 * (0.1 * 0.9 / n).sqrt(), "random P@1 {p}");

        // per-user true preference: rank each user with their own vector
        let mut total = 0.0;
        for (i, t) in logs.iter().enumerate() {
            let pref = sim.pool_user(UserPool::Test, i).preference.clone();
            let mut r = AffinityRanker { sim: &sim, pref };
            let tab = offline_rerank_eval(&mut r, core::slice::from_ref(t), &metrics, RerankPool::Slate, 10, &mut rng).unwrap();
            total += tab.rows[0].mean;
        }
        assert!(total / 500.0 > p);
        let again = offline_rerank_eval(&mut RandomReranker, &logs, &metrics, RerankPool::Slate, 10, &mut stream(3, tag::EVAL, 0)).unwrap();
        assert_eq!(again, random);
    }

    #[test]
    fn table_outputs_list_the_standard_metrics() {
        let t = MetricTable {
            rows: STANDARD_METRICS
                .iter()
                .map(|&(metric, k)| MetricRow { metric, k, mean: 0.5, std: 0.1 })
                .collect(),
            n_users: 3,
            skipped: 0,
        };
        assert_eq!(t.names(), vec!["P@1", "P@5", "P@10", "NDCG@5", "NDCG@10", "Recall@5", "Recall@10"]);
        assert_eq!(t.to_tsv().lines().count(), 8);
        let c = MetricTable::combine(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(c.rows[0].std, 0.0);
    }
}
