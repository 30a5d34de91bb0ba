//! End-to-end evaluation of the strategies on record-based datasets.
//!
//! Records are split by a seeded 80/20 rule. Training samples are
//! repeat-sampled from the training records; test samples are drawn per
//! window position from the test records, so results can be reported per
//! period. Every sample is ranked by its most recent observed period before
//! any strategy sees it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytics::{self, NetworkConfig, Policy};
use crate::baselines::{preopt_decide, LinearPredictor, SupervisedModel};
use crate::data::{self, rank_for_training, repeat_sample, FileRecord, RankMode};
use crate::error::{Error, Result};
use crate::proactive::{ProactiveModel, TrainingSample};
use crate::solver::{solve_p0, SolverOptions};

/// Drops records with no popularity mass in the whole window (files that
/// have not arrived yet or are no longer requested).
pub fn active_records(records: Vec<FileRecord>) -> Vec<FileRecord> {
    records
        .into_iter()
        .filter(|r| r.values.iter().any(|v| *v > 0.0))
        .collect()
}

/// Ranked training samples drawn from `records`.
pub fn training_samples(records: &[FileRecord], f: usize, count: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    Ok(repeat_sample(records, f, count, seed)?
        .iter()
        .map(|s| rank_for_training(s, RankMode::ByPreviousPeriod))
        .collect())
}

/// A ranked test sample tagged with its window position.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub period: usize,
    pub sample: TrainingSample,
}

/// `per_period` ranked samples for every window position that has at
/// least `f` test records. Each position uses its own derived seed.
pub fn test_samples_by_period(
    records: &[FileRecord],
    f: usize,
    per_period: usize,
    seed: u64,
) -> Result<Vec<TestSample>> {
    let mut by_period: BTreeMap<usize, Vec<FileRecord>> = BTreeMap::new();
    for r in records {
        by_period.entry(r.period).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (period, recs) in by_period {
        if recs.len() < f {
            continue;
        }
        let s = seed.wrapping_mul(1_000_003).wrapping_add(period as u64);
        for sample in repeat_sample(&recs, f, per_period, s)? {
            out.push(TestSample {
                period,
                sample: rank_for_training(&sample, RankMode::ByPreviousPeriod),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no window position has {f} test records")));
    }
    Ok(out)
}

/// Strategy names used in reports.
pub const GENIE: &str = "genie";
pub const UNSUP: &str = "unsup";
pub const SUP: &str = "sup";
pub const PREOPT: &str = "preopt";

/// The trained strategies to compare; absent ones are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct Strategies<'a> {
    pub unsup: Option<&'a ProactiveModel>,
    pub sup: Option<&'a SupervisedModel>,
    pub preopt: Option<&'a LinearPredictor>,
}

/// One strategy's decision on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub strategy: String,
    pub period: usize,
    pub sample: usize,
    pub policy: Policy,
    /// Closed-form SOP against the realized target popularity.
    pub sop: f64,
}

/// Decisions and closed-form SOP of the genie bound and every present
/// strategy, in test order with the genie first for each sample.
pub fn evaluate(
    tests: &[TestSample],
    strategies: &Strategies<'_>,
    cfg: &NetworkConfig,
    solver: &SolverOptions,
) -> Result<Vec<Evaluation>> {
    let mut out = Vec::new();
    for (i, t) in tests.iter().enumerate() {
        let s = &t.sample;
        let mut push = |name: &str, policy: Policy| -> Result<()> {
            let sop = analytics::sop(&s.target, &policy, cfg)?;
            out.push(Evaluation {
                strategy: name.into(),
                period: t.period,
                sample: i,
                policy,
                sop,
            });
            Ok(())
        };
        push(GENIE, solve_p0(&s.target, cfg, solver)?.policy)?;
        if let Some(m) = strategies.unsup {
            push(UNSUP, m.decide(&s.history, cfg)?.policy)?;
        }
        if let Some(m) = strategies.sup {
            push(SUP, m.decide(&s.history, cfg)?.policy)?;
        }
        if let Some(p) = strategies.preopt {
            push(PREOPT, preopt_decide(p, &s.history, cfg, solver)?.policy)?;
        }
    }
    Ok(out)
}

/// Mean SOP per (strategy, period).
pub fn per_period_means(evals: &[Evaluation]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for e in evals {
        let a = acc.entry((e.strategy.clone(), e.period)).or_insert((0.0, 0));
        a.0 += e.sop;
        a.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean SOP per strategy over all test samples.
pub fn overall_means(evals: &[Evaluation]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in evals {
        let a = acc.entry(e.strategy.clone()).or_insert((0.0, 0));
        a.0 += e.sop;
        a.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Records of a series after the window is slid and inactive records dropped.
pub fn records_from_series(series: &data::PopularitySeries, tau: usize) -> Result<Vec<FileRecord>> {
    Ok(active_records(data::build_records(series, tau)?))
}
