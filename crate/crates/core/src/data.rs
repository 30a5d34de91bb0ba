//! Popularity estimation from request logs, training-record construction and
//! synthetic popularity traces.
//!
//! The pipeline is: request log → per-period popularity series over a
//! retained catalog → one [`FileRecord`] per file and window position →
//! repeat-sampled [`TrainingSample`]s of `F` records each.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto, Poisson};
use serde::{Deserialize, Serialize};

use crate::analytics::PopularityVector;
use crate::error::{Error, Result};
use crate::proactive::{HistoryWindow, TrainingSample};

/// Default share of the catalog kept by [`Retention::TopFraction`].
pub const DEFAULT_KEEP_FRACTION: f64 = 0.02;

/// Request counts per file and period.
///
/// Periods are indexed `0..num_periods`; a period may have no requests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestLog {
    num_periods: usize,
    counts: BTreeMap<u64, Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RequestRow {
    period: usize,
    file_id: u64,
}

impl RequestLog {
    /// Builds a log from individual `(period, file_id)` request events.
    pub fn from_events(events: impl IntoIterator<Item = (usize, u64)>) -> Self {
        let mut log = Self::default();
        for (period, file) in events {
            log.add(period, file, 1);
        }
        log
    }

    /// Records `count` requests for `file_id` in `period`.
    pub fn add(&mut self, period: usize, file_id: u64, count: u64) {
        if period >= self.num_periods {
            self.num_periods = period + 1;
            for c in self.counts.values_mut() {
                c.resize(self.num_periods, 0);
            }
        }
        let n = self.num_periods;
        let row = self.counts.entry(file_id).or_insert_with(|| vec![0; n]);
        row[period] += count;
    }

    /// Extends the log to at least `n` periods (trailing periods stay empty).
    pub fn ensure_periods(&mut self, n: usize) {
        if n > self.num_periods {
            self.num_periods = n;
            for c in self.counts.values_mut() {
                c.resize(n, 0);
            }
        }
    }

    pub fn num_periods(&self) -> usize {
        self.num_periods
    }

    pub fn num_files(&self) -> usize {
        self.counts.len()
    }

    pub fn total_requests(&self) -> u64 {
        self.counts.values().flatten().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_requests() == 0
    }

    /// Per-period counts of one file, if it appears in the log.
    pub fn counts(&self, file_id: u64) -> Option<&[u64]> {
        self.counts.get(&file_id).map(Vec::as_slice)
    }

    /// File ids in ascending order.
    pub fn file_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.counts.keys().copied()
    }

    /// Reads CSV with header `period,file_id`, one row per request.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut log = Self::default();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: RequestRow = row?;
            log.add(row.period, row.file_id, 1);
        }
        Ok(log)
    }

    /// Writes one `period,file_id` row per request, ordered by period then id.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(["period", "file_id"])?;
        for period in 0..self.num_periods {
            for (&file_id, c) in &self.counts {
                for _ in 0..c[period] {
                    w.serialize(RequestRow { period, file_id })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Which files of a log are kept when estimating popularity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Retention {
    /// The most requested share of files, at least one file.
    TopFraction { keep_fraction: f64 },
    /// Files with at least this many requests over the whole log.
    MinRequests { min_requests: u64 },
}

impl Default for Retention {
    fn default() -> Self {
        Retention::TopFraction {
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }
}

/// Per-period popularity over a fixed catalog of file ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularitySeries {
    file_ids: Vec<u64>,
    periods: Vec<PopularityVector>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    period: usize,
    file_id: u64,
    prob: f64,
}

impl PopularitySeries {
    pub fn new(file_ids: Vec<u64>, periods: Vec<PopularityVector>) -> Result<Self> {
        if file_ids.is_empty() {
            return Err(Error::invalid("popularity series needs at least one file"));
        }
        if let Some(p) = periods.iter().find(|p| p.len() != file_ids.len()) {
            return Err(Error::dim(file_ids.len(), p.len(), "popularity series row"));
        }
        Ok(Self { file_ids, periods })
    }

    pub fn file_ids(&self) -> &[u64] {
        &self.file_ids
    }

    pub fn periods(&self) -> &[PopularityVector] {
        &self.periods
    }

    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn num_files(&self) -> usize {
        self.file_ids.len()
    }

    /// Reads CSV with header `period,file_id,prob`. Every period must list
    /// the same files; missing entries are treated as zero.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut cells: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: SeriesRow = row?;
            cells.entry(row.period).or_default().insert(row.file_id, row.prob);
        }
        let n = cells.keys().next_back().map_or(0, |p| p + 1);
        if cells.len() != n {
            return Err(Error::invalid("popularity series periods must be contiguous from 0"));
        }
        let mut ids: Vec<u64> = cells.values().flat_map(|m| m.keys().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let periods = cells
            .values()
            .map(|m| PopularityVector::new(ids.iter().map(|id| m.get(id).copied().unwrap_or(0.0)).collect()))
            .collect::<Result<_>>()?;
        Self::new(ids, periods)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (period, p) in self.periods.iter().enumerate() {
            for (&file_id, &prob) in self.file_ids.iter().zip(p.as_slice()) {
                w.serialize(SeriesRow { period, file_id, prob })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Estimates per-period popularity over the retained files of `log`.
///
/// Files are ranked by total requests (ties by file id). Each period is
/// normalized by the retained files' requests in that period; a period
/// without retained requests yields the uniform vector.
pub fn estimate_popularity(log: &RequestLog, retention: Retention) -> Result<PopularitySeries> {
    if log.is_empty() {
        return Err(Error::invalid("request log is empty"));
    }
    let mut ranked: Vec<(u64, u64)> = log.counts.iter().map(|(&id, c)| (id, c.iter().sum())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let kept: Vec<u64> = match retention {
        Retention::TopFraction { keep_fraction } => {
            if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                return Err(Error::invalid(format!("keep_fraction {keep_fraction} not in (0,1]")));
            }
            let n = ((keep_fraction * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len());
            ranked[..n].iter().map(|r| r.0).collect()
        }
        Retention::MinRequests { min_requests } => ranked.iter().filter(|r| r.1 >= min_requests).map(|r| r.0).collect(),
    };
    if kept.is_empty() {
        return Err(Error::invalid("retention rule keeps no files"));
    }
    let mut ids = kept;
    ids.sort_unstable();
    let periods = (0..log.num_periods)
        .map(|t| {
            let counts: Vec<f64> = ids.iter().map(|id| log.counts[id][t] as f64).collect();
            if counts.iter().all(|c| *c == 0.0) {
                log::warn!("period {t} has no requests for retained files; using uniform popularity");
            }
            PopularityVector::from_weights(&counts)
        })
        .collect::<Result<_>>()?;
    PopularitySeries::new(ids, periods)
}

/// One file's popularity at window position `period` and the τ periods
/// before it: `[p^t, p^{t−1}, …, p^{t−τ}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub file_id: u64,
    pub period: usize,
    pub values: Vec<f64>,
}

impl FileRecord {
    pub fn tau(&self) -> usize {
        self.values.len() - 1
    }
}

/// Slides a τ-period window over the series: positions `t = τ..T−1`, one
/// record per file and position, ordered by position then catalog order.
pub fn build_records(series: &PopularitySeries, tau: usize) -> Result<Vec<FileRecord>> {
    if tau == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    let t_len = series.num_periods();
    if t_len < tau + 1 {
        return Err(Error::invalid(format!(
            "series of {t_len} periods is too short for a window of {tau}"
        )));
    }
    let mut out = Vec::with_capacity((t_len - tau) * series.num_files());
    for t in tau..t_len {
        for (j, &file_id) in series.file_ids.iter().enumerate() {
            let values = (0..=tau).map(|k| series.periods[t - k].as_slice()[j]).collect();
            out.push(FileRecord {
                file_id,
                period: t,
                values,
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle and split: the first `round(train_fraction·n)` shuffled
/// records go to training, the rest to test.
pub fn split_records(
    records: &[FileRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<FileRecord>, Vec<FileRecord>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in [0,1]")));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * records.len() as f64).round() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Draws `count` samples of `f` distinct records each. Every period's row
/// is renormalized within the sample (uniform if it carries no mass).
pub fn repeat_sample(records: &[FileRecord], f: usize, count: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    if f == 0 {
        return Err(Error::invalid("a sample needs at least one file"));
    }
    if records.len() < f {
        return Err(Error::invalid(format!(
            "{} records cannot fill a sample of {f} files",
            records.len()
        )));
    }
    let tau = records[0].tau();
    if let Some(r) = records.iter().find(|r| r.tau() != tau) {
        return Err(Error::dim(tau, r.tau(), "record window length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let chosen: Vec<&FileRecord> = rand::seq::index::sample(&mut rng, records.len(), f)
                .into_iter()
                .map(|i| &records[i])
                .collect();
            sample_from_records(&chosen)
        })
        .collect()
}

/// Assembles one sample from `F` records sharing a window length.
pub fn sample_from_records(chosen: &[&FileRecord]) -> Result<TrainingSample> {
    let first = chosen
        .first()
        .ok_or_else(|| Error::invalid("a sample needs at least one record"))?;
    let tau = first.tau();
    let row = |k: usize| {
        let w: Vec<f64> = chosen.iter().map(|r| r.values[k]).collect();
        PopularityVector::from_weights(&w)
    };
    let target = row(0)?;
    let history = HistoryWindow::new((1..=tau).map(row).collect::<Result<_>>()?)?;
    TrainingSample::new(target, history)
}

/// Column ordering applied before training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Descending by the most recent observed period (history-driven methods).
    ByPreviousPeriod,
    /// Descending by the target period (known-future methods).
    ByTarget,
}

/// Stable descending permutation of `key`; ties keep their original order.
pub fn descending_order(key: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..key.len()).collect();
    idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]));
    idx
}

/// Permutes the file columns of target and history by one shared order.
pub fn rank_for_training(sample: &TrainingSample, mode: RankMode) -> TrainingSample {
    let key = match mode {
        RankMode::ByPreviousPeriod => sample.history.newest(),
        RankMode::ByTarget => &sample.target,
    };
    let order = descending_order(key.as_slice());
    let permute = |p: &PopularityVector| {
        let v = p.as_slice();
        PopularityVector::with_tolerance(order.iter().map(|&i| v[i]).collect(), crate::proactive::HISTORY_SUM_TOL)
            .expect("a permutation of a valid vector is valid")
    };
    TrainingSample {
        target: permute(&sample.target),
        history: HistoryWindow::new(sample.history.rows().iter().map(permute).collect())
            .expect("permuted rows keep their shape"),
    }
}

/// Stationary Zipf series: `p_f ∝ f^{−exponent}`, file ids `0..F`.
pub fn gen_zipf(f: usize, exponent: f64, num_periods: usize) -> Result<PopularitySeries> {
    if !(exponent >= 0.0 && exponent.is_finite()) {
        return Err(Error::invalid(format!(
            "zipf exponent {exponent} must be finite and ≥ 0"
        )));
    }
    if f == 0 {
        return Err(Error::invalid("zipf library needs at least one file"));
    }
    let w: Vec<f64> = (1..=f).map(|i| (i as f64).powf(-exponent)).collect();
    let p = PopularityVector::from_weights(&w)?;
    PopularitySeries::new((0..f as u64).collect(), vec![p; num_periods])
}

/// Dynamic shot-noise popularity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShotNoiseParams {
    /// Mean number of new files per period.
    pub arrival_rate: f64,
    /// Pareto tail index of the per-file request volume.
    pub volume_pareto_shape: f64,
    /// Pareto minimum of the per-file request volume (requests per period at arrival).
    pub volume_pareto_scale: f64,
    /// Per-period exponential decay of a file's request intensity.
    pub lifespan_decay: f64,
    pub num_periods: usize,
    /// No files arrive once the catalog reaches this size.
    pub num_files_cap: usize,
}

impl Default for ShotNoiseParams {
    fn default() -> Self {
        Self {
            arrival_rate: 8.0,
            volume_pareto_shape: 1.5,
            volume_pareto_scale: 200.0,
            lifespan_decay: 0.3,
            num_periods: 50,
            num_files_cap: 400,
        }
    }
}

impl ShotNoiseParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("arrival_rate", self.arrival_rate),
            ("volume_pareto_shape", self.volume_pareto_shape),
            ("volume_pareto_scale", self.volume_pareto_scale),
            ("lifespan_decay", self.lifespan_decay),
        ];
        if let Some((name, v)) = pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{name} = {v} must be positive and finite")));
        }
        if self.num_periods == 0 || self.num_files_cap == 0 {
            return Err(Error::invalid("num_periods and num_files_cap must be positive"));
        }
        Ok(())
    }
}

/// A synthetic trace: the intensity-normalized popularity and a request log
/// drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotNoiseTrace {
    pub series: PopularitySeries,
    pub log: RequestLog,
    /// Arrival period of each catalog file, indexed like `series.file_ids()`.
    pub arrivals: Vec<usize>,
    pub volumes: Vec<f64>,
}

/// Generates a shot-noise trace.
///
/// New files arrive as a Poisson number per period (at least one in period
/// 0 so every period has an active file). File `f` has request intensity
/// `v_f · exp(−decay·(t − a_f))` from its arrival `a_f` on, with a Pareto
/// volume `v_f`. Log counts are Poisson with that intensity as the mean.
pub fn gen_shot_noise(params: &ShotNoiseParams, seed: u64) -> Result<ShotNoiseTrace> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals_per_period = Poisson::new(params.arrival_rate).map_err(|e| Error::invalid(e.to_string()))?;
    let volume = Pareto::new(params.volume_pareto_scale, params.volume_pareto_shape)
        .map_err(|e| Error::invalid(e.to_string()))?;

    let mut arrivals = Vec::new();
    let mut volumes = Vec::new();
    for t in 0..params.num_periods {
        let mut n = arrivals_per_period.sample(&mut rng) as usize;
        if t == 0 {
            n = n.max(1);
        }
        n = n.min(params.num_files_cap - arrivals.len());
        for _ in 0..n {
            arrivals.push(t);
            volumes.push(volume.sample(&mut rng));
        }
    }

    let mut log = RequestLog::default();
    log.ensure_periods(params.num_periods);
    let mut periods = Vec::with_capacity(params.num_periods);
    for t in 0..params.num_periods {
        let intensity: Vec<f64> = arrivals
            .iter()
            .zip(&volumes)
            .map(|(&a, &v)| {
                if t >= a {
                    v * (-params.lifespan_decay * (t - a) as f64).exp()
                } else {
                    0.0
                }
            })
            .collect();
        for (id, &mean) in intensity.iter().enumerate() {
            if mean > 0.0 {
                let k = Poisson::new(mean)
                    .map_err(|e| Error::invalid(e.to_string()))?
                    .sample(&mut rng);
                if k > 0.0 {
                    log.add(t, id as u64, k as u64);
                }
            }
        }
        periods.push(PopularityVector::from_weights(&intensity)?);
    }
    Ok(ShotNoiseTrace {
        series: PopularitySeries::new((0..arrivals.len() as u64).collect(), periods)?,
        log,
        arrivals,
        volumes,
    })
}

/// Metadata written next to a sample bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub num_files: usize,
    pub tau: usize,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    sample: usize,
    /// 0 for the target period, k for period t−k.
    lag: usize,
    file: usize,
    prob: f64,
}

/// Writes samples as CSV `sample,lag,file,prob`.
pub fn write_samples_csv<W: Write>(writer: W, samples: &[TrainingSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (s, sample) in samples.iter().enumerate() {
        let rows = std::iter::once(&sample.target).chain(sample.history.rows());
        for (lag, row) in rows.enumerate() {
            for (file, &prob) in row.as_slice().iter().enumerate() {
                w.serialize(SampleRow {
                    sample: s,
                    lag,
                    file,
                    prob,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by [`write_samples_csv`].
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<TrainingSample>> {
    let mut cells: BTreeMap<usize, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: SampleRow = row?;
        cells
            .entry(row.sample)
            .or_default()
            .entry(row.lag)
            .or_default()
            .push((row.file, row.prob));
    }
    cells
        .into_values()
        .map(|lags| {
            let mut rows = lags.into_values().map(|mut cols| {
                cols.sort_by_key(|c| c.0);
                cols.into_iter().map(|c| c.1).collect::<Vec<f64>>()
            });
            let target = PopularityVector::with_tolerance(
                rows.next().ok_or_else(|| Error::invalid("sample without rows"))?,
                crate::proactive::HISTORY_SUM_TOL,
            )?;
            let history = HistoryWindow::from_rows(rows.collect())?;
            TrainingSample::new(target, history)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn series(rows: &[&[f64]]) -> PopularitySeries {
        let n = rows[0].len();
        PopularitySeries::new(
            (0..n as u64).collect(),
            rows.iter()
                .map(|r| PopularityVector::new(r.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_file_is_always_certain() {
        let log = RequestLog::from_events([(0, 7), (0, 7), (1, 7), (2, 7)]);
        let s = estimate_popularity(&log, Retention::TopFraction { keep_fraction: 1.0 }).unwrap();
        assert_eq!(s.num_periods(), 3);
        assert!(s.periods().iter().all(|p| p.as_slice() == [1.0]));
    }

    #[test]
    fn counts_three_to_one() {
        let log = RequestLog::from_events([(0, 1), (0, 1), (0, 1), (0, 2)]);
        let s = estimate_popularity(&log, Retention::TopFraction { keep_fraction: 1.0 }).unwrap();
        assert_eq!(s.periods()[0].as_slice(), [0.75, 0.25]);
    }

    #[test]
    fn retention_rules() {
        let mut log = RequestLog::default();
        for (id, n) in [(0, 5), (1, 50), (2, 20), (3, 20), (4, 9)] {
            log.add(0, id, n);
        }
        let top = |f| estimate_popularity(&log, Retention::TopFraction { keep_fraction: f }).unwrap();
        assert_eq!(top(0.2).file_ids(), [1]);
        // Equal totals: the lower id wins the last slot.
        assert_eq!(top(0.6).file_ids(), [1, 2, 3]);
        assert_eq!(top(0.5).file_ids(), [1, 2, 3]);
        assert_eq!(top(0.01).file_ids(), [1]);
        let min = estimate_popularity(&log, Retention::MinRequests { min_requests: 10 }).unwrap();
        assert_eq!(min.file_ids(), [1, 2, 3]);
        assert!(estimate_popularity(&log, Retention::MinRequests { min_requests: 100 }).is_err());
        assert!(estimate_popularity(&log, Retention::TopFraction { keep_fraction: 0.0 }).is_err());
        assert!(estimate_popularity(&RequestLog::default(), Retention::default()).is_err());
    }

    #[test]
    fn empty_period_becomes_uniform() {
        let mut log = RequestLog::from_events([(0, 1), (0, 2), (2, 1)]);
        log.ensure_periods(4);
        let s = estimate_popularity(&log, Retention::TopFraction { keep_fraction: 1.0 }).unwrap();
        assert_eq!(s.num_periods(), 4);
        assert_eq!(s.periods()[1].as_slice(), [0.5, 0.5]);
        assert_eq!(s.periods()[2].as_slice(), [1.0, 0.0]);
        assert_eq!(s.periods()[3].as_slice(), [0.5, 0.5]);
    }

    /// Multinomial draws of 10⁶ requests per period land within three
    /// binomial standard errors of the generating vector.
    #[test]
    fn estimates_concentrate_on_the_generating_popularity() {
        let p = [0.4, 0.25, 0.2, 0.1, 0.05];
        let n = 1_000_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut log = RequestLog::default();
        for t in 0..2 {
            let mut left = n;
            let mut mass: f64 = 1.0;
            for (id, &pf) in p.iter().enumerate() {
                let pf: f64 = pf;
                let k = if id + 1 == p.len() {
                    left
                } else {
                    rand_distr::Binomial::new(left, (pf / mass).min(1.0))
                        .unwrap()
                        .sample(&mut rng)
                };
                log.add(t, id as u64, k);
                left -= k;
                mass -= pf;
            }
        }
        let s = estimate_popularity(&log, Retention::TopFraction { keep_fraction: 1.0 }).unwrap();
        for row in s.periods() {
            for (est, &pf) in row.as_slice().iter().zip(&p) {
                let se = (pf * (1.0 - pf) / n as f64).sqrt();
                assert!((est - pf).abs() <= 3.0 * se, "{est} vs {pf}");
            }
        }
    }

    #[test]
    fn request_log_csv_round_trip() {
        let log = RequestLog::from_events([(0, 3), (1, 3), (1, 9), (1, 3), (2, 1)]);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("period,file_id\n0,3\n"));
        assert_eq!(RequestLog::read_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn series_csv_round_trip() {
        let s = series(&[&[0.5, 0.5], &[0.1, 0.9], &[1.0, 0.0]]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("period,file_id,prob\n0,0,0.5\n"));
        assert_eq!(PopularitySeries::read_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn record_count_and_contents() {
        let z = gen_zipf(3, 1.0, 86).unwrap();
        let recs = build_records(&z, 5).unwrap();
        assert_eq!(recs.len(), 81 * 3);
        assert_eq!(recs.iter().filter(|r| r.file_id == 0).count(), 81);

        let s = series(&[&[0.1, 0.9], &[0.2, 0.8], &[0.3, 0.7]]);
        let recs = build_records(&s, 2).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].values, [0.3, 0.2, 0.1]);
        assert_eq!(recs[1].values, [0.7, 0.8, 0.9]);
        assert_eq!(recs[1].period, 2);
        assert!(build_records(&s, 3).is_err());
        assert!(build_records(&s, 0).is_err());
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let recs = build_records(&gen_zipf(10, 1.0, 12).unwrap(), 2).unwrap();
        let (a, b) = split_records(&recs, 0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(split_records(&recs, 0.8, 5).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<_> = a.iter().chain(&b).map(|r| (r.period, r.file_id)).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn repeat_sampling() {
        let s = series(&[&[0.1, 0.2, 0.7], &[0.3, 0.3, 0.4], &[0.5, 0.25, 0.25]]);
        let recs = build_records(&s, 1).unwrap();
        assert!(repeat_sample(&recs, 2, 0, 1).unwrap().is_empty());
        assert!(repeat_sample(&recs, 7, 1, 1).is_err());
        let all = repeat_sample(&recs, 6, 4, 9).unwrap();
        for sample in &all {
            let mut t: Vec<f64> = sample.target.as_slice().to_vec();
            t.sort_by(f64::total_cmp);
            // Both positions' targets, each renormalized by the pooled mass of 2.
            let mut expect: Vec<f64> = [0.3, 0.3, 0.4, 0.5, 0.25, 0.25].iter().map(|v| v / 2.0).collect();
            expect.sort_by(f64::total_cmp);
            for (a, b) in t.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(
            repeat_sample(&recs, 2, 10, 9).unwrap(),
            repeat_sample(&recs, 2, 10, 9).unwrap()
        );
        assert_ne!(
            repeat_sample(&recs, 2, 10, 9).unwrap(),
            repeat_sample(&recs, 2, 10, 8).unwrap()
        );
    }

    #[test]
    fn ranking_rules() {
        let target = PopularityVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        let h = HistoryWindow::from_rows(vec![vec![0.2, 0.2, 0.6], vec![0.5, 0.4, 0.1]]).unwrap();
        let s = TrainingSample::new(target, h).unwrap();
        let r = rank_for_training(&s, RankMode::ByPreviousPeriod);
        // Tie between columns 0 and 1 keeps column 0 first.
        assert_eq!(r.history.newest().as_slice(), [0.6, 0.2, 0.2]);
        assert_eq!(r.history.rows()[1].as_slice(), [0.1, 0.5, 0.4]);
        assert_eq!(r.target.as_slice(), [0.3, 0.1, 0.6]);
        assert_eq!(rank_for_training(&r, RankMode::ByPreviousPeriod), r);
        let t = rank_for_training(&s, RankMode::ByTarget);
        assert_eq!(t.target.as_slice(), [0.6, 0.3, 0.1]);
        assert_eq!(t.history.newest().as_slice(), [0.2, 0.6, 0.2]);
    }

    #[test]
    fn zipf_examples() {
        let u = gen_zipf(4, 0.0, 2).unwrap();
        assert!(u.periods().iter().all(|p| p.as_slice() == [0.25; 4]));
        let z = gen_zipf(2, 1.0, 1).unwrap();
        let p = z.periods()[0].as_slice();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(gen_zipf(3, -1.0, 1).is_err());
    }

    #[test]
    fn shot_noise_fast_decay_makes_each_file_popular_once() {
        let params = ShotNoiseParams {
            lifespan_decay: 50.0,
            arrival_rate: 3.0,
            num_periods: 12,
            ..ShotNoiseParams::default()
        };
        let tr = gen_shot_noise(&params, 4).unwrap();
        for (t, p) in tr.series.periods().iter().enumerate() {
            let fresh: f64 = p
                .as_slice()
                .iter()
                .zip(&tr.arrivals)
                .filter(|(_, &a)| a == t)
                .map(|(v, _)| v)
                .sum();
            if tr.arrivals.contains(&t) {
                assert!(fresh > 1.0 - 1e-9, "period {t}: fresh mass {fresh}");
            }
        }
    }

    #[test]
    fn shot_noise_single_file() {
        let params = ShotNoiseParams {
            num_files_cap: 1,
            num_periods: 6,
            ..ShotNoiseParams::default()
        };
        let tr = gen_shot_noise(&params, 2).unwrap();
        assert_eq!(tr.arrivals, [0]);
        assert!(tr.series.periods().iter().all(|p| p.as_slice() == [1.0]));
    }

    #[test]
    fn shot_noise_log_tracks_intensities() {
        let params = ShotNoiseParams {
            volume_pareto_scale: 2e6,
            num_periods: 4,
            arrival_rate: 2.0,
            lifespan_decay: 0.5,
            ..ShotNoiseParams::default()
        };
        let tr = gen_shot_noise(&params, 11).unwrap();
        let est = estimate_popularity(&tr.log, Retention::TopFraction { keep_fraction: 1.0 }).unwrap();
        assert_eq!(est.file_ids(), tr.series.file_ids());
        for (e, p) in est.periods().iter().zip(tr.series.periods()) {
            for (a, b) in e.as_slice().iter().zip(p.as_slice()) {
                // Poisson counts around ≥10⁶ requests per period: the
                // normalized share has standard error below √(b/10⁶).
                let se = (b.max(1e-12) / 1e6).sqrt();
                assert!((a - b).abs() <= 4.0 * se + 1e-9, "{a} vs {b}");
            }
        }
        assert_eq!(gen_shot_noise(&params, 11).unwrap(), tr);
    }

    #[test]
    fn shot_noise_validation() {
        let bad = ShotNoiseParams {
            lifespan_decay: 0.0,
            ..ShotNoiseParams::default()
        };
        assert!(gen_shot_noise(&bad, 0).is_err());
    }

    #[test]
    fn sample_bundle_round_trip() {
        let recs = build_records(&gen_zipf(6, 0.8, 5).unwrap(), 3).unwrap();
        let samples = repeat_sample(&recs, 4, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), samples);
    }

    proptest! {
        #[test]
        fn repeat_samples_have_unit_rows(seed in 0u64..1000, f in 1usize..6, tau in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let periods = (0..tau + 3)
                .map(|_| {
                    let w: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
                    PopularityVector::from_weights(&w).unwrap()
                })
                .collect();
            let s = PopularitySeries::new((0..8).collect(), periods).unwrap();
            let recs = build_records(&s, tau).unwrap();
            for sample in repeat_sample(&recs, f, 5, seed).unwrap() {
                for row in std::iter::once(&sample.target).chain(sample.history.rows()) {
                    let sum: f64 = row.as_slice().iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!(row.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }

        #[test]
        fn ranking_moves_whole_columns(seed in 0u64..1000, f in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut row = || {
                let w: Vec<f64> = (0..f).map(|_| rng.random::<f64>()).collect();
                PopularityVector::from_weights(&w).unwrap()
            };
            let target = row();
            let h = HistoryWindow::new(vec![row(), row(), row()]).unwrap();
            let s = TrainingSample::new(target, h).unwrap();
            let r = rank_for_training(&s, RankMode::ByPreviousPeriod);
            let column = |s: &TrainingSample, j: usize| -> Vec<f64> {
                std::iter::once(&s.target).chain(s.history.rows()).map(|p| p.as_slice()[j]).collect()
            };
            let order = descending_order(s.history.newest().as_slice());
            for (new_j, &old_j) in order.iter().enumerate() {
                prop_assert_eq!(column(&r, new_j), column(&s, old_j));
            }
            let mut rev = s.clone();
            let flip = |p: &PopularityVector| PopularityVector::new(p.as_slice().iter().rev().copied().collect()).unwrap();
            rev.target = flip(&s.target);
            rev.history = HistoryWindow::new(s.history.rows().iter().map(flip).collect()).unwrap();
            // Distinct continuous draws: no ties, so ranking forgets the column order.
            prop_assert_eq!(rank_for_training(&rev, RankMode::ByPreviousPeriod), r);
        }
    }
}
