//! Comparison strategies.
//!
//! * **Sup**: networks with the same shape as the proactive β and q networks,
//!   regressed onto static-solver labels.
//! * **Preopt**: a linear popularity predictor followed by the static solver.
//!
//! The known-future variants reuse the same code with
//! [`TrainingSample::known_future`] as input.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analytics::{NetworkConfig, Policy, PopularityVector};
use crate::data::FileRecord;
use crate::error::{Error, Result};
use crate::neural::{Activation, Direction, Mlp, MlpSpec};
use crate::proactive::{
    config_hash, project_policy, Architecture, Decision, HistoryWindow, TrainOptions, TrainingSample,
};
use crate::solver::{solve_p0, P0Solution, SolverOptions};

/// A history paired with the static-solver optimum for its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSample {
    pub input: HistoryWindow,
    pub label: Policy,
    /// Whether the solver met its tolerance for this label.
    pub converged: bool,
}

fn solve_labels(samples: &[TrainingSample], cfg: &NetworkConfig, opts: &SolverOptions) -> Result<Vec<P0Solution>> {
    let solve = |s: &TrainingSample| solve_p0(&s.target, cfg, opts);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(solve).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(solve).collect()
    }
}

/// Labels every sample with `solve_p0` on its target popularity.
pub fn make_labels(
    samples: &[TrainingSample],
    cfg: &NetworkConfig,
    opts: &SolverOptions,
) -> Result<Vec<SupervisedSample>> {
    let solutions = solve_labels(samples, cfg, opts)?;
    let out: Vec<SupervisedSample> = samples
        .iter()
        .zip(solutions)
        .map(|(s, sol)| SupervisedSample {
            input: s.history.clone(),
            label: sol.policy,
            converged: sol.converged,
        })
        .collect();
    let failed = out.iter().filter(|s| !s.converged).count();
    if failed > 0 {
        log::warn!("{failed} of {} labels did not reach the solver tolerance", out.len());
    }
    Ok(out)
}

/// Rebuilds labelled samples from cached labels, in sample order.
pub fn attach_labels(samples: &[TrainingSample], labels: &[CachedLabel]) -> Result<Vec<SupervisedSample>> {
    if labels.len() != samples.len() {
        return Err(Error::dim(samples.len(), labels.len(), "cached labels"));
    }
    samples
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, l))| {
            if l.sample != i {
                return Err(Error::invalid(format!("label cache row {i} holds sample {}", l.sample)));
            }
            if l.policy.q.len() != s.target.len() {
                return Err(Error::dim(s.target.len(), l.policy.q.len(), "cached label length"));
            }
            Ok(SupervisedSample {
                input: s.history.clone(),
                label: l.policy.clone(),
                converged: l.converged,
            })
        })
        .collect()
}

/// One row of the label cache.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedLabel {
    pub sample: usize,
    pub policy: Policy,
    pub converged: bool,
}

/// Writes CSV `sample,beta,converged,q_0,…,q_{F−1}`.
pub fn write_label_cache<W: Write>(writer: W, labels: &[SupervisedSample]) -> Result<()> {
    let f = labels.first().map_or(0, |l| l.label.q.len());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header = vec!["sample".to_string(), "beta".into(), "converged".into()];
    header.extend((0..f).map(|j| format!("q_{j}")));
    w.write_record(&header)?;
    for (i, l) in labels.iter().enumerate() {
        let mut row = vec![i.to_string(), l.label.beta.to_string(), l.converged.to_string()];
        row.extend(l.label.q.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a label cache written by [`write_label_cache`].
pub fn read_label_cache<R: Read>(reader: R) -> Result<Vec<CachedLabel>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::invalid("short label cache row"));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad number in label cache column {i}")))
        };
        let sample = field(0)?
            .parse()
            .map_err(|_| Error::invalid("bad sample id in label cache"))?;
        let converged = field(2)?
            .parse()
            .map_err(|_| Error::invalid("bad converged flag in label cache"))?;
        let q = (3..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        out.push(CachedLabel {
            sample,
            policy: Policy::new(q, num(1)?)?,
            converged,
        });
    }
    Ok(out)
}

/// The supervised β and q networks.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel {
    pub beta_net: Mlp,
    pub q_net: Mlp,
    num_files: usize,
    tau: usize,
    pub iteration: u64,
}

impl SupervisedModel {
    /// Same shapes and seeding as the proactive β and q networks.
    pub fn new(num_files: usize, tau: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        let input = num_files * tau;
        let s = |k: u64| seed.wrapping_mul(4).wrapping_add(k);
        Ok(Self {
            beta_net: Mlp::init(MlpSpec::new(input, &arch.beta_hidden, 1, Activation::Sigmoid, s(0)))?,
            q_net: Mlp::init(MlpSpec::new(input, &arch.q_hidden, num_files, Activation::Relu, s(1)))?,
            num_files,
            tau,
            iteration: 0,
        })
    }

    pub fn num_files(&self) -> usize {
        self.num_files
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    fn check_history(&self, h: &HistoryWindow) -> Result<()> {
        if h.num_files() != self.num_files {
            return Err(Error::dim(self.num_files, h.num_files(), "history files"));
        }
        if h.tau() != self.tau {
            return Err(Error::dim(self.tau, h.tau(), "history window length"));
        }
        Ok(())
    }

    /// Forward pass plus the same feasibility projection as the proactive model.
    pub fn decide(&self, h: &HistoryWindow, cfg: &NetworkConfig) -> Result<Decision> {
        self.check_history(h)?;
        let x = h.flatten();
        let raw_beta = self.beta_net.forward(&x)?[0];
        let raw_q = self.q_net.forward(&x)?;
        let policy = project_policy(&raw_q, raw_beta, cfg.capacity())?;
        Ok(Decision {
            raw_beta,
            raw_q,
            policy,
        })
    }

    /// Mean over `samples` of `(β̃ − β*)² + Σ_f (q̃_f − q*_f)²`.
    pub fn mse(&self, samples: &[SupervisedSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            self.check_history(&s.input)?;
            let x = s.input.flatten();
            total += sample_loss(self.beta_net.forward(&x)?[0], &self.q_net.forward(&x)?, &s.label);
        }
        Ok(total / samples.len().max(1) as f64)
    }

    fn batch_step(&mut self, batch: &[&SupervisedSample], opts: &TrainOptions) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut g_beta = vec![0.0; self.beta_net.param_count()];
        let mut g_q = vec![0.0; self.q_net.param_count()];
        let mut loss = 0.0;
        for s in batch {
            self.check_history(&s.input)?;
            let x = s.input.flatten();
            let tb = self.beta_net.forward_trace(&x)?;
            let tq = self.q_net.forward_trace(&x)?;
            let beta = tb.output()[0];
            let q = tq.output();
            loss += scale * sample_loss(beta, q, &s.label);
            self.beta_net
                .accumulate_gradient(&tb, &[2.0 * (beta - s.label.beta)], scale, &mut g_beta)?;
            // Projected step on the relu head, as in the proactive q network:
            // an output stuck at zero still rises toward a positive label.
            let up: Vec<f64> = q
                .iter()
                .zip(&s.label.q)
                .map(|(&v, &t)| {
                    let g = 2.0 * (v - t);
                    if v <= 0.0 && g > 0.0 {
                        0.0
                    } else {
                        g
                    }
                })
                .collect();
            self.q_net
                .accumulate_gradient_through_output(&tq, &up, scale, &mut g_q)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                batch: 0,
                detail: format!("supervised loss = {loss}"),
            });
        }
        self.beta_net
            .sgd_step(&g_beta, &opts.lr, self.iteration, Direction::Descent)?;
        self.q_net
            .sgd_step(&g_q, &opts.lr, self.iteration, Direction::Descent)?;
        self.iteration += 1;
        Ok(loss)
    }

    pub fn write_checkpoint<W: Write>(&self, cfg: &NetworkConfig, w: W) -> Result<()> {
        serde_json::to_writer(
            w,
            &SupCheckpoint {
                format: SUP_FORMAT.into(),
                version: 1,
                num_files: self.num_files,
                tau: self.tau,
                config_hash: config_hash(cfg),
                iteration: self.iteration,
                beta_net: self.beta_net.to_json(),
                q_net: self.q_net.to_json(),
            },
        )?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(cfg: &NetworkConfig, r: R) -> Result<Self> {
        let file: SupCheckpoint = serde_json::from_reader(r)?;
        if file.format != SUP_FORMAT || file.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.config_hash != config_hash(cfg) {
            return Err(Error::invalid(
                "checkpoint was trained under a different network config",
            ));
        }
        let model = Self {
            beta_net: Mlp::from_json(file.beta_net)?,
            q_net: Mlp::from_json(file.q_net)?,
            num_files: file.num_files,
            tau: file.tau,
            iteration: file.iteration,
        };
        let input = file.num_files * file.tau;
        for net in [&model.beta_net, &model.q_net] {
            if net.input_dim() != input {
                return Err(Error::dim(input, net.input_dim(), "checkpoint network input"));
            }
        }
        Ok(model)
    }
}

const SUP_FORMAT: &str = "femtocache-supervised";

#[derive(Serialize, Deserialize)]
struct SupCheckpoint {
    format: String,
    version: u32,
    num_files: usize,
    tau: usize,
    config_hash: String,
    iteration: u64,
    beta_net: serde_json::Value,
    q_net: serde_json::Value,
}

fn sample_loss(beta: f64, q: &[f64], label: &Policy) -> f64 {
    let qe: f64 = q.iter().zip(&label.q).map(|(a, b)| (a - b) * (a - b)).sum();
    (beta - label.beta) * (beta - label.beta) + qe
}

/// Trains a fresh supervised model; returns it with the per-epoch mean loss.
pub fn train_supervised(
    samples: &[SupervisedSample],
    arch: &Architecture,
    opts: &TrainOptions,
) -> Result<(SupervisedModel, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one sample"))?;
    let model = SupervisedModel::new(first.label.q.len(), first.input.tau(), arch, opts.seed)?;
    train_supervised_model(model, samples, opts)
}

/// Continues training `model` with seeded shuffled mini-batches.
pub fn train_supervised_model(
    mut model: SupervisedModel,
    samples: &[SupervisedSample],
    opts: &TrainOptions,
) -> Result<(SupervisedModel, Vec<f64>)> {
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut batch_index = 0usize;
    for epoch in 0..opts.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<&SupervisedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let loss = model.batch_step(&batch, opts).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    batch: batch_index,
                    detail: format!("{detail} in epoch {epoch}"),
                },
                other => other,
            })?;
            total += loss * batch.len() as f64;
            batch_index += 1;
        }
        curve.push(total / samples.len() as f64);
    }
    Ok((model, curve))
}

/// Shared-across-files linear model on the τ most recent popularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    /// Weight of `p^{t−k}` at index `k−1`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Smallest singular value, relative to the largest, treated as full rank.
const RANK_TOL: f64 = 1e-10;

impl LinearPredictor {
    /// Predicts the most recent period.
    pub fn persistence(tau: usize) -> Self {
        let mut coefficients = vec![0.0; tau];
        coefficients[0] = 1.0;
        Self {
            coefficients,
            intercept: 0.0,
        }
    }

    pub fn tau(&self) -> usize {
        self.coefficients.len()
    }

    /// Least-squares fit of `p^t` on `[p^{t−1}, …, p^{t−τ}, 1]` over all
    /// records. A rank-deficient design falls back to persistence.
    pub fn fit(records: &[FileRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::invalid("cannot fit a predictor on zero records"))?;
        let tau = first.tau();
        if tau == 0 {
            return Err(Error::invalid("records need at least one lag"));
        }
        if let Some(r) = records.iter().find(|r| r.tau() != tau) {
            return Err(Error::dim(tau, r.tau(), "record window length"));
        }
        let n = records.len();
        let x = DMatrix::from_fn(n, tau + 1, |i, j| if j < tau { records[i].values[j + 1] } else { 1.0 });
        let y = DVector::from_fn(n, |i, _| records[i].values[0]);
        let svd = x.svd(true, true);
        let sv = &svd.singular_values;
        let max = sv.max();
        if n < tau + 1 || !(max > 0.0) || sv.min() <= RANK_TOL * max {
            log::warn!("degenerate design for the linear predictor; using persistence");
            return Ok(Self::persistence(tau));
        }
        let w = svd
            .solve(&y, 0.0)
            .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                batch: 0,
                detail: "linear predictor coefficients".into(),
            });
        }
        Ok(Self {
            coefficients: w.rows(0, tau).iter().copied().collect(),
            intercept: w[tau],
        })
    }

    /// Per-file prediction, clipped at zero and renormalized (uniform if
    /// nothing survives the clip).
    pub fn predict(&self, h: &HistoryWindow) -> Result<PopularityVector> {
        if h.tau() != self.tau() {
            return Err(Error::dim(self.tau(), h.tau(), "history window length"));
        }
        let raw: Vec<f64> = (0..h.num_files())
            .map(|f| {
                let lin: f64 = self
                    .coefficients
                    .iter()
                    .zip(h.rows())
                    .map(|(w, row)| w * row.as_slice()[f])
                    .sum();
                (lin + self.intercept).max(0.0)
            })
            .collect();
        PopularityVector::from_weights(&raw)
    }
}

/// Predict, then solve the static problem as if the prediction were exact.
pub fn preopt_decide(
    predictor: &LinearPredictor,
    h: &HistoryWindow,
    cfg: &NetworkConfig,
    opts: &SolverOptions,
) -> Result<P0Solution> {
    solve_p0(&predictor.predict(h)?, cfg, opts)
}
