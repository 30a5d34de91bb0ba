//! Primal-dual unsupervised learning of the proactive policy.
//!
//! Four fully-connected networks read the flattened popularity history
//! `h` and emit the bandwidth factor β̃(h), caching probabilities q̃(h) and
//! the multipliers ξ̃_c(h), ξ̃_f(h). Training maximizes the sample-averaged
//! Lagrangian
//!
//! ```text
//! L = sop(p, β̃, q̃) − ξ̃_c (Σ q̃ − C) − Σ_f ξ̃_f (q̃_f − 1)
//! ```
//!
//! over the primal networks (ascent) and minimizes it over the multiplier
//! networks (descent), so the learned map never needs popularity labels.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{self, NetworkConfig, Policy, PopularityVector};
use crate::error::{Error, Result};
use crate::neural::{Activation, Direction, LrSchedule, Mlp, MlpSpec, Trace};
use crate::solver::BETA_MIN;

/// Row-sum tolerance for history rows built from renormalized estimates.
pub const HISTORY_SUM_TOL: f64 = 1e-6;

/// τ past popularity vectors, newest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    rows: Vec<PopularityVector>,
}

impl HistoryWindow {
    pub fn new(rows: Vec<PopularityVector>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("history window needs at least one period"))?;
        let f = first.len();
        if let Some(r) = rows.iter().find(|r| r.len() != f) {
            return Err(Error::dim(f, r.len(), "history row length"));
        }
        Ok(Self { rows })
    }

    /// Validates raw rows at the history tolerance.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            rows.into_iter()
                .map(|r| PopularityVector::with_tolerance(r, HISTORY_SUM_TOL))
                .collect::<Result<_>>()?,
        )
    }

    pub fn tau(&self) -> usize {
        self.rows.len()
    }

    pub fn num_files(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[PopularityVector] {
        &self.rows
    }

    /// Most recent period.
    pub fn newest(&self) -> &PopularityVector {
        &self.rows[0]
    }

    /// Row-major τ×F input vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect()
    }
}

/// One realization of (future popularity, observed history).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub target: PopularityVector,
    pub history: HistoryWindow,
}

impl TrainingSample {
    pub fn new(target: PopularityVector, history: HistoryWindow) -> Result<Self> {
        if target.len() != history.num_files() {
            return Err(Error::dim(history.num_files(), target.len(), "target vs history"));
        }
        Ok(Self { target, history })
    }

    /// The known-future variant: the "history" is the realized target itself.
    pub fn known_future(&self) -> Self {
        Self {
            target: self.target.clone(),
            history: HistoryWindow {
                rows: vec![self.target.clone()],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub xi_c: f64,
    pub xi_f: Vec<f64>,
}

impl MultiplierSet {
    pub fn new(xi_c: f64, xi_f: Vec<f64>) -> Result<Self> {
        if !(xi_c >= 0.0) || xi_f.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("multipliers must be non-negative"));
        }
        Ok(Self { xi_c, xi_f })
    }

    pub fn zeros(num_files: usize) -> Self {
        Self {
            xi_c: 0.0,
            xi_f: vec![0.0; num_files],
        }
    }
}

/// Upstream signal for a caching-probability head under an ascent step. A
/// probability already at zero keeps only the part that would raise it.
fn primal_upstream(value: f64, dl_dq: f64) -> f64 {
    if value <= 0.0 && dl_dq < 0.0 {
        0.0
    } else {
        dl_dq
    }
}

/// Upstream signal for a multiplier head under a descent step. A multiplier
/// already at zero keeps only the part of the signal that would raise it.
fn dual_upstream(multiplier: f64, dl_dxi: f64) -> f64 {
    if multiplier <= 0.0 && dl_dxi > 0.0 {
        0.0
    } else {
        dl_dxi
    }
}

fn penalty(q: &[f64], cap: f64, xi_c: f64, xi_f: &[f64]) -> f64 {
    let mass: f64 = q.iter().sum();
    xi_c * (mass - cap) + xi_f.iter().zip(q).map(|(x, v)| x * (v - 1.0)).sum::<f64>()
}

/// `sop(p, policy) − ξ_c(Σq − C) − Σ_f ξ_f(q_f − 1)`.
pub fn lagrangian(p: &PopularityVector, policy: &Policy, mult: &MultiplierSet, cfg: &NetworkConfig) -> Result<f64> {
    if mult.xi_f.len() != policy.q.len() {
        return Err(Error::dim(policy.q.len(), mult.xi_f.len(), "xi_f"));
    }
    let s = analytics::sop(p, policy, cfg)?;
    Ok(s - penalty(&policy.q, cfg.capacity(), mult.xi_c, &mult.xi_f))
}

/// Hidden-layer widths of the four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub q_hidden: Vec<usize>,
    pub beta_hidden: Vec<usize>,
    pub xi_c_hidden: Vec<usize>,
    pub xi_f_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            q_hidden: vec![300, 200, 100],
            beta_hidden: vec![200],
            xi_c_hidden: vec![200],
            xi_f_hidden: vec![200, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            lr: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        self.lr.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProactiveModel {
    pub beta_net: Mlp,
    pub q_net: Mlp,
    pub xi_c_net: Mlp,
    pub xi_f_net: Mlp,
    num_files: usize,
    tau: usize,
    /// Updates applied so far; drives the learning-rate schedule.
    pub iteration: u64,
}

/// Policy read off the networks, before and after the feasibility projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub raw_beta: f64,
    pub raw_q: Vec<f64>,
    pub policy: Policy,
}

impl Decision {
    /// `max(0, Σq̃ − C)` before projection.
    pub fn capacity_violation(&self, capacity: f64) -> f64 {
        (self.raw_q.iter().sum::<f64>() - capacity).max(0.0)
    }
}

/// Clip q to [0,1], then scale down uniformly if the cached mass exceeds C.
pub fn project_policy(raw_q: &[f64], raw_beta: f64, capacity: f64) -> Result<Policy> {
    let mut q: Vec<f64> = raw_q.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mass: f64 = q.iter().sum();
    if mass > capacity {
        let s = capacity / mass;
        q.iter_mut().for_each(|v| *v *= s);
    }
    Policy::new(q, raw_beta.clamp(BETA_MIN, 1.0))
}

impl ProactiveModel {
    pub fn new(num_files: usize, tau: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        let input = num_files * tau;
        // Distinct, fixed streams per network.
        let s = |k: u64| seed.wrapping_mul(4).wrapping_add(k);
        Ok(Self {
            beta_net: Mlp::init(MlpSpec::new(input, &arch.beta_hidden, 1, Activation::Sigmoid, s(0)))?,
            q_net: Mlp::init(MlpSpec::new(input, &arch.q_hidden, num_files, Activation::Relu, s(1)))?,
            xi_c_net: Mlp::init(MlpSpec::new(input, &arch.xi_c_hidden, 1, Activation::Relu, s(2)))?,
            xi_f_net: Mlp::init(MlpSpec::new(
                input,
                &arch.xi_f_hidden,
                num_files,
                Activation::Relu,
                s(3),
            ))?,
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

    pub fn multipliers(&self, h: &HistoryWindow) -> Result<MultiplierSet> {
        self.check_history(h)?;
        let x = h.flatten();
        Ok(MultiplierSet {
            xi_c: self.xi_c_net.forward(&x)?[0],
            xi_f: self.xi_f_net.forward(&x)?,
        })
    }

    /// Forward pass plus the feasibility projection.
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

    pub fn write_checkpoint<W: Write>(&self, cfg: &NetworkConfig, w: W) -> Result<()> {
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            num_files: self.num_files,
            tau: self.tau,
            config_hash: config_hash(cfg),
            iteration: self.iteration,
            beta_net: self.beta_net.to_json(),
            q_net: self.q_net.to_json(),
            xi_c_net: self.xi_c_net.to_json(),
            xi_f_net: self.xi_f_net.to_json(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    /// Loads a checkpoint, refusing one written for a different config.
    pub fn read_checkpoint<R: Read>(cfg: &NetworkConfig, r: R) -> Result<Self> {
        let file: Checkpoint = serde_json::from_reader(r)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
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
            xi_c_net: Mlp::from_json(file.xi_c_net)?,
            xi_f_net: Mlp::from_json(file.xi_f_net)?,
            num_files: file.num_files,
            tau: file.tau,
            iteration: file.iteration,
        };
        let input = file.num_files * file.tau;
        for net in [&model.beta_net, &model.q_net, &model.xi_c_net, &model.xi_f_net] {
            if net.input_dim() != input {
                return Err(Error::dim(input, net.input_dim(), "checkpoint network input"));
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "femtocache-proactive";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    num_files: usize,
    tau: usize,
    config_hash: String,
    iteration: u64,
    beta_net: serde_json::Value,
    q_net: serde_json::Value,
    xi_c_net: serde_json::Value,
    xi_f_net: serde_json::Value,
}

/// SHA-256 of the JSON-serialized config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

/// Sample-averaged Lagrangian gradients for the four networks, each
/// oriented as ∂L/∂θ.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub beta: Vec<f64>,
    pub q: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub xi_f: Vec<f64>,
    /// Batch-mean Lagrangian at the current parameters.
    pub lagrangian: f64,
    /// Batch-mean closed-form SOP of the raw outputs.
    pub sop: f64,
}

impl BatchGradients {
    fn zeros(m: &ProactiveModel) -> Self {
        Self {
            beta: vec![0.0; m.beta_net.param_count()],
            q: vec![0.0; m.q_net.param_count()],
            xi_c: vec![0.0; m.xi_c_net.param_count()],
            xi_f: vec![0.0; m.xi_f_net.param_count()],
            lagrangian: 0.0,
            sop: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        let pairs = [
            (&mut self.beta, &other.beta),
            (&mut self.q, &other.q),
            (&mut self.xi_c, &other.xi_c),
            (&mut self.xi_f, &other.xi_f),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.lagrangian += other.lagrangian;
        self.sop += other.sop;
    }
}

struct Forward {
    x: Vec<f64>,
    beta: Trace,
    q: Trace,
    xi_c: Trace,
    xi_f: Trace,
}

impl ProactiveModel {
    fn forward_all(&self, h: &HistoryWindow) -> Result<Forward> {
        self.check_history(h)?;
        let x = h.flatten();
        Ok(Forward {
            beta: self.beta_net.forward_trace(&x)?,
            q: self.q_net.forward_trace(&x)?,
            xi_c: self.xi_c_net.forward_trace(&x)?,
            xi_f: self.xi_f_net.forward_trace(&x)?,
            x,
        })
    }

    /// Lagrangian of one sample at the raw network outputs. β̃ is floored
    /// at [`BETA_MIN`] before entering the closed form.
    pub fn sample_lagrangian(&self, sample: &TrainingSample, cfg: &NetworkConfig) -> Result<f64> {
        let fw = self.forward_all(&sample.history)?;
        let beta = fw.beta.output()[0].max(BETA_MIN);
        let q = fw.q.output();
        let eval = analytics::sop_eval_raw(sample.target.as_slice(), q, beta, cfg)?;
        Ok(eval.value - penalty(q, cfg.capacity(), fw.xi_c.output()[0], fw.xi_f.output()))
    }

    pub fn batch_lagrangian(&self, batch: &[&TrainingSample], cfg: &NetworkConfig) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            total += self.sample_lagrangian(s, cfg)?;
        }
        Ok(total / batch.len() as f64)
    }

    fn accumulate_sample(
        &self,
        sample: &TrainingSample,
        cfg: &NetworkConfig,
        scale: f64,
        acc: &mut BatchGradients,
    ) -> Result<()> {
        let fw = self.forward_all(&sample.history)?;
        for (name, t) in [("beta", &fw.beta), ("q", &fw.q), ("xi_c", &fw.xi_c), ("xi_f", &fw.xi_f)] {
            if t.output().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    batch: 0,
                    detail: format!("{name} network produced a non-finite output"),
                });
            }
        }
        let raw_beta = fw.beta.output()[0];
        let clamped = raw_beta < BETA_MIN;
        let beta = raw_beta.max(BETA_MIN);
        let q = fw.q.output();
        let xi_c = fw.xi_c.output()[0];
        let xi_f = fw.xi_f.output();
        let cap = cfg.capacity();
        let eval = analytics::sop_eval_raw(sample.target.as_slice(), q, beta, cfg)?;
        let mass: f64 = q.iter().sum();

        let up_q: Vec<f64> = eval
            .grad_q
            .iter()
            .zip(xi_f)
            .zip(q)
            .map(|((g, xf), &v)| primal_upstream(v, g - xi_c - xf))
            .collect();
        let up_beta = [if clamped { 0.0 } else { eval.grad_beta }];
        let up_xi_c = [dual_upstream(xi_c, -(mass - cap))];
        let up_xi_f: Vec<f64> = q.iter().zip(xi_f).map(|(v, &x)| dual_upstream(x, -(v - 1.0))).collect();

        self.q_net
            .accumulate_gradient_through_output(&fw.q, &up_q, scale, &mut acc.q)?;
        self.beta_net
            .accumulate_gradient(&fw.beta, &up_beta, scale, &mut acc.beta)?;
        // The relu heads (q and both multipliers) take projected steps on the
        // output pre-activation. A plain relu derivative would freeze an
        // output at zero for good, e.g. a multiplier the first time its
        // constraint had slack.
        self.xi_c_net
            .accumulate_gradient_through_output(&fw.xi_c, &up_xi_c, scale, &mut acc.xi_c)?;
        self.xi_f_net
            .accumulate_gradient_through_output(&fw.xi_f, &up_xi_f, scale, &mut acc.xi_f)?;
        acc.lagrangian += scale * (eval.value - penalty(q, cap, xi_c, xi_f));
        acc.sop += scale * eval.value;
        debug_assert_eq!(fw.x.len(), self.num_files * self.tau);
        Ok(())
    }

    /// ∂(batch-mean L)/∂θ for every network.
    pub fn batch_gradients(&self, batch: &[&TrainingSample], cfg: &NetworkConfig) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        // Fixed-size chunks summed in order keep the result independent of
        // how many threads run them.
        const CHUNK: usize = 8;
        let chunk_grad = |chunk: &[&TrainingSample]| -> Result<BatchGradients> {
            let mut acc = BatchGradients::zeros(self);
            for s in chunk {
                self.accumulate_sample(s, cfg, scale, &mut acc)?;
            }
            Ok(acc)
        };
        #[cfg(feature = "parallel")]
        let parts: Vec<Result<BatchGradients>> = {
            use rayon::prelude::*;
            batch.par_chunks(CHUNK).map(chunk_grad).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Result<BatchGradients>> = batch.chunks(CHUNK).map(chunk_grad).collect();

        let mut total = BatchGradients::zeros(self);
        for part in parts {
            total.add(&part?);
        }
        Ok(total)
    }

    /// Primal ascent and dual descent with the shared schedule at the
    /// model's current iteration; advances the iteration counter.
    pub fn apply_gradients(&mut self, g: &BatchGradients, lr: &LrSchedule) -> Result<()> {
        let i = self.iteration;
        self.beta_net.sgd_step(&g.beta, lr, i, Direction::Ascent)?;
        self.q_net.sgd_step(&g.q, lr, i, Direction::Ascent)?;
        self.xi_c_net.sgd_step(&g.xi_c, lr, i, Direction::Descent)?;
        self.xi_f_net.sgd_step(&g.xi_f, lr, i, Direction::Descent)?;
        self.iteration += 1;
        Ok(())
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_lagrangian: f64,
    pub mean_sop: f64,
}

fn check_samples(samples: &[TrainingSample], f: usize, tau: usize) -> Result<()> {
    for s in samples {
        if s.target.len() != f || s.history.num_files() != f {
            return Err(Error::dim(f, s.history.num_files(), "sample file count"));
        }
        if s.history.tau() != tau {
            return Err(Error::dim(tau, s.history.tau(), "sample window length"));
        }
    }
    Ok(())
}

/// Builds a model with the default architecture and trains it.
pub fn train(samples: &[TrainingSample], cfg: &NetworkConfig, opts: &TrainOptions) -> Result<ProactiveModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one sample"))?;
    let model = ProactiveModel::new(
        first.target.len(),
        first.history.tau(),
        &Architecture::default(),
        opts.seed,
    )?;
    Ok(train_model(model, samples, cfg, opts)?.0)
}

/// Continues training `model` for `opts.epochs` epochs over shuffled batches.
pub fn train_model(
    mut model: ProactiveModel,
    samples: &[TrainingSample],
    cfg: &NetworkConfig,
    opts: &TrainOptions,
) -> Result<(ProactiveModel, Vec<EpochStats>)> {
    cfg.validate()?;
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    check_samples(samples, model.num_files, model.tau)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(opts.seed);
    let mut stats = Vec::with_capacity(opts.epochs);
    let mut batch_index = 0usize;
    for epoch in 0..opts.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut lag, mut sop, mut n) = (0.0, 0.0, 0usize);
        for idx in order.chunks(opts.batch_size) {
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let g = model.batch_gradients(&batch, cfg).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    batch: batch_index,
                    detail: format!("{detail} in epoch {epoch}"),
                },
                other => other,
            })?;
            if !g.lagrangian.is_finite() {
                return Err(Error::NonFinite {
                    batch: batch_index,
                    detail: format!("Lagrangian = {} in epoch {epoch}", g.lagrangian),
                });
            }
            model.apply_gradients(&g, &opts.lr)?;
            lag += g.lagrangian * batch.len() as f64;
            sop += g.sop * batch.len() as f64;
            n += batch.len();
            batch_index += 1;
        }
        stats.push(EpochStats {
            epoch,
            mean_lagrangian: lag / n as f64,
            mean_sop: sop / n as f64,
        });
        log::debug!("epoch {epoch}: L = {:.6}, sop = {:.6}", lag / n as f64, sop / n as f64);
    }
    Ok((model, stats))
}

/// One online update with a single observation at iteration `iter`.
pub fn train_online_step(
    mut model: ProactiveModel,
    latest: &TrainingSample,
    cfg: &NetworkConfig,
    opts: &TrainOptions,
    iter: u64,
) -> Result<ProactiveModel> {
    opts.lr.validate()?;
    check_samples(std::slice::from_ref(latest), model.num_files, model.tau)?;
    let g = model.batch_gradients(&[latest], cfg)?;
    if !g.lagrangian.is_finite() {
        return Err(Error::NonFinite {
            batch: 0,
            detail: format!("online Lagrangian = {}", g.lagrangian),
        });
    }
    model.iteration = iter;
    model.apply_gradients(&g, &opts.lr)?;
    Ok(model)
}

/// Mean closed-form SOP of the projected decisions against each sample's target.
pub fn mean_sop(model: &ProactiveModel, samples: &[TrainingSample], cfg: &NetworkConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let d = model.decide(&s.history, cfg)?;
        total += analytics::sop(&s.target, &d.policy, cfg)?;
    }
    Ok(total / samples.len().max(1) as f64)
}
