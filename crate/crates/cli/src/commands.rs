//! Subcommand implementations. Every command reads and writes files in the
//! output directory and finishes by writing `manifest-<command>.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use femtocache::baselines::{
    attach_labels, make_labels, read_label_cache, train_supervised, write_label_cache, LinearPredictor, SupervisedModel,
};
use femtocache::data::{
    estimate_popularity, gen_shot_noise, gen_zipf, read_samples_csv, split_records, write_samples_csv, FileRecord,
    PopularitySeries, RequestLog, SampleManifest,
};
use femtocache::experiment::{
    evaluate, records_from_series, test_samples_by_period, training_samples, Evaluation, Strategies, GENIE, PREOPT,
    SUP, UNSUP,
};
use femtocache::netsim::{nearest_subband_count, simulate_sop, SimOptions};
use femtocache::proactive::{config_hash, train_model, ProactiveModel, TrainOptions};
use femtocache::solver::{solve_p0, SolverOptions};
use femtocache::{analytics, NetworkConfig, Policy, PopularityVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Source};

pub const POPULARITY: &str = "popularity.csv";
pub const REQUESTS: &str = "requests.csv";
pub const RECORDS_TRAIN: &str = "records_train.json";
pub const RECORDS_TEST: &str = "records_test.json";
pub const TRAIN_SAMPLES: &str = "train_samples.csv";
pub const TRAIN_SAMPLES_MANIFEST: &str = "train_samples.json";
pub const UNSUP_CHECKPOINT: &str = "unsup.json";
pub const SUP_CHECKPOINT: &str = "sup.json";
pub const PREOPT_CHECKPOINT: &str = "preopt.json";
pub const LABELS: &str = "labels.csv";
pub const LABELS_MANIFEST: &str = "labels.json";
pub const EVALUATION: &str = "evaluation.csv";
pub const POLICIES: &str = "policies.csv";
pub const VALIDATION: &str = "validate_approx.csv";
pub const SOLUTION: &str = "solve_static.json";

/// Strategy names in report order.
pub const ALL_STRATEGIES: [&str; 3] = [UNSUP, SUP, PREOPT];

/// Resolved configuration shared by every command.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct OutputEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    outputs: Vec<OutputEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Derives a sub-seed for item `index` of a seeded stage.
fn derive_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index)
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self { cfg, out_dir })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn create(&self, path: &Path) -> Result<BufWriter<File>> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn open(&self, path: &Path, hint: &str) -> Result<BufReader<File>> {
        let f = File::open(path).with_context(|| format!("missing input {}; {hint}", path.display()))?;
        Ok(BufReader::new(f))
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let mut w = self.create(path)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn network(&self) -> &NetworkConfig {
        &self.cfg.network
    }

    fn train_options(&self, epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            seed: self.seed(),
            ..self.cfg.train.clone()
        }
    }

    fn manifest(&self, command: &str, outputs: &[&Path]) -> Result<()> {
        let entries = outputs
            .iter()
            .map(|p| {
                let file = p
                    .strip_prefix(&self.out_dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned();
                Ok(OutputEntry {
                    file,
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed(),
            config_hash: config_hash(&self.cfg),
            outputs: entries,
        };
        self.write_json(&self.path(&format!("manifest-{command}.json")), &m)
    }

    fn read_records(&self, name: &str) -> Result<Vec<FileRecord>> {
        let r = self.open(&self.path(name), "run `femtocache split` first")?;
        serde_json::from_reader(r).with_context(|| format!("parsing {name}"))
    }

    fn read_train_samples(&self) -> Result<Vec<femtocache::proactive::TrainingSample>> {
        let path = self.path(TRAIN_SAMPLES);
        let samples = read_samples_csv(self.open(&path, "run `femtocache split` first")?)
            .with_context(|| format!("parsing {}", path.display()))?;
        let net = self.network();
        if let Some(s) = samples.first() {
            if s.target.len() != net.num_files_f || s.history.tau() != net.window_tau {
                bail!(
                    "{} holds samples with F = {}, tau = {} but the config has F = {}, tau = {}",
                    path.display(),
                    s.target.len(),
                    s.history.tau(),
                    net.num_files_f,
                    net.window_tau
                );
            }
        }
        Ok(samples)
    }
}

fn checkpoint_path(ctx: &RunContext, given: Option<PathBuf>, default: &str) -> PathBuf {
    given.unwrap_or_else(|| ctx.path(default))
}

/// Generates or ingests a trace and writes its popularity series.
pub fn gen_data(ctx: &RunContext, log_path: Option<PathBuf>) -> Result<()> {
    let d = &ctx.cfg.data;
    let source = if log_path.is_some() { Source::Log } else { d.source };
    let mut outputs = Vec::new();
    let series = match source {
        Source::Zipf => gen_zipf(d.zipf_files, d.zipf_exponent, d.zipf_periods)?,
        Source::ShotNoise => {
            let trace = gen_shot_noise(&d.shot_noise, ctx.seed())?;
            let path = ctx.path(REQUESTS);
            let mut w = ctx.create(&path)?;
            trace.log.write_csv(&mut w)?;
            w.flush()?;
            outputs.push(path);
            estimate_popularity(&trace.log, d.retention)?
        }
        Source::Log => {
            let path = log_path
                .or_else(|| d.log_path.clone())
                .context("a request log path is required")?;
            let log = RequestLog::read_csv(ctx.open(&path, "check data.log_path or --log")?)
                .with_context(|| format!("parsing request log {}", path.display()))?;
            estimate_popularity(&log, d.retention)?
        }
    };
    let path = ctx.path(POPULARITY);
    let mut w = ctx.create(&path)?;
    series.write_csv(&mut w)?;
    w.flush()?;
    outputs.push(path);
    println!(
        "popularity: {} files over {} periods",
        series.num_files(),
        series.num_periods()
    );
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest("gen-data", &refs)
}

/// Splits the records of the popularity series and draws training samples.
pub fn split(ctx: &RunContext) -> Result<()> {
    let net = ctx.network();
    let path = ctx.path(POPULARITY);
    let series = PopularitySeries::read_csv(ctx.open(&path, "run `femtocache gen-data` first")?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let records = records_from_series(&series, net.window_tau)?;
    let (train, test) = split_records(&records, ctx.cfg.samples.train_fraction, ctx.seed())?;
    let n = ctx.cfg.samples.train_samples;
    let samples = training_samples(&train, net.num_files_f, n, ctx.seed())?;

    let train_path = ctx.path(RECORDS_TRAIN);
    let test_path = ctx.path(RECORDS_TEST);
    ctx.write_json(&train_path, &train)?;
    ctx.write_json(&test_path, &test)?;
    let samples_path = ctx.path(TRAIN_SAMPLES);
    let mut w = ctx.create(&samples_path)?;
    write_samples_csv(&mut w, &samples)?;
    w.flush()?;
    let manifest_path = ctx.path(TRAIN_SAMPLES_MANIFEST);
    ctx.write_json(
        &manifest_path,
        &SampleManifest {
            num_files: net.num_files_f,
            tau: net.window_tau,
            seed: ctx.seed(),
            count: n,
        },
    )?;
    println!(
        "records: {} train, {} test; {} training samples",
        train.len(),
        test.len(),
        samples.len()
    );
    ctx.manifest("split", &[&train_path, &test_path, &samples_path, &manifest_path])
}

/// Trains the primal-dual model.
pub fn train_unsup(ctx: &RunContext, checkpoint: Option<PathBuf>) -> Result<()> {
    let net = ctx.network();
    let samples = ctx.read_train_samples()?;
    let opts = ctx.train_options(ctx.cfg.train.epochs);
    let model = ProactiveModel::new(net.num_files_f, net.window_tau, &ctx.cfg.architecture, ctx.seed())?;
    let (model, stats) = train_model(model, &samples, net, &opts)?;

    let ckpt = checkpoint_path(ctx, checkpoint, UNSUP_CHECKPOINT);
    let mut w = ctx.create(&ckpt)?;
    model.write_checkpoint(net, &mut w)?;
    w.flush()?;
    let curve = ctx.path("unsup_training.csv");
    let mut w = csv::Writer::from_writer(ctx.create(&curve)?);
    w.write_record(["epoch", "mean_lagrangian", "mean_sop"])?;
    for s in &stats {
        w.write_record([
            s.epoch.to_string(),
            s.mean_lagrangian.to_string(),
            s.mean_sop.to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(last) = stats.last() {
        println!(
            "unsup: final mean sop {:.6}, Lagrangian {:.6}",
            last.mean_sop, last.mean_lagrangian
        );
    }
    ctx.manifest("train-unsup", &[&ckpt, &curve])
}

#[derive(Serialize, serde::Deserialize, PartialEq)]
struct LabelManifest {
    count: usize,
    /// Hash of the network and solver settings the labels were solved with.
    settings_hash: String,
}

/// Labels a prefix of the training samples (reusing a matching label
/// cache) and trains the supervised model.
pub fn train_sup(ctx: &RunContext, checkpoint: Option<PathBuf>) -> Result<()> {
    let net = ctx.network();
    let mut samples = ctx.read_train_samples()?;
    samples.truncate(ctx.cfg.supervised.label_samples);
    let expected = LabelManifest {
        count: samples.len(),
        settings_hash: config_hash(&(net, &ctx.cfg.solver, ctx.seed())),
    };
    let labels_path = ctx.path(LABELS);
    let labels_manifest = ctx.path(LABELS_MANIFEST);
    let cached = std::fs::read_to_string(&labels_manifest)
        .ok()
        .and_then(|t| serde_json::from_str::<LabelManifest>(&t).ok())
        .filter(|m| *m == expected && labels_path.exists());
    let labelled = match cached {
        Some(_) => {
            log::info!("reusing label cache {}", labels_path.display());
            attach_labels(&samples, &read_label_cache(ctx.open(&labels_path, "")?)?)?
        }
        None => {
            let labelled = make_labels(&samples, net, &ctx.cfg.solver)?;
            let mut w = ctx.create(&labels_path)?;
            write_label_cache(&mut w, &labelled)?;
            w.flush()?;
            ctx.write_json(&labels_manifest, &expected)?;
            labelled
        }
    };
    let unconverged = labelled.iter().filter(|l| !l.converged).count();
    if unconverged > 0 {
        log::warn!(
            "{unconverged} of {} labels did not reach the solver tolerance",
            labelled.len()
        );
    }
    let opts = ctx.train_options(ctx.cfg.supervised.epochs);
    let (model, curve) = train_supervised(&labelled, &ctx.cfg.architecture, &opts)?;

    let ckpt = checkpoint_path(ctx, checkpoint, SUP_CHECKPOINT);
    let mut w = ctx.create(&ckpt)?;
    model.write_checkpoint(net, &mut w)?;
    w.flush()?;
    let curve_path = ctx.path("sup_training.csv");
    let mut w = csv::Writer::from_writer(ctx.create(&curve_path)?);
    w.write_record(["epoch", "mse"])?;
    for (e, l) in curve.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    if let Some(l) = curve.last() {
        println!("sup: {} labels, final mse {l:.6}", labelled.len());
    }
    ctx.manifest("train-sup", &[&labels_path, &ckpt, &curve_path])
}

/// Fits the linear popularity predictor on the training records.
pub fn fit_preopt(ctx: &RunContext, checkpoint: Option<PathBuf>) -> Result<()> {
    let train = ctx.read_records(RECORDS_TRAIN)?;
    let pred = LinearPredictor::fit(&train)?;
    if pred.tau() != ctx.network().window_tau {
        bail!(
            "training records have tau = {}, config has {}",
            pred.tau(),
            ctx.network().window_tau
        );
    }
    let ckpt = checkpoint_path(ctx, checkpoint, PREOPT_CHECKPOINT);
    ctx.write_json(&ckpt, &pred)?;
    println!(
        "preopt: coefficients {:?}, intercept {}",
        pred.coefficients, pred.intercept
    );
    ctx.manifest("fit-preopt", &[&ckpt])
}

fn load_checkpoint<T>(path: &Path, name: &str, read: impl FnOnce(BufReader<File>) -> Result<T>) -> Result<T> {
    let f = File::open(path).with_context(|| {
        format!(
            "missing checkpoint {} for strategy `{name}`; train it first or pass --checkpoint-dir",
            path.display()
        )
    })?;
    read(BufReader::new(f)).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(Default)]
struct Pool {
    closed_form: f64,
    n: usize,
    users: u64,
    successes: u64,
}

/// Monte-Carlo estimate of one decision at the nearest realizable β = 1/I.
fn simulate(e: &Evaluation, target: &PopularityVector, ctx: &RunContext, seed: u64) -> Result<(u64, u64)> {
    let i = nearest_subband_count(e.policy.beta);
    let snapped = Policy::new(e.policy.q.clone(), 1.0 / f64::from(i))?;
    let sim = SimOptions {
        region_radius: ctx.cfg.sim.region_radius,
        num_drops: ctx.cfg.sim.num_drops,
        subband_count_i: i,
        seed,
        ..SimOptions::default()
    };
    let r = simulate_sop(target, &snapped, ctx.network(), &sim)?;
    Ok((r.users, r.successes))
}

/// Evaluates the genie bound and the requested strategies on per-period
/// test samples.
pub fn evaluate_cmd(ctx: &RunContext, checkpoint_dir: Option<PathBuf>, strategies: &[String]) -> Result<()> {
    let net = ctx.network();
    let dir = checkpoint_dir.unwrap_or_else(|| ctx.out_dir.clone());
    for s in strategies {
        if !ALL_STRATEGIES.contains(&s.as_str()) {
            bail!("unknown strategy `{s}`; expected one of {ALL_STRATEGIES:?}");
        }
    }
    let wants = |name: &str| strategies.iter().any(|s| s == name);
    let unsup = if wants(UNSUP) {
        Some(load_checkpoint(&dir.join(UNSUP_CHECKPOINT), UNSUP, |r| {
            Ok(ProactiveModel::read_checkpoint(net, r)?)
        })?)
    } else {
        None
    };
    let sup = if wants(SUP) {
        Some(load_checkpoint(&dir.join(SUP_CHECKPOINT), SUP, |r| {
            Ok(SupervisedModel::read_checkpoint(net, r)?)
        })?)
    } else {
        None
    };
    let preopt = if wants(PREOPT) {
        Some(load_checkpoint(&dir.join(PREOPT_CHECKPOINT), PREOPT, |r| {
            Ok(serde_json::from_reader::<_, LinearPredictor>(r)?)
        })?)
    } else {
        None
    };

    let test = ctx.read_records(RECORDS_TEST)?;
    let tests = test_samples_by_period(&test, net.num_files_f, ctx.cfg.samples.test_per_period, ctx.seed())?;
    let evals = evaluate(
        &tests,
        &Strategies {
            unsup: unsup.as_ref(),
            sup: sup.as_ref(),
            preopt: preopt.as_ref(),
        },
        net,
        &ctx.cfg.solver,
    )?;

    let policies_path = ctx.path(POLICIES);
    let mut w = csv::Writer::from_writer(ctx.create(&policies_path)?);
    let mut header = vec![
        "strategy".to_string(),
        "period".into(),
        "sample".into(),
        "sop".into(),
        "beta".into(),
    ];
    header.extend((0..net.num_files_f).map(|j| format!("q_{j}")));
    w.write_record(&header)?;
    for e in &evals {
        let mut row = vec![
            e.strategy.clone(),
            e.period.to_string(),
            e.sample.to_string(),
            e.sop.to_string(),
            e.policy.beta.to_string(),
        ];
        row.extend(e.policy.q.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut pools: BTreeMap<(usize, usize), Pool> = BTreeMap::new();
    let order: Vec<&str> = std::iter::once(GENIE).chain(ALL_STRATEGIES).collect();
    let rank = |name: &str| order.iter().position(|s| *s == name).unwrap_or(order.len());
    let simulate_enabled = ctx.cfg.sim.num_drops > 0;
    for (k, e) in evals.iter().enumerate() {
        let pool = pools.entry((rank(&e.strategy), e.period)).or_default();
        pool.closed_form += e.sop;
        pool.n += 1;
        if simulate_enabled {
            let (users, successes) = simulate(
                e,
                &tests[e.sample].sample.target,
                ctx,
                derive_seed(ctx.seed(), k as u64),
            )?;
            pool.users += users;
            pool.successes += successes;
        }
    }

    let eval_path = ctx.path(EVALUATION);
    let mut w = csv::Writer::from_writer(ctx.create(&eval_path)?);
    w.write_record(["strategy", "period", "sop_closed_form", "sop_montecarlo", "stderr"])?;
    let mut overall: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ((r, period), pool) in &pools {
        let cf = pool.closed_form / pool.n as f64;
        let (mc, se) = if simulate_enabled && pool.users > 0 {
            let p = pool.successes as f64 / pool.users as f64;
            (p.to_string(), (p * (1.0 - p) / pool.users as f64).sqrt().to_string())
        } else {
            (String::new(), String::new())
        };
        w.write_record([order[*r].to_string(), period.to_string(), cf.to_string(), mc, se])?;
        let o = overall.entry(*r).or_default();
        o.0 += pool.closed_form;
        o.1 += pool.n;
    }
    w.flush()?;
    for (r, (s, n)) in overall {
        println!(
            "{:>7}: mean closed-form sop {:.6} over {n} samples",
            order[r],
            s / n as f64
        );
    }
    ctx.manifest("evaluate", &[&policies_path, &eval_path])
}

/// Compares the closed form with the Monte-Carlo simulator for a Zipf
/// catalog at each configured subband count.
pub fn validate_approx(ctx: &RunContext) -> Result<()> {
    let v = &ctx.cfg.validation;
    let net = NetworkConfig {
        num_files_f: v.num_files,
        cache_size_c: v.cache_size,
        ..ctx.network().clone()
    };
    net.validate().context("invalid config field `validation`")?;
    let p = zipf(v.num_files, v.zipf_exponent)?;
    let path = ctx.path(VALIDATION);
    let mut w = csv::Writer::from_writer(ctx.create(&path)?);
    w.write_record([
        "subbands",
        "beta",
        "sop_closed_form",
        "sop_montecarlo",
        "stderr",
        "tolerance",
        "within",
    ])?;
    for &i in &v.subbands {
        let beta = 1.0 / f64::from(i);
        let opts = SolverOptions {
            fixed_beta: Some(beta),
            ..ctx.cfg.solver.clone()
        };
        let sol = solve_p0(&p, &net, &opts)?;
        let closed = analytics::sop(&p, &sol.policy, &net)?;
        let sim = SimOptions {
            region_radius: ctx.cfg.sim.region_radius,
            num_drops: v.num_drops,
            subband_count_i: i,
            seed: derive_seed(ctx.seed(), u64::from(i)),
            ..SimOptions::default()
        };
        let r = simulate_sop(&p, &sol.policy, &net, &sim)?;
        let tol = tolerance(r.stderr);
        let within = (r.sop_estimate - closed).abs() <= tol;
        println!(
            "I = {i}: closed form {closed:.4}, simulated {:.4} ± {:.4}, {}",
            r.sop_estimate,
            r.stderr,
            if within {
                "within tolerance"
            } else {
                "outside tolerance"
            }
        );
        w.write_record([
            i.to_string(),
            beta.to_string(),
            closed.to_string(),
            r.sop_estimate.to_string(),
            r.stderr.to_string(),
            tol.to_string(),
            within.to_string(),
        ])?;
    }
    w.flush()?;
    ctx.manifest("validate-approx", &[&path])
}

/// Allowed closed-form versus simulation gap for a given standard error.
pub fn tolerance(stderr: f64) -> f64 {
    0.03_f64.max(4.0 * stderr)
}

fn zipf(f: usize, exponent: f64) -> Result<PopularityVector> {
    Ok(gen_zipf(f, exponent, 1)?.periods()[0].clone())
}

#[derive(Serialize)]
struct StaticSolution<'a> {
    popularity: &'a [f64],
    policy: &'a Policy,
    sop: f64,
    converged: bool,
    iterations: usize,
    kkt_residual: f64,
}

/// Solves the static problem for a Zipf catalog or an explicit popularity.
pub fn solve_static(ctx: &RunContext, zipf_exponent: Option<f64>, popularity: Option<Vec<f64>>) -> Result<()> {
    let net = ctx.network();
    let p = match popularity {
        Some(w) => PopularityVector::from_weights(&w).context("invalid --popularity")?,
        None => zipf(net.num_files_f, zipf_exponent.unwrap_or(ctx.cfg.data.zipf_exponent))?,
    };
    let net = NetworkConfig {
        num_files_f: p.len(),
        ..net.clone()
    };
    net.validate()
        .context("popularity length does not fit the configured cache size")?;
    let sol = solve_p0(&p, &net, &ctx.cfg.solver)?;
    let path = ctx.path(SOLUTION);
    ctx.write_json(
        &path,
        &StaticSolution {
            popularity: p.as_slice(),
            policy: &sol.policy,
            sop: sol.sop,
            converged: sol.converged,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
        },
    )?;
    println!(
        "sop {:.6} at beta {:.6}, cached mass {:.6}",
        sol.sop,
        sol.policy.beta,
        sol.policy.cached_mass()
    );
    ctx.manifest("solve-static", &[&path])
}
