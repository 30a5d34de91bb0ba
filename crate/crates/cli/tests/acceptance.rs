//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria. The
//! process exits nonzero when a criterion outside `KNOWN_FAILURES` fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use femtocache::analytics::{self, compute_terms_with_tol, gamma_fn, k_constant, SopTerms};
use femtocache::baselines::{make_labels, train_supervised, LinearPredictor, SupervisedModel, SupervisedSample};
use femtocache::data::{estimate_popularity, gen_shot_noise, split_records, Retention, ShotNoiseParams};
use femtocache::experiment::{
    evaluate, overall_means, per_period_means, records_from_series, test_samples_by_period, training_samples,
    Strategies, GENIE, PREOPT, SUP, UNSUP,
};
use femtocache::netsim::{simulate_sop, SimOptions};
use femtocache::neural::{Direction, LrSchedule};
use femtocache::proactive::{
    mean_sop, train_model, Architecture, HistoryWindow, ProactiveModel, TrainOptions, TrainingSample,
};
use femtocache::solver::{grid_oracle, solve_p0, SolverOptions};
use femtocache::{NetworkConfig, Policy, PopularityVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

/// Criteria expected to fail; see the README section on the simulator.
const KNOWN_FAILURES: [u32; 2] = [4, 7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn net(f: usize, c: usize, tau: usize) -> NetworkConfig {
    NetworkConfig {
        num_files_f: f,
        cache_size_c: c,
        window_tau: tau,
        ..NetworkConfig::default()
    }
}

fn zipf(f: usize, s: f64) -> PopularityVector {
    let w: Vec<f64> = (1..=f).map(|i| (i as f64).powf(-s)).collect();
    PopularityVector::from_weights(&w).unwrap()
}

fn random_popularity(rng: &mut ChaCha8Rng, f: usize) -> PopularityVector {
    let w: Vec<f64> = (0..f).map(|_| rng.random::<f64>() + 0.01).collect();
    PopularityVector::from_weights(&w).unwrap()
}

/// SOP rebuilt from the auxiliary terms.
fn sop_from_terms(p: &[f64], q: &[f64], t: &SopTerms) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pf, &qf)| {
            let kappa = qf + t.p_active * t.beta * (qf * t.z_value + t.k_const * (1.0 - qf) * t.gamma_pow);
            pf * qf / kappa
        })
        .sum()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_q, mut worst_b) = (0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let f = rng.random_range(1..=50);
        let c = rng.random_range(1..=f);
        let cfg = NetworkConfig {
            alpha: rng.random_range(2.5..5.0),
            rate_threshold_r0: rng.random_range(0.5e6..3e6),
            ..net(f, c, 1)
        };
        let p = random_popularity(&mut rng, f);
        let q: Vec<f64> = (0..f).map(|_| rng.random_range(0.01..0.99)).collect();
        let beta = rng.random_range(0.1..0.95);
        let pol = Policy::new(q.clone(), beta).unwrap();
        let gq = analytics::sop_grad_q(&p, &pol, &cfg).unwrap();
        let gb = analytics::sop_grad_beta(&p, &pol, &cfg).unwrap();
        let h = 1e-6;
        for j in 0..f {
            let probe = |d: f64| {
                let mut qq = q.clone();
                qq[j] += d;
                analytics::sop(&p, &Policy::new(qq, beta).unwrap(), &cfg).unwrap()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            worst_q = worst_q.max(((gq[j] - fd) / fd).abs());
        }
        let at = |b: f64| {
            // Tightest Z tolerance the quadrature reaches at this β.
            let t = [1e-12, 1e-11, 1e-10]
                .iter()
                .find_map(|&tol| compute_terms_with_tol(&cfg, b, tol).ok())
                .unwrap();
            sop_from_terms(p.as_slice(), &q, &t)
        };
        let hb = 1e-4;
        let fd = (at(beta + hb) - at(beta - hb)) / (2.0 * hb);
        worst_b = worst_b.max(((gb - fd) / fd).abs());
    }
    outcome(
        worst_q <= 1e-5 && worst_b <= 1e-4,
        format!("200 instances, worst relative error q {worst_q:.2e} (<= 1e-5), beta {worst_b:.2e} (<= 1e-4)"),
    )
}

fn criterion_2() -> Outcome {
    let pi = std::f64::consts::PI;
    let gamma_err = [(0.5, pi.sqrt()), (1.0, 1.0), (5.0, 24.0)]
        .iter()
        .map(|&(x, v)| (gamma_fn(x).unwrap() - v).abs())
        .fold(0.0, f64::max);
    let d = 2.0 / 3.7;
    let k_err = (k_constant(3.7).unwrap() - pi * d / (pi * d).sin()).abs();
    let cfg = net(10, 1, 1);
    let mut z_ok = true;
    let mut z_gap = 0.0_f64;
    for beta in [0.05, 0.2, 0.5, 1.0] {
        for tol in [1e-6, 1e-8, 1e-10] {
            let a = compute_terms_with_tol(&cfg, beta, tol).unwrap();
            let b = compute_terms_with_tol(&cfg, beta, tol / 2.0).unwrap();
            let gap = (a.z_value - b.z_value).abs();
            z_gap = z_gap.max(gap);
            z_ok &= gap <= tol && a.z_error <= tol;
        }
    }
    outcome(
        gamma_err <= 1e-10 && k_err <= 1e-8 && z_ok,
        format!(
            "Gamma error {gamma_err:.1e}, K error {k_err:.1e}, largest Z change under tolerance halving {z_gap:.1e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = net(3, 1, 1);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let p = random_popularity(&mut rng, 3);
        let sol = solve_p0(&p, &cfg, &SolverOptions::default()).unwrap();
        let (_, grid) = grid_oracle(&p, &cfg, 0.01, 0.01).unwrap();
        worst = worst.min(sol.sop - grid);
    }
    outcome(
        worst >= -1e-3,
        format!("20 instances, min(solver - grid) = {worst:+.2e} (>= -1e-3)"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = net(10, 1, 1);
    let p = zipf(10, 1.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for i in [1u32, 2, 4] {
        let beta = 1.0 / f64::from(i);
        let opts = SolverOptions {
            fixed_beta: Some(beta),
            ..SolverOptions::default()
        };
        let pol = solve_p0(&p, &cfg, &opts).unwrap().policy;
        let closed = analytics::sop(&p, &pol, &cfg).unwrap();
        let sim = SimOptions {
            num_drops: 2000,
            subband_count_i: i,
            seed: u64::from(i),
            ..SimOptions::default()
        };
        let r = simulate_sop(&p, &pol, &cfg, &sim).unwrap();
        let tol = 0.03_f64.max(4.0 * r.stderr);
        let gap = r.sop_estimate - closed;
        pass &= gap.abs() <= tol;
        parts.push(format!(
            "I={i}: closed {closed:.4} sim {:.4} gap {gap:+.4} tol {tol:.4}",
            r.sop_estimate
        ));
    }
    outcome(pass, format!("F=10 Zipf(1) C=1, 2000 drops; {}", parts.join("; ")))
}

/// Popularity estimate from `n` requests drawn from `p`.
fn multinomial_estimate(p: &PopularityVector, n: usize, rng: &mut ChaCha8Rng) -> PopularityVector {
    let w = WeightedIndex::new(p.as_slice()).unwrap();
    let mut counts = vec![0.0; p.len()];
    for _ in 0..n {
        counts[w.sample(rng)] += 1.0;
    }
    PopularityVector::from_weights(&counts).unwrap()
}

fn criterion_5() -> Outcome {
    let (f, c, tau) = (20, 2, 5);
    let cfg = net(f, c, tau);
    let p = zipf(f, 1.0);
    let genie = solve_p0(&p, &cfg, &SolverOptions::default()).unwrap();
    let samples = |count: usize, seed: u64| -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let rows = (0..tau).map(|_| multinomial_estimate(&p, 2000, &mut rng)).collect();
                TrainingSample::new(p.clone(), HistoryWindow::new(rows).unwrap()).unwrap()
            })
            .collect()
    };
    let train = samples(2048, 1);
    let test = samples(100, 2);
    let model = ProactiveModel::new(f, tau, &Architecture::default(), 7).unwrap();
    let opts = TrainOptions {
        epochs: 50,
        seed: 3,
        ..TrainOptions::default()
    };
    let (model, _) = train_model(model, &train, &cfg, &opts).unwrap();
    let achieved = mean_sop(&model, &test, &cfg).unwrap();
    let violation = test
        .iter()
        .map(|s| model.decide(&s.history, &cfg).unwrap().capacity_violation(c as f64))
        .fold(0.0, f64::max);
    let ratio = achieved / genie.sop;
    outcome(
        ratio >= 0.95 && violation <= 0.01 * c as f64,
        format!(
            "50 epochs on 2048 samples; mean SOP {achieved:.5} vs genie {:.5} (ratio {ratio:.4} >= 0.95), max pre-projection violation {violation:.4} (<= {:.2})",
            genie.sop,
            0.01 * c as f64
        ),
    )
}

struct SeedResult {
    seed: u64,
    means: BTreeMap<String, f64>,
    periods: usize,
    genie_violations: usize,
}

fn run_seed(seed: u64) -> SeedResult {
    let (f, tau) = (20, 5);
    let cfg = net(f, 2, tau);
    let trace = gen_shot_noise(&ShotNoiseParams::default(), seed).unwrap();
    let series = estimate_popularity(&trace.log, Retention::MinRequests { min_requests: 10 }).unwrap();
    let records = records_from_series(&series, tau).unwrap();
    let (train, test) = split_records(&records, 0.8, seed).unwrap();
    let samples = training_samples(&train, f, 2048, seed).unwrap();
    let tests = test_samples_by_period(&test, f, 2, seed).unwrap();
    let opts = TrainOptions {
        epochs: 50,
        seed,
        ..TrainOptions::default()
    };
    let unsup = ProactiveModel::new(f, tau, &Architecture::default(), seed).unwrap();
    let (unsup, _) = train_model(unsup, &samples, &cfg, &opts).unwrap();
    let labels = make_labels(&samples[..128], &cfg, &SolverOptions::default()).unwrap();
    let (sup, _) = train_supervised(&labels, &Architecture::default(), &opts).unwrap();
    let preopt = LinearPredictor::fit(&train).unwrap();
    let evals = evaluate(
        &tests,
        &Strategies {
            unsup: Some(&unsup),
            sup: Some(&sup),
            preopt: Some(&preopt),
        },
        &cfg,
        &SolverOptions::default(),
    )
    .unwrap();
    let per_period = per_period_means(&evals);
    let genie_violations = per_period
        .iter()
        .filter(|((s, t), v)| s != GENIE && **v > per_period[&(GENIE.to_string(), *t)] + 1e-12)
        .count();
    let periods = per_period.keys().filter(|(s, _)| s == GENIE).count();
    SeedResult {
        seed,
        means: overall_means(&evals),
        periods,
        genie_violations,
    }
}

fn criteria_6_and_7_sup(results: &[SeedResult]) -> Outcome {
    println!("  seed  periods   genie    unsup      sup   preopt  unsup>=preopt  genie-dominates");
    let mut holds = 0;
    for r in results {
        let ordering = r.means[UNSUP] >= r.means[PREOPT];
        let ok = ordering && r.genie_violations == 0;
        holds += usize::from(ok);
        println!(
            "  {:>4}  {:>7}  {:.4}  {:.4}  {:.4}  {:.4}  {:>13}  {:>15}",
            r.seed,
            r.periods,
            r.means[GENIE],
            r.means[UNSUP],
            r.means[SUP],
            r.means[PREOPT],
            ordering,
            r.genie_violations == 0
        );
    }
    outcome(
        holds >= 8,
        format!("ordering held in {holds}/{} seeds (>= 8 required)", results.len()),
    )
}

fn criterion_7(results: &[SeedResult]) -> Outcome {
    let (f, tau) = (20, 5);
    let cfg = net(f, 2, tau);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let label = Policy::new(
        (0..f)
            .map(|j| {
                if j < 3 {
                    0.5
                } else if j < 5 {
                    0.25
                } else {
                    0.0
                }
            })
            .collect(),
        0.6,
    )
    .unwrap();
    let history =
        |rng: &mut ChaCha8Rng| HistoryWindow::new((0..tau).map(|_| random_popularity(rng, f)).collect()).unwrap();
    let labelled: Vec<SupervisedSample> = (0..64)
        .map(|_| SupervisedSample {
            input: history(&mut rng),
            label: label.clone(),
            converged: true,
        })
        .collect();
    let opts = TrainOptions {
        epochs: 400,
        seed: 70,
        ..TrainOptions::default()
    };
    let (model, _): (SupervisedModel, _) = train_supervised(&labelled, &Architecture::default(), &opts).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let d = model.decide(&history(&mut rng), &cfg).unwrap().policy;
        worst = worst.max((d.beta - label.beta).abs());
        for (a, b) in d.q.iter().zip(&label.q) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut worst_train = 0.0_f64;
    for s in &labelled {
        let d = model.decide(&s.input, &cfg).unwrap().policy;
        worst_train = worst_train.max((d.beta - label.beta).abs());
        for (a, b) in d.q.iter().zip(&label.q) {
            worst_train = worst_train.max((a - b).abs());
        }
    }
    let sup_mean = if results.is_empty() {
        String::from("not run")
    } else {
        format!(
            "{:.4}",
            results.iter().map(|r| r.means[SUP]).sum::<f64>() / results.len() as f64
        )
    };
    outcome(
        worst <= 1e-2,
        format!("constant label reproduced within {worst:.2e} (<= 1e-2) on 50 unseen histories ({worst_train:.2e} on the 64 training histories); Sup mean test SOP over the shot-noise seeds {sup_mean}"),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tiny = LrSchedule { base: 1e-6, decay: 0.0 };
    let (mut primal_ok, mut dual_ok, mut flat_cases) = (0, 0, 0);
    for case in 0..100u64 {
        let f = rng.random_range(2..=8);
        let c = rng.random_range(1..f);
        let tau = rng.random_range(1..=3);
        let cfg = net(f, c, tau);
        let width = |rng: &mut ChaCha8Rng| vec![rng.random_range(3..=12)];
        let arch = Architecture {
            q_hidden: width(&mut rng),
            beta_hidden: width(&mut rng),
            xi_c_hidden: width(&mut rng),
            xi_f_hidden: width(&mut rng),
        };
        let mut m = ProactiveModel::new(f, tau, &arch, case).unwrap();
        // Multiplier heads start active so both dual terms carry gradient.
        m.q_net.set_output_bias(rng.random_range(0.1..1.5));
        m.xi_c_net.set_output_bias(rng.random_range(0.05..0.5));
        m.xi_f_net.set_output_bias(rng.random_range(0.05..0.5));
        let batch: Vec<TrainingSample> = (0..rng.random_range(1..=16))
            .map(|_| {
                let rows = (0..tau).map(|_| random_popularity(&mut rng, f)).collect();
                TrainingSample::new(random_popularity(&mut rng, f), HistoryWindow::new(rows).unwrap()).unwrap()
            })
            .collect();
        let refs: Vec<&TrainingSample> = batch.iter().collect();
        let g = m.batch_gradients(&refs, &cfg).unwrap();
        let before = m.batch_lagrangian(&refs, &cfg).unwrap();

        let mut primal = m.clone();
        primal.beta_net.sgd_step(&g.beta, &tiny, 0, Direction::Ascent).unwrap();
        primal.q_net.sgd_step(&g.q, &tiny, 0, Direction::Ascent).unwrap();
        let after = primal.batch_lagrangian(&refs, &cfg).unwrap();
        // With every caching output clipped to zero the SOP vanishes for any
        // β, so L does not depend on the primal parameters at all.
        let flat = batch
            .iter()
            .all(|s| m.decide(&s.history, &cfg).unwrap().raw_q.iter().all(|v| *v <= 0.0));
        if flat {
            flat_cases += 1;
            primal_ok += usize::from(after >= before);
        } else {
            primal_ok += usize::from(after > before);
        }

        let mut dual = m.clone();
        dual.xi_c_net.sgd_step(&g.xi_c, &tiny, 0, Direction::Descent).unwrap();
        dual.xi_f_net.sgd_step(&g.xi_f, &tiny, 0, Direction::Descent).unwrap();
        dual_ok += usize::from(dual.batch_lagrangian(&refs, &cfg).unwrap() < before);
    }
    outcome(
        primal_ok == 100 && dual_ok == 100,
        format!(
            "primal steps raised L in {primal_ok}/100 cases ({flat_cases} with L flat in the primal parameters, left unchanged), dual steps lowered L in {dual_ok}/100"
        ),
    )
}

fn run_cli(dir: &Path, config: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_femtocache"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "seed": 11,
  "network": {"num_files_f": 6, "cache_size_c": 1, "window_tau": 3},
  "data": {"shot_noise": {"num_periods": 20}},
  "samples": {"train_samples": 128, "test_per_period": 1},
  "architecture": {"q_hidden": [24, 12], "beta_hidden": [8], "xi_c_hidden": [8], "xi_f_hidden": [12]},
  "train": {"epochs": 5},
  "supervised": {"label_samples": 24, "epochs": 5},
  "sim": {"num_drops": 20},
  "validation": {"num_drops": 100}
}"#,
    )
    .unwrap();
    let commands: [&[&str]; 9] = [
        &["gen-data"],
        &["split"],
        &["train-unsup"],
        &["train-sup"],
        &["fit-preopt"],
        &["evaluate"],
        &["validate-approx"],
        &["solve-static"],
        &["solve-static", "--popularity", "5,3,2,1"],
    ];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        for args in commands {
            if let Err(e) = run_cli(&dir, &config, args) {
                return outcome(false, format!("subcommand failed: {e}"));
            }
        }
        let log_dir = tmp.path().join(format!("{name}-log"));
        let log = dir.join("requests.csv");
        if let Err(e) = run_cli(&log_dir, &config, &["gen-data", "--log", log.to_str().unwrap()]) {
            return outcome(false, format!("log ingestion failed: {e}"));
        }
        let mut snap = snapshot(&dir);
        for (k, v) in snapshot(&log_dir) {
            snap.insert(format!("log/{k}"), v);
        }
        runs.push(snap);
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_files = runs[0].len() == runs[1].len();
    outcome(
        differing.is_empty() && same_files,
        format!(
            "9 subcommand runs plus log ingestion, {} output files compared, {} differ",
            runs[0].len(),
            differing.len()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut unexpected = Vec::new();
    let mut report = |n: u32, start: Instant, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_FAILURES.contains(&n) {
            " [known]"
        } else {
            ""
        };
        println!(
            "criterion {n}: {status}{note} ({:.1}s) {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass && !KNOWN_FAILURES.contains(&n) {
            unexpected.push(n);
        }
    };
    let simple: [(u32, fn() -> Outcome); 5] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
    ];
    for (n, run) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, t, run());
        }
    }
    let mut seeds = Vec::new();
    if wanted(6) {
        let t = Instant::now();
        seeds = (0..10).map(run_seed).collect();
        report(6, t, criteria_6_and_7_sup(&seeds));
    }
    if wanted(7) {
        let t = Instant::now();
        report(7, t, criterion_7(&seeds));
    }
    if wanted(8) {
        let t = Instant::now();
        report(8, t, criterion_8());
    }
    if wanted(9) {
        let t = Instant::now();
        report(9, t, criterion_9());
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
