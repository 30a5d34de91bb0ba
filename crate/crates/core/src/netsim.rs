//! Monte-Carlo simulation of the Poisson network model.
//!
//! Each drop samples base stations and users as Poisson point processes in
//! a disc, places caches by the probabilistic interval-packing scheme,
//! associates every user with the nearest base station caching its file,
//! mutes base stations without users and draws one random subband per base
//! station. Users in the inner half of the disc are scored: a success means
//! the user was served at rate `(βW/U) log₂(1 + SIR) ≥ R₀`, where `U` is
//! the number of users sharing its base station and the SIR uses
//! unit-mean exponential (Rayleigh) power fading.

use std::f64::consts::PI;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

use crate::analytics::{NetworkConfig, Policy, PopularityVector, CAPACITY_SLACK};
use crate::error::{Error, Result};

/// Minimum disc radius in units of the mean base-station spacing `1/√λ_b`.
pub const MIN_RADIUS_SPACINGS: f64 = 10.0;

/// Tolerance on `β = 1/I`.
const BETA_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    /// Unit-mean exponential power gains.
    #[default]
    Rayleigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    /// Disc radius in meters; `None` uses `10/√λ_b`.
    pub region_radius: Option<f64>,
    pub num_drops: usize,
    /// Number of subbands `I`; the policy's β must equal `1/I`.
    pub subband_count_i: u32,
    pub fading: Fading,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            region_radius: None,
            num_drops: 2000,
            subband_count_i: 1,
            fading: Fading::Rayleigh,
            seed: 0,
        }
    }
}

impl SimOptions {
    /// Effective disc radius for `cfg`.
    pub fn radius(&self, cfg: &NetworkConfig) -> Result<f64> {
        let min = MIN_RADIUS_SPACINGS / cfg.lambda_b.sqrt();
        let r = self.region_radius.unwrap_or(min);
        if !(r.is_finite() && r >= min * (1.0 - 1e-12)) {
            return Err(Error::invalid(format!(
                "region radius {r} m is below the edge-effect minimum {min} m"
            )));
        }
        Ok(r)
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.num_drops == 0 {
            return Err(Error::invalid("num_drops must be at least 1"));
        }
        if self.subband_count_i == 0 {
            return Err(Error::invalid("subband_count_i must be at least 1"));
        }
        self.radius(cfg).map(|_| ())
    }
}

/// Nearest integer subband count for a continuous β, at least 1.
pub fn nearest_subband_count(beta: f64) -> u32 {
    (1.0 / beta).round().max(1.0) as u32
}

/// Draws one cache of at most `C` files with marginal probabilities `q`.
///
/// The `q_f` are laid end to end on `[0, C)`; a single offset `u ∈ [0,1)`
/// selects the files whose intervals contain one of `u, u+1, …, u+C−1`.
/// Returned indices are ascending.
pub fn place_cache<R: Rng + ?Sized>(q: &[f64], capacity: usize, rng: &mut R) -> Result<Vec<usize>> {
    if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::invalid(format!("q[{i}] = {v} not in [0,1]")));
    }
    let mass: f64 = q.iter().sum();
    if mass > capacity as f64 + CAPACITY_SLACK {
        return Err(Error::invalid(format!(
            "cached mass {mass} exceeds capacity {capacity}"
        )));
    }
    let u: f64 = rng.random();
    let mut out = Vec::with_capacity(capacity);
    let mut start = 0.0;
    let mut next = u;
    for (f, &qf) in q.iter().enumerate() {
        let end = start + qf;
        if next < end && out.len() < capacity {
            out.push(f);
            next += 1.0;
        }
        start = end;
    }
    Ok(out)
}

/// Per-drop counts of scored users and successes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropTrace {
    pub drop: usize,
    pub users: u64,
    pub successes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub sop_estimate: f64,
    /// Binomial standard error of the success fraction.
    pub stderr: f64,
    pub users: u64,
    pub successes: u64,
    pub drops: Vec<DropTrace>,
}

impl SimResult {
    /// Writes the per-drop trace as CSV `drop,users,successes`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for d in &self.drops {
            w.serialize(d)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Point {
    x: f64,
    y: f64,
}

fn sample_disc<R: Rng>(rng: &mut R, density: f64, radius: f64) -> Result<Vec<Point>> {
    let mean = density * PI * radius * radius;
    let n = Poisson::new(mean)
        .map_err(|e| Error::invalid(e.to_string()))?
        .sample(rng) as usize;
    Ok((0..n)
        .map(|_| {
            let r = radius * rng.random::<f64>().sqrt();
            let th = 2.0 * PI * rng.random::<f64>();
            Point {
                x: r * th.cos(),
                y: r * th.sin(),
            }
        })
        .collect())
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y)
}

/// One base station of a realized drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub x: f64,
    pub y: f64,
    /// Cached file indices.
    pub files: Vec<usize>,
    pub subband: u32,
    /// Users associated with this BS; 0 means muted.
    pub load: u32,
}

/// One user of a realized drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub x: f64,
    pub y: f64,
    pub file: usize,
    /// Nearest BS caching the requested file, if any.
    pub serving: Option<usize>,
    /// Inside the inner half-radius disc where outcomes are counted.
    pub scored: bool,
    pub success: bool,
}

/// Full geometry and outcome of one drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSnapshot {
    pub radius: f64,
    pub base_stations: Vec<BaseStation>,
    pub users: Vec<User>,
}

fn realize_drop(
    drop: usize,
    p: &WeightedIndex<f64>,
    policy: &Policy,
    cfg: &NetworkConfig,
    sim: &SimOptions,
    radius: f64,
) -> Result<DropSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(drop as u64);

    let bss = sample_disc(&mut rng, cfg.lambda_b, radius)?;
    let users = sample_disc(&mut rng, cfg.lambda_u, radius)?;
    let mut cached: Vec<Vec<usize>> = Vec::with_capacity(bss.len());
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); policy.q.len()];
    for b in 0..bss.len() {
        let files = place_cache(&policy.q, cfg.cache_size_c, &mut rng)?;
        for &f in &files {
            holders[f].push(b);
        }
        cached.push(files);
    }
    let subband: Vec<u32> = (0..bss.len())
        .map(|_| rng.random_range(0..sim.subband_count_i))
        .collect();

    // Nearest caching BS per user; ties go to the lower index.
    let requests: Vec<(usize, Option<usize>)> = users
        .iter()
        .map(|u| {
            let f = p.sample(&mut rng);
            let serving = holders[f]
                .iter()
                .map(|&b| (dist2(u, &bss[b]), b))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, b)| b);
            (f, serving)
        })
        .collect();
    let mut load = vec![0u32; bss.len()];
    for (_, s) in &requests {
        if let Some(b) = s {
            load[*b] += 1;
        }
    }

    let inner2 = (radius / 2.0) * (radius / 2.0);
    let beta_w = policy.beta * cfg.bandwidth_w;
    let mut out_users = Vec::with_capacity(users.len());
    for (u, &(file, serving)) in users.iter().zip(&requests) {
        let scored = u.x * u.x + u.y * u.y <= inner2;
        let mut success = false;
        if let (true, Some(b0)) = (scored, serving) {
            let signal = sample_gain(&mut rng, sim.fading) * dist2(u, &bss[b0]).powf(-cfg.alpha / 2.0);
            let mut interference = 0.0;
            for (i, bs) in bss.iter().enumerate() {
                if i != b0 && load[i] > 0 && subband[i] == subband[b0] {
                    interference += sample_gain(&mut rng, sim.fading) * dist2(u, bs).powf(-cfg.alpha / 2.0);
                }
            }
            let sir = signal / interference;
            let rate = beta_w / load[b0] as f64 * sir.ln_1p() / std::f64::consts::LN_2;
            success = rate >= cfg.rate_threshold_r0;
        }
        out_users.push(User {
            x: u.x,
            y: u.y,
            file,
            serving,
            scored,
            success,
        });
    }
    let base_stations = bss
        .iter()
        .zip(cached)
        .enumerate()
        .map(|(i, (b, files))| BaseStation {
            x: b.x,
            y: b.y,
            files,
            subband: subband[i],
            load: load[i],
        })
        .collect();
    Ok(DropSnapshot {
        radius,
        base_stations,
        users: out_users,
    })
}

fn one_drop(
    drop: usize,
    p: &WeightedIndex<f64>,
    policy: &Policy,
    cfg: &NetworkConfig,
    sim: &SimOptions,
    radius: f64,
) -> Result<DropTrace> {
    let snap = realize_drop(drop, p, policy, cfg, sim, radius)?;
    let scored = snap.users.iter().filter(|u| u.scored).count() as u64;
    let successes = snap.users.iter().filter(|u| u.success).count() as u64;
    Ok(DropTrace {
        drop,
        users: scored,
        successes,
    })
}

fn sample_gain<R: Rng>(rng: &mut R, fading: Fading) -> f64 {
    match fading {
        Fading::Rayleigh => Exp1.sample(rng),
    }
}

/// Checks the inputs of a simulation; returns the disc radius and the
/// request sampler.
fn prepare(
    p: &PopularityVector,
    policy: &Policy,
    cfg: &NetworkConfig,
    sim: &SimOptions,
) -> Result<(f64, WeightedIndex<f64>)> {
    cfg.validate()?;
    sim.validate(cfg)?;
    if p.len() != policy.q.len() {
        return Err(Error::dim(p.len(), policy.q.len(), "policy vs popularity"));
    }
    policy.check_box()?;
    if !policy.is_feasible(cfg.capacity()) {
        return Err(Error::invalid("policy exceeds the cache capacity"));
    }
    let target = 1.0 / sim.subband_count_i as f64;
    if (policy.beta - target).abs() > BETA_MATCH_TOL {
        return Err(Error::invalid(format!(
            "beta {} does not equal 1/I = {target} for I = {}",
            policy.beta, sim.subband_count_i
        )));
    }
    let radius = sim.radius(cfg)?;
    let weights = WeightedIndex::new(p.as_slice()).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((radius, weights))
}

/// Geometry and outcome of drop number `drop`, identical to the drop of
/// that index inside [`simulate_sop`] with the same options.
pub fn snapshot_drop(
    p: &PopularityVector,
    policy: &Policy,
    cfg: &NetworkConfig,
    sim: &SimOptions,
    drop: usize,
) -> Result<DropSnapshot> {
    let (radius, weights) = prepare(p, policy, cfg, sim)?;
    realize_drop(drop, &weights, policy, cfg, sim, radius)
}

/// Monte-Carlo SOP of `policy` under popularity `p`.
pub fn simulate_sop(p: &PopularityVector, policy: &Policy, cfg: &NetworkConfig, sim: &SimOptions) -> Result<SimResult> {
    let (radius, weights) = prepare(p, policy, cfg, sim)?;
    let run = |d: usize| one_drop(d, &weights, policy, cfg, sim, radius);
    #[cfg(feature = "parallel")]
    let drops: Vec<DropTrace> = {
        use rayon::prelude::*;
        (0..sim.num_drops).into_par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let drops: Vec<DropTrace> = (0..sim.num_drops).map(run).collect::<Result<_>>()?;

    let users: u64 = drops.iter().map(|d| d.users).sum();
    let successes: u64 = drops.iter().map(|d| d.successes).sum();
    let (est, se) = if users == 0 {
        (0.0, 0.0)
    } else {
        let m = successes as f64 / users as f64;
        (m, (m * (1.0 - m) / users as f64).sqrt())
    };
    Ok(SimResult {
        sop_estimate: est,
        stderr: se,
        users,
        successes,
        drops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics;

    fn cfg(f: usize, c: usize) -> NetworkConfig {
        NetworkConfig {
            num_files_f: f,
            cache_size_c: c,
            ..NetworkConfig::default()
        }
    }

    fn zipf(f: usize) -> PopularityVector {
        let w: Vec<f64> = (1..=f).map(|i| 1.0 / i as f64).collect();
        PopularityVector::from_weights(&w).unwrap()
    }

    fn marginals(q: &[f64], c: usize, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut hits = vec![0usize; q.len()];
        for _ in 0..n {
            let cache = place_cache(q, c, &mut rng).unwrap();
            assert!(cache.len() <= c);
            for f in cache {
                hits[f] += 1;
            }
        }
        hits.iter().map(|h| *h as f64 / n as f64).collect()
    }

    #[test]
    fn binary_q_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(place_cache(&[1.0, 0.0, 1.0, 0.0], 2, &mut rng).unwrap(), [0, 2]);
        }
    }

    #[test]
    fn placement_marginals_match_q() {
        let n = 10_000;
        for (q, c) in [
            (vec![0.5, 0.5], 1),
            (vec![0.9, 0.35, 0.3, 0.25, 0.2], 2),
            (vec![0.05, 0.6, 0.15, 0.7, 0.5, 1.0], 3),
        ] {
            for (m, &qf) in marginals(&q, c, n).iter().zip(&q) {
                let se = (qf * (1.0 - qf) / n as f64).sqrt();
                assert!((m - qf).abs() <= 3.0 * se + 1e-12, "{m} vs {qf}");
            }
        }
    }

    #[test]
    fn placement_rejects_infeasible_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(place_cache(&[0.8, 0.8], 1, &mut rng).is_err());
        assert!(place_cache(&[1.2], 2, &mut rng).is_err());
    }

    #[test]
    fn nothing_cached_means_nothing_served() {
        let c = cfg(3, 1);
        let policy = Policy::new(vec![0.0; 3], 1.0).unwrap();
        let sim = SimOptions {
            num_drops: 20,
            ..SimOptions::default()
        };
        let r = simulate_sop(&zipf(3), &policy, &c, &sim).unwrap();
        assert_eq!(r.sop_estimate, 0.0);
        assert!(r.users > 0);
    }

    #[test]
    fn vacuous_rate_gives_full_hits() {
        let c = NetworkConfig {
            rate_threshold_r0: 1.0,
            ..cfg(3, 3)
        };
        let policy = Policy::new(vec![1.0; 3], 1.0).unwrap();
        let sim = SimOptions {
            num_drops: 50,
            ..SimOptions::default()
        };
        let r = simulate_sop(&zipf(3), &policy, &c, &sim).unwrap();
        assert!(r.sop_estimate >= 1.0 - 3.0 * r.stderr.max(1e-3), "{r:?}");
    }

    #[test]
    fn beta_must_match_subbands() {
        let c = cfg(3, 1);
        let policy = Policy::new(vec![1.0, 0.0, 0.0], 0.4).unwrap();
        let sim = SimOptions {
            num_drops: 1,
            subband_count_i: 2,
            ..SimOptions::default()
        };
        assert!(simulate_sop(&zipf(3), &policy, &c, &sim).is_err());
        assert_eq!(nearest_subband_count(0.4), 3);
        assert_eq!(nearest_subband_count(0.9), 1);
        assert_eq!(nearest_subband_count(1e-3), 1000);
    }

    #[test]
    fn small_region_is_rejected() {
        let c = cfg(3, 1);
        let sim = SimOptions {
            region_radius: Some(100.0),
            ..SimOptions::default()
        };
        assert!(sim.validate(&c).is_err());
    }

    #[test]
    fn stricter_rate_never_helps() {
        let c = cfg(5, 2);
        let policy = Policy::new(vec![0.8, 0.6, 0.3, 0.2, 0.1], 0.5).unwrap();
        let sim = SimOptions {
            num_drops: 40,
            subband_count_i: 2,
            seed: 7,
            ..SimOptions::default()
        };
        let mut prev = 1.0;
        for r0 in [1e5, 1e6, 2e6, 5e6, 2e7] {
            let c = NetworkConfig {
                rate_threshold_r0: r0,
                ..c.clone()
            };
            let est = simulate_sop(&zipf(5), &policy, &c, &sim).unwrap().sop_estimate;
            assert!(est <= prev, "R0 {r0}: {est} > {prev}");
            prev = est;
        }
    }

    #[test]
    fn stderr_shrinks_with_drops() {
        let c = cfg(5, 2);
        let policy = Policy::new(vec![0.8, 0.6, 0.3, 0.2, 0.1], 1.0).unwrap();
        let run = |n| {
            simulate_sop(
                &zipf(5),
                &policy,
                &c,
                &SimOptions {
                    num_drops: n,
                    seed: 3,
                    ..SimOptions::default()
                },
            )
            .unwrap()
        };
        let (a, b) = (run(25), run(100));
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
        assert!((0.0..=1.0).contains(&a.sop_estimate));
    }

    #[test]
    fn simulation_is_deterministic_and_traced() {
        let c = cfg(4, 1);
        let policy = Policy::new(vec![0.5, 0.3, 0.2, 0.0], 1.0).unwrap();
        let sim = SimOptions {
            num_drops: 10,
            seed: 5,
            ..SimOptions::default()
        };
        let a = simulate_sop(&zipf(4), &policy, &c, &sim).unwrap();
        assert_eq!(a, simulate_sop(&zipf(4), &policy, &c, &sim).unwrap());
        assert_eq!(a.drops.len(), 10);
        let mut buf = Vec::new();
        a.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("drop,users,successes\n0,"));
        assert_eq!(text.lines().count(), 11);
    }

    /// With every file cached everywhere the closed form is the classic
    /// Rayleigh coverage probability `1/(1 + p_a Z)` and the simulation
    /// must reproduce it.
    #[test]
    fn full_cache_matches_closed_form() {
        let c = cfg(1, 1);
        let p = PopularityVector::new(vec![1.0]).unwrap();
        let policy = Policy::new(vec![1.0], 1.0).unwrap();
        let sim = SimOptions {
            num_drops: 400,
            seed: 2,
            ..SimOptions::default()
        };
        let r = simulate_sop(&p, &policy, &c, &sim).unwrap();
        let cf = analytics::sop(&p, &policy, &c).unwrap();
        assert!(
            (r.sop_estimate - cf).abs() <= 4.0 * r.stderr,
            "{} ± {} vs {cf}",
            r.sop_estimate,
            r.stderr
        );
    }

    #[test]
    fn snapshot_matches_the_simulated_drop() {
        let c = cfg(5, 2);
        let p = zipf(5);
        let pol = Policy::new(vec![0.8, 0.6, 0.4, 0.2, 0.0], 0.5).unwrap();
        let sim = SimOptions {
            num_drops: 4,
            subband_count_i: 2,
            seed: 9,
            ..SimOptions::default()
        };
        let r = simulate_sop(&p, &pol, &c, &sim).unwrap();
        for d in 0..4 {
            let snap = snapshot_drop(&p, &pol, &c, &sim, d).unwrap();
            let scored = snap.users.iter().filter(|u| u.scored).count() as u64;
            let ok = snap.users.iter().filter(|u| u.success).count() as u64;
            assert_eq!((scored, ok), (r.drops[d].users, r.drops[d].successes));
            for (i, b) in snap.base_stations.iter().enumerate() {
                assert!(b.files.len() <= 2 && b.subband < 2);
                let served = snap.users.iter().filter(|u| u.serving == Some(i)).count() as u32;
                assert_eq!(served, b.load);
            }
            for u in &snap.users {
                assert!(u.x.hypot(u.y) <= snap.radius);
                if let Some(b) = u.serving {
                    assert!(snap.base_stations[b].files.contains(&u.file));
                }
                assert!(!u.success || (u.scored && u.serving.is_some()));
            }
        }
    }
}
