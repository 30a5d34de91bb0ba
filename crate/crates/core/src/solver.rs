//! Joint caching/bandwidth optimization for a known popularity vector:
//! maximize the closed-form SOP subject to `Σq ≤ C`, `q ∈ [0,1]^F`,
//! `β ∈ [β_min, 1]`.
//!
//! For fixed β every summand `p q / (a q + b)` is concave in `q`, so the
//! only source of multiple local optima is β. Multi-start projected
//! gradient ascent covers that dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, NetworkConfig, Policy, PopularityVector, SopTerms};
use crate::error::{Error, Result};

/// Lower clamp on β; the open constraint β > 0 is replaced by β ≥ β_min.
pub const BETA_MIN: f64 = 1e-3;

const ARMIJO: f64 = 1e-4;
const MAX_STEP: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Initial ascent step; adapted by backtracking.
    pub step_size: f64,
    /// Stop once the projected-gradient residual falls below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Number of starts (popularity-proportional, top-C, then random).
    pub restarts: usize,
    /// Hold β at this value instead of optimizing it.
    pub fixed_beta: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step_size: 1.0,
            tolerance: 1e-7,
            seed: 0,
            restarts: 5,
            fixed_beta: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.tolerance > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::invalid("tolerance and step_size must be > 0"));
        }
        if self.restarts < 1 {
            return Err(Error::invalid("restarts must be >= 1"));
        }
        if let Some(b) = self.fixed_beta {
            if !(BETA_MIN..=1.0).contains(&b) {
                return Err(Error::invalid(format!("fixed_beta {b} outside [{BETA_MIN}, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P0Solution {
    pub policy: Policy,
    pub sop: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of `P(x + ∇f) − x` at the returned point.
    pub kkt_residual: f64,
    /// Index of the winning start.
    pub restart: usize,
    /// Objective after each accepted step of the winning start.
    pub history: Vec<f64>,
}

/// Euclidean projection onto `{q ∈ [0,1]^F : Σq ≤ cap}`.
pub fn project_capped_simplex(q: &[f64], cap: f64) -> Vec<f64> {
    let clipped: Vec<f64> = q.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    if clipped.iter().sum::<f64>() <= cap {
        return clipped;
    }
    // Σ clamp(q − μ, 0, 1) is non-increasing in μ; bisect for the level `cap`.
    let mass = |mu: f64| q.iter().map(|v| (v - mu).clamp(0.0, 1.0)).sum::<f64>();
    let mut lo = q.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    q.iter().map(|v| (v - hi).clamp(0.0, 1.0)).collect()
}

struct Point {
    q: Vec<f64>,
    beta: f64,
    value: f64,
    grad_q: Vec<f64>,
    grad_beta: f64,
}

struct Problem<'a> {
    p: &'a [f64],
    cfg: &'a NetworkConfig,
    cap: f64,
    fixed_beta: Option<f64>,
}

impl Problem<'_> {
    fn eval(&self, q: Vec<f64>, beta: f64) -> Result<Point> {
        let e = analytics::sop_eval_raw(self.p, &q, beta, self.cfg)?;
        Ok(Point {
            q,
            beta,
            value: e.value,
            grad_q: e.grad_q,
            grad_beta: if self.fixed_beta.is_some() { 0.0 } else { e.grad_beta },
        })
    }

    fn project(&self, q: &[f64], beta: f64) -> (Vec<f64>, f64) {
        let beta = self.fixed_beta.unwrap_or_else(|| beta.clamp(BETA_MIN, 1.0));
        (project_capped_simplex(q, self.cap), beta)
    }

    fn stepped(&self, x: &Point, step: f64) -> (Vec<f64>, f64) {
        let q: Vec<f64> = x.q.iter().zip(&x.grad_q).map(|(v, g)| v + step * g).collect();
        self.project(&q, x.beta + step * x.grad_beta)
    }

    fn residual(&self, x: &Point) -> f64 {
        let (q, beta) = self.stepped(x, 1.0);
        let dq: f64 = q.iter().zip(&x.q).map(|(a, b)| (a - b).powi(2)).sum();
        (dq + (beta - x.beta).powi(2)).sqrt()
    }

    fn ascend(&self, q0: Vec<f64>, beta0: f64, opts: &SolverOptions) -> Result<(Point, usize, f64, bool, Vec<f64>)> {
        let (q0, beta0) = self.project(&q0, beta0);
        let mut x = self.eval(q0, beta0)?;
        let mut step = opts.step_size;
        let mut history = vec![x.value];
        let mut residual = self.residual(&x);
        let mut iters = 0;
        while iters < opts.max_iters && residual > opts.tolerance {
            iters += 1;
            let mut accepted = None;
            while step > 1e-14 {
                let (q, beta) = self.stepped(&x, step);
                let ascent: f64 = q
                    .iter()
                    .zip(&x.q)
                    .zip(&x.grad_q)
                    .map(|((a, b), g)| (a - b) * g)
                    .sum::<f64>()
                    + (beta - x.beta) * x.grad_beta;
                let cand = self.eval(q, beta)?;
                if cand.value >= x.value + ARMIJO * ascent {
                    accepted = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some(next) => {
                    x = next;
                    history.push(x.value);
                    step = (2.0 * step).min(MAX_STEP);
                    residual = self.residual(&x);
                }
                // No ascent possible at machine precision.
                None => break,
            }
        }
        let converged = residual <= opts.tolerance;
        Ok((x, iters, residual, converged, history))
    }
}

fn top_c_start(p: &[f64], c: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut q = vec![0.0; p.len()];
    for &i in order.iter().take(c) {
        q[i] = 1.0;
    }
    q
}

/// Maximizes the closed-form SOP for a known popularity vector.
///
/// Non-convergence within `max_iters` is reported through
/// [`P0Solution::converged`], never as an error.
pub fn solve_p0(p: &PopularityVector, cfg: &NetworkConfig, opts: &SolverOptions) -> Result<P0Solution> {
    cfg.validate()?;
    opts.validate()?;
    if p.len() != cfg.num_files_f {
        return Err(Error::dim(cfg.num_files_f, p.len(), "popularity vs num_files_f"));
    }
    let cap = cfg.capacity();
    let problem = Problem {
        p: p.as_slice(),
        cfg,
        cap,
        fixed_beta: opts.fixed_beta,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let f = p.len();
    let mut best: Option<P0Solution> = None;
    for restart in 0..opts.restarts {
        let (q0, beta0) = match restart {
            0 => (p.as_slice().iter().map(|v| (v * cap).min(1.0)).collect(), 1.0),
            1 => (top_c_start(p.as_slice(), cfg.cache_size_c), 1.0),
            _ => {
                let q = (0..f).map(|_| rng.random::<f64>()).collect();
                (q, rng.random_range(BETA_MIN..=1.0))
            }
        };
        let (x, iterations, kkt_residual, converged, history) = problem.ascend(q0, beta0, opts)?;
        if best.as_ref().is_none_or(|b| x.value > b.sop) {
            best = Some(P0Solution {
                policy: Policy::new(x.q, x.beta)?,
                sop: x.value,
                converged,
                iterations,
                kkt_residual,
                restart,
                history,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Largest F accepted by [`grid_oracle`].
pub const GRID_MAX_FILES: usize = 4;

/// Exhaustive search over a `q_step` grid of caching vectors and a
/// `beta_step` grid of `β ∈ (0, 1]`.
///
/// Because SOP is non-decreasing in every `q_f`, the last coordinate is
/// always set to the largest feasible grid value; every other grid point
/// is dominated by such a point.
pub fn grid_oracle(p: &PopularityVector, cfg: &NetworkConfig, q_step: f64, beta_step: f64) -> Result<(Policy, f64)> {
    if !(beta_step > 0.0 && beta_step <= 1.0) {
        return Err(Error::invalid("beta_step must lie in (0, 1]"));
    }
    let n = (1.0 / beta_step).round() as usize;
    let betas: Vec<f64> = (1..=n).map(|k| (k as f64 * beta_step).min(1.0)).collect();
    grid_search(p, cfg, q_step, &betas)
}

/// [`grid_oracle`] with β held at one value.
pub fn grid_oracle_at_beta(p: &PopularityVector, cfg: &NetworkConfig, q_step: f64, beta: f64) -> Result<(Policy, f64)> {
    grid_search(p, cfg, q_step, &[beta])
}

fn grid_search(p: &PopularityVector, cfg: &NetworkConfig, q_step: f64, betas: &[f64]) -> Result<(Policy, f64)> {
    cfg.validate()?;
    let f = p.len();
    if f > GRID_MAX_FILES {
        return Err(Error::TooLarge(format!(
            "grid oracle handles at most {GRID_MAX_FILES} files, got {f}"
        )));
    }
    if !(q_step > 0.0 && q_step <= 1.0) {
        return Err(Error::invalid("q_step must lie in (0, 1]"));
    }
    let levels = (1.0 / q_step).round() as usize;
    let cap_units = ((cfg.capacity() / q_step) + 1e-9).floor() as usize;
    let value_of = |k: usize| (k as f64 / levels as f64).min(1.0);

    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut idx = vec![0usize; f];
    let mut q = vec![0.0; f];
    for &beta in betas {
        let terms: SopTerms = analytics::compute_terms(cfg, beta)?;
        idx.fill(0);
        'grid: loop {
            let used: usize = idx[..f - 1].iter().sum();
            if used <= cap_units {
                let last = levels.min(cap_units - used);
                for (qi, &k) in q.iter_mut().zip(&idx[..f - 1]) {
                    *qi = value_of(k);
                }
                q[f - 1] = value_of(last);
                let v = analytics::sop_with_terms(p.as_slice(), &q, &terms);
                if best.as_ref().is_none_or(|b| v > b.2) {
                    best = Some((q.clone(), beta, v));
                }
            }
            // Odometer over the first F−1 coordinates.
            let mut d = 0;
            loop {
                if d + 1 >= f {
                    break 'grid;
                }
                idx[d] += 1;
                if idx[d] <= levels {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }
    let (q, beta, v) = best.expect("grid is non-empty");
    Ok((Policy::new(q, beta)?, v))
}
