//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes and returns plain numbers, vectors or strings. The
//! logic lives in ordinary functions so it can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors into JS exceptions.

use femtocache::data::gen_zipf;
use femtocache::netsim::{nearest_subband_count, snapshot_drop, SimOptions};
use femtocache::solver::{solve_p0, SolverOptions};
use femtocache::{NetworkConfig, Policy, PopularityVector};
use wasm_bindgen::prelude::*;

/// Network with the default densities and bandwidth.
pub fn network(num_files: usize, cache_size: usize, rate_mbps: f64) -> Result<NetworkConfig, String> {
    let cfg = NetworkConfig {
        num_files_f: num_files,
        cache_size_c: cache_size,
        rate_threshold_r0: rate_mbps * 1e6,
        ..NetworkConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn zipf_popularity(num_files: usize, exponent: f64) -> Result<PopularityVector, String> {
    let series = gen_zipf(num_files, exponent, 1).map_err(|e| e.to_string())?;
    Ok(series.periods()[0].clone())
}

fn solve(p: &PopularityVector, cfg: &NetworkConfig, fixed_beta: Option<f64>) -> Result<(Policy, f64), String> {
    let opts = SolverOptions {
        fixed_beta,
        ..SolverOptions::default()
    };
    let sol = solve_p0(p, cfg, &opts).map_err(|e| e.to_string())?;
    Ok((sol.policy, sol.sop))
}

/// Best SOP at `points` evenly spaced bandwidth fractions `β = k/points`,
/// flattened as `[β₁, sop₁, β₂, sop₂, …]`.
pub fn sop_curve(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    if points == 0 {
        return Err("points must be positive".into());
    }
    let cfg = network(num_files, cache_size, rate_mbps)?;
    let p = zipf_popularity(num_files, zipf_exponent)?;
    let mut out = Vec::with_capacity(2 * points);
    for k in 1..=points {
        let beta = k as f64 / points as f64;
        let (_, sop) = solve(&p, &cfg, Some(beta))?;
        out.extend([beta, sop]);
    }
    Ok(out)
}

/// Jointly optimal policy for a Zipf catalog as `[sop, β, q₁, …, q_F]`.
pub fn optimal_policy(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
) -> Result<Vec<f64>, String> {
    let cfg = network(num_files, cache_size, rate_mbps)?;
    let p = zipf_popularity(num_files, zipf_exponent)?;
    let (policy, sop) = solve(&p, &cfg, None)?;
    let mut out = vec![sop, policy.beta];
    out.extend(policy.q);
    Ok(out)
}

/// One simulated drop with `subbands` subbands, caching by the optimal
/// placement probabilities at `β = 1/subbands`, as a JSON `DropSnapshot`.
pub fn drop_snapshot(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
    subbands: u32,
    seed: u64,
) -> Result<String, String> {
    if subbands == 0 {
        return Err("subbands must be positive".into());
    }
    let cfg = network(num_files, cache_size, rate_mbps)?;
    let p = zipf_popularity(num_files, zipf_exponent)?;
    let (policy, _) = solve(&p, &cfg, Some(1.0 / subbands as f64))?;
    debug_assert_eq!(nearest_subband_count(policy.beta), subbands);
    let sim = SimOptions {
        num_drops: 1,
        subband_count_i: subbands,
        seed,
        ..SimOptions::default()
    };
    let snap = snapshot_drop(&p, &policy, &cfg, &sim, 0).map_err(|e| e.to_string())?;
    serde_json::to_string(&snap).map_err(|e| e.to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sopCurve)]
pub fn sop_curve_js(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
    points: usize,
) -> Result<Vec<f64>, JsValue> {
    js(sop_curve(zipf_exponent, num_files, cache_size, rate_mbps, points))
}

#[wasm_bindgen(js_name = optimalPolicy)]
pub fn optimal_policy_js(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
) -> Result<Vec<f64>, JsValue> {
    js(optimal_policy(zipf_exponent, num_files, cache_size, rate_mbps))
}

#[wasm_bindgen(js_name = dropSnapshot)]
pub fn drop_snapshot_js(
    zipf_exponent: f64,
    num_files: usize,
    cache_size: usize,
    rate_mbps: f64,
    subbands: u32,
    seed: u32,
) -> Result<String, JsValue> {
    js(drop_snapshot(
        zipf_exponent,
        num_files,
        cache_size,
        rate_mbps,
        subbands,
        u64::from(seed),
    ))
}
