//! Browser demo bindings.
//!
//! Each exported function returns a flat `Vec<f64>` of interleaved rows so the
//! page can plot it without a serialization layer. The `*_rows` functions hold
//! the logic and run natively in tests; the wasm wrappers only map errors.

use orbitfl::analysis::{bound_baseline, bound_emsfl, crossover_zeta_sq, BoundParams};
use orbitfl::channel::{ergodic_capacity, shannon_upper, GeometryModel, LinkBudget};
use orbitfl::experiment::{prepare, ExperimentConfig};
use orbitfl::federation::Scheme;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const EXAMPLE_CONFIG: &str = include_str!("../../../configs/example.toml");
const CAPACITY_SAMPLES: usize = 2000;

/// Rows of `[elevation_deg, shannon_mbps, ergodic_mbps]` from the elevation
/// threshold up to zenith.
pub fn capacity_rows(p_tx_dbm: f64, rician_k_db: f64, points: usize) -> Result<Vec<f64>, String> {
    if points < 2 {
        return Err("need at least two points".into());
    }
    let budget = LinkBudget {
        p_tx_dbm,
        rician_k_db,
        ..LinkBudget::default()
    };
    budget.validate().map_err(|e| e.to_string())?;
    let geometry = GeometryModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lo = budget.theta_min_deg;
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let theta = lo + (90.0 - lo) * i as f64 / (points - 1) as f64;
        let upper = shannon_upper(&budget, theta, &geometry).map_err(|e| e.to_string())?;
        let ergodic =
            ergodic_capacity(&budget, theta, &geometry, CAPACITY_SAMPLES, &mut rng).map_err(|e| e.to_string())?;
        out.extend([theta, upper / 1e6, ergodic.rate_bps / 1e6]);
    }
    Ok(out)
}

fn unit_params(zeta_e_sq: f64, gamma: f64, clusters: usize) -> BoundParams {
    BoundParams {
        l_smooth: 1.0,
        g_e: 1.0,
        g_u: 1.0,
        sigma_e_sq: 1.0,
        sigma_u_sq: 1.0,
        zeta_e_sq,
        gamma,
        clusters,
        f0_gap: 1.0,
    }
}

/// Rows of `[T, bound_emsfl, bound_baseline]` for log-spaced `T` in
/// `[1, t_max]` with unit smoothness, gradient and variance constants.
pub fn bound_rows(
    zeta_e_sq: f64,
    gamma: f64,
    clusters: usize,
    t_max: usize,
    points: usize,
) -> Result<Vec<f64>, String> {
    if points < 2 || t_max < 2 {
        return Err("need at least two points and t_max >= 2".into());
    }
    let p = unit_params(zeta_e_sq, gamma, clusters);
    p.validate().map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * points);
    let mut last = 0;
    for i in 0..points {
        let t = ((t_max as f64).ln() * i as f64 / (points - 1) as f64).exp().round() as usize;
        if t == last {
            continue;
        }
        last = t;
        let ems = bound_emsfl(&p, t).map_err(|e| e.to_string())?;
        let base = bound_baseline(&p, t).map_err(|e| e.to_string())?;
        out.extend([t as f64, ems, base]);
    }
    Ok(out)
}

/// Heterogeneity above which the EMS-FL bound is the tighter one, or `NaN`
/// when it never is.
pub fn crossover_value(gamma: f64, clusters: usize) -> Result<f64, String> {
    let p = unit_params(0.0, gamma, clusters);
    p.validate().map_err(|e| e.to_string())?;
    Ok(crossover_zeta_sq(&p, 1).map_err(|e| e.to_string())?.unwrap_or(f64::NAN))
}

/// Rows of `[round, global_loss, cumulative_uplink_bytes]` for the bundled
/// three-cluster scenario. Rounds without a loss evaluation carry `NaN`.
pub fn convergence_rows(scheme: &str, seed: u64, cycles: usize) -> Result<Vec<f64>, String> {
    let mut config = ExperimentConfig::from_toml(EXAMPLE_CONFIG).map_err(|e| e.to_string())?;
    config.scheme = match scheme {
        "baseline" => Scheme::Baseline,
        "ems_fl" => Scheme::EmsFl,
        "enhanced" => Scheme::Enhanced,
        other => return Err(format!("unknown scheme {other:?}")),
    };
    config.seed = seed;
    config.train.cycles = cycles;
    let prepared = prepare(&config).map_err(|e| e.to_string())?;
    let output = prepared.run().map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * (output.logs.len() + 1));
    out.extend([0.0, output.initial_loss, 0.0]);
    let mut bytes = 0u64;
    for log in &output.logs {
        bytes += log.bytes_up;
        out.extend([log.round as f64, log.loss_global.unwrap_or(f64::NAN), bytes as f64]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn capacity_curve(p_tx_dbm: f64, rician_k_db: f64, points: usize) -> Result<Vec<f64>, JsError> {
    capacity_rows(p_tx_dbm, rician_k_db, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn bound_curves(
    zeta_e_sq: f64,
    gamma: f64,
    clusters: usize,
    t_max: usize,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    bound_rows(zeta_e_sq, gamma, clusters, t_max, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn crossover(gamma: f64, clusters: usize) -> Result<f64, JsError> {
    crossover_value(gamma, clusters).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn convergence_demo(scheme: &str, seed: u32, cycles: usize) -> Result<Vec<f64>, JsError> {
    convergence_rows(scheme, seed.into(), cycles).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_rises_with_elevation_and_stays_below_shannon() {
        let rows = capacity_rows(23.0, 10.0, 7).unwrap();
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0], 30.0);
        assert_eq!(rows[18], 90.0);
        for r in rows.chunks(3) {
            // Jensen: fading can only lose rate on average
            assert!(r[2] <= r[1] * 1.001, "{r:?}");
        }
        assert!(rows[19] > rows[1]);
        assert!(capacity_rows(23.0, 10.0, 1).is_err());
    }

    #[test]
    fn bound_rows_halve_when_t_quadruples() {
        let rows = bound_rows(0.0, 1.0, 2, 16, 3).unwrap();
        let ts: Vec<f64> = rows.chunks(3).map(|r| r[0]).collect();
        assert_eq!(ts, vec![1.0, 4.0, 16.0]);
        assert!((rows[1] / rows[4] - 2.0).abs() < 1e-12);
        assert!((rows[2] / rows[5] - 2.0).abs() < 1e-12);
        assert!(bound_rows(0.0, 3.0, 2, 16, 3).is_err());
    }

    #[test]
    fn crossover_matches_unit_case() {
        assert!((crossover_value(1.0, 2).unwrap() - 2.0).abs() < 1e-8);
        assert!(crossover_value(0.5, 2).is_err());
    }

    #[test]
    fn convergence_demo_is_deterministic_and_saves_bytes() {
        let ems = convergence_rows("ems_fl", 1, 2).unwrap();
        assert_eq!(ems, convergence_rows("ems_fl", 1, 2).unwrap());
        let base = convergence_rows("baseline", 1, 2).unwrap();
        // round 0 plus 2 cycles of 3 contacts and 3 idle slots
        assert_eq!(ems.len(), 3 * 13);
        assert_eq!(ems[1], base[1]);
        assert!(ems[ems.len() - 1] < base[base.len() - 1]);
        assert!(convergence_rows("fedavg", 1, 2).is_err());
    }
}
