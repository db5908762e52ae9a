//! Satellite-ground uplink model.
//!
//! Large-scale amplitude, Doppler shift, Rician small-scale fading, ergodic and
//! Shannon capacities, contact plans and per-window byte budgets. Powers are
//! carried in dBm/dBi/dB and converted to linear units only inside formulas.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// How the large-scale amplitude is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LargeScale {
    /// Free-space loss over the slant range with elevation-dependent atmospheric loss and shadowing.
    Geometric,
    /// A fixed large-scale power gain, in dB (e.g. `-160`).
    Fixed { gain_db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBudget {
    pub p_tx_dbm: f64,
    pub g_sat_dbi: f64,
    pub bandwidth_hz: f64,
    pub wavelength_m: f64,
    pub noise_dbm: f64,
    pub theta_min_deg: f64,
    /// Rician factor in dB; `inf` gives a pure line-of-sight channel.
    pub rician_k_db: f64,
    pub shadow_db: f64,
    pub rain_phase_rad: f64,
    /// Atmospheric loss at zenith in dB; scales as `1 / sin(theta)`.
    pub atmos_coeff_db: f64,
    pub large_scale: LargeScale,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            p_tx_dbm: 23.0,
            g_sat_dbi: 40.0,
            bandwidth_hz: 5e6,
            wavelength_m: 0.15,
            noise_dbm: -97.0,
            theta_min_deg: 30.0,
            rician_k_db: 10.0,
            shadow_db: 0.0,
            rain_phase_rad: 0.0,
            atmos_coeff_db: 0.0,
            large_scale: LargeScale::Geometric,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !(self.theta_min_deg > 0.0 && self.theta_min_deg < 90.0) {
            return Err(Error::Config("theta_min must lie in (0, 90) degrees".into()));
        }
        if !self.noise_dbm.is_finite() {
            return Err(Error::Config("noise power must be finite".into()));
        }
        if !(self.wavelength_m > 0.0) {
            return Err(Error::Config("wavelength must be positive".into()));
        }
        Ok(())
    }

    pub fn rician_k_linear(&self) -> f64 {
        db_to_linear(self.rician_k_db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryModel {
    pub altitude_m: f64,
    pub orbital_velocity_mps: f64,
    /// Peak elevation of each pass over a cluster, one per cluster (or one shared value).
    pub peak_elevation_deg: Vec<f64>,
}

impl Default for GeometryModel {
    fn default() -> Self {
        Self {
            altitude_m: 600e3,
            orbital_velocity_mps: 7.5e3,
            peak_elevation_deg: vec![90.0],
        }
    }
}

impl GeometryModel {
    /// Slant range for a circular orbit seen at elevation `theta_deg`.
    pub fn slant_range(&self, theta_deg: f64) -> f64 {
        let s = theta_deg.to_radians().sin();
        let r = EARTH_RADIUS_M;
        let orbit = r + self.altitude_m;
        (orbit * orbit - r * r * (1.0 - s * s)).sqrt() - r * s
    }

    pub fn peak_elevation(&self, cluster: usize) -> f64 {
        match self.peak_elevation_deg.len() {
            0 => 90.0,
            1 => self.peak_elevation_deg[0],
            _ => self.peak_elevation_deg[cluster % self.peak_elevation_deg.len()],
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Large-scale fading amplitude `a(theta)` (linear, amplitude not power).
pub fn large_scale(theta_deg: f64, budget: &LinkBudget, geometry: &GeometryModel) -> Result<f64> {
    if !(theta_deg > 0.0) {
        return Err(Error::Domain(format!("elevation must be positive, got {theta_deg}")));
    }
    Ok(match budget.large_scale {
        LargeScale::Fixed { gain_db } => 10f64.powf(gain_db / 20.0),
        LargeScale::Geometric => {
            let free_space = budget.wavelength_m / (4.0 * PI * geometry.slant_range(theta_deg));
            let atmos_db = budget.atmos_coeff_db / theta_deg.to_radians().sin();
            free_space * 10f64.powf(-atmos_db / 20.0) * 10f64.powf(budget.shadow_db / 20.0)
        }
    })
}

/// Large-scale power gain in dB, exact for fixed-gain budgets.
pub fn large_scale_db(theta_deg: f64, budget: &LinkBudget, geometry: &GeometryModel) -> Result<f64> {
    match budget.large_scale {
        LargeScale::Fixed { gain_db } if theta_deg > 0.0 => Ok(gain_db),
        _ => Ok(20.0 * large_scale(theta_deg, budget, geometry)?.log10()),
    }
}

/// Doppler shift with radial velocity `v cos(theta)`.
pub fn doppler(theta_deg: f64, budget: &LinkBudget, geometry: &GeometryModel) -> f64 {
    let theta = theta_deg.clamp(0.0, 90.0);
    // cos(90 deg) in floating point is ~6e-17, not zero
    let radial = if theta == 90.0 {
        0.0
    } else {
        geometry.orbital_velocity_mps * theta.to_radians().cos()
    };
    radial / budget.wavelength_m
}

/// Unit-mean-power Rician draw: line-of-sight at phase 0 plus circular Gaussian scatter.
pub fn rician_draw(k_linear: f64, rng: &mut impl Rng) -> (f64, f64) {
    if k_linear.is_infinite() {
        return (1.0, 0.0);
    }
    let los = (k_linear / (k_linear + 1.0)).sqrt();
    let scatter = (1.0 / (2.0 * (k_linear + 1.0))).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    (los + scatter * re, scatter * im)
}

/// Complex channel coefficient `(re, im)` at time `t_s` seconds.
pub fn channel(
    t_s: f64,
    theta_deg: f64,
    budget: &LinkBudget,
    geometry: &GeometryModel,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if theta_deg < budget.theta_min_deg {
        return Ok((0.0, 0.0));
    }
    let a = large_scale(theta_deg, budget, geometry)?;
    let phase = budget.rain_phase_rad + 2.0 * PI * doppler(theta_deg, budget, geometry) * t_s;
    let (hr, hi) = rician_draw(budget.rician_k_linear(), rng);
    let (c, s) = (phase.cos(), phase.sin());
    Ok((a * (c * hr - s * hi), a * (c * hi + s * hr)))
}

/// Mean received SNR (linear) at elevation `theta_deg`, without small-scale fading.
pub fn mean_snr(budget: &LinkBudget, theta_deg: f64, geometry: &GeometryModel) -> Result<f64> {
    let gain_db = large_scale_db(theta_deg, budget, geometry)?;
    Ok(db_to_linear(
        budget.p_tx_dbm + budget.g_sat_dbi + gain_db - budget.noise_dbm,
    ))
}

pub fn capacity_bps(bandwidth_hz: f64, snr_linear: f64) -> f64 {
    bandwidth_hz * (1.0 + snr_linear).log2()
}

/// Shannon upper bound on the uplink rate; zero below the elevation threshold.
pub fn shannon_upper(budget: &LinkBudget, theta_deg: f64, geometry: &GeometryModel) -> Result<f64> {
    if theta_deg < budget.theta_min_deg {
        return Ok(0.0);
    }
    Ok(capacity_bps(
        budget.bandwidth_hz,
        mean_snr(budget, theta_deg, geometry)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityEstimate {
    pub rate_bps: f64,
    pub std_error_bps: f64,
}

/// Monte-Carlo ergodic capacity over Rician fading.
pub fn ergodic_capacity(
    budget: &LinkBudget,
    theta_deg: f64,
    geometry: &GeometryModel,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<CapacityEstimate> {
    if n_samples == 0 {
        return Err(Error::Argument("at least one Monte-Carlo sample is required".into()));
    }
    if theta_deg < budget.theta_min_deg {
        return Ok(CapacityEstimate {
            rate_bps: 0.0,
            std_error_bps: 0.0,
        });
    }
    let snr = mean_snr(budget, theta_deg, geometry)?;
    let k = budget.rician_k_linear();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let (re, im) = rician_draw(k, rng);
        let c = capacity_bps(budget.bandwidth_hz, snr * (re * re + im * im));
        sum += c;
        sum_sq += c * c;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(CapacityEstimate {
        rate_bps: mean,
        std_error_bps: (var / n).sqrt(),
    })
}

/// Bytes that fit in a window: `floor(rate * seconds / 8)`.
pub fn window_bytes(rate_bps: f64, window_seconds: f64) -> u64 {
    if !(rate_bps > 0.0) || !(window_seconds > 0.0) {
        return 0;
    }
    (rate_bps * window_seconds / 8.0).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Idle,
    Connected {
        cluster: usize,
        window_s: f64,
        rate_bps: f64,
        /// Per-device upload budget; `None` when the link is not modelled.
        budget_bytes: Option<u64>,
    },
}

impl Slot {
    pub fn cluster(&self) -> Option<usize> {
        match self {
            Slot::Idle => None,
            Slot::Connected { cluster, .. } => Some(*cluster),
        }
    }
}

/// Which cluster (if any) the satellite serves in each round. Round `t`
/// (1-based) is `slots[t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPlan {
    pub clusters: usize,
    pub idle_slots_per_cycle: usize,
    pub slots: Vec<Slot>,
}

impl ContactPlan {
    pub fn cycle_len(&self) -> usize {
        self.clusters + self.idle_slots_per_cycle
    }

    pub fn rounds(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, round: usize) -> Slot {
        self.slots[round - 1]
    }

    pub fn is_cycle_end(&self, round: usize) -> bool {
        round.is_multiple_of(self.cycle_len())
    }

    /// Attach rates and per-device budgets. Clusters whose pass peaks below
    /// the elevation threshold lose their slot.
    pub fn with_link(mut self, budget: &LinkBudget, geometry: &GeometryModel) -> Result<Self> {
        for slot in &mut self.slots {
            if let Slot::Connected { cluster, window_s, .. } = *slot {
                let theta = geometry.peak_elevation(cluster);
                if theta < budget.theta_min_deg {
                    *slot = Slot::Idle;
                    continue;
                }
                let rate = shannon_upper(budget, theta, geometry)?;
                *slot = Slot::Connected {
                    cluster,
                    window_s,
                    rate_bps: rate,
                    budget_bytes: Some(window_bytes(rate, window_s)),
                };
            }
        }
        Ok(self)
    }

    pub fn all_idle(&self) -> bool {
        self.slots.iter().all(|s| matches!(s, Slot::Idle))
    }

    /// Rows `round,cluster,window_s,rate_bps,budget_bytes`, 1-based.
    pub fn export(&self) -> String {
        let mut out = String::from("round,cluster,window_s,rate_bps,budget_bytes\n");
        for (i, slot) in self.slots.iter().enumerate() {
            match slot {
                Slot::Idle => writeln!(out, "{},IDLE,0,0,0", i + 1).unwrap(),
                Slot::Connected {
                    cluster,
                    window_s,
                    rate_bps,
                    budget_bytes,
                } => {
                    let budget = budget_bytes.map_or_else(|| "inf".to_string(), |b| b.to_string());
                    let rate = if rate_bps.is_finite() {
                        format!("{rate_bps}")
                    } else {
                        "inf".to_string()
                    };
                    writeln!(out, "{},{},{window_s},{rate},{budget}", i + 1, cluster + 1).unwrap()
                }
            }
        }
        out
    }
}

/// Connected rounds visit clusters in order, followed by idle rounds, repeated.
/// Round 1 serves cluster 1.
pub fn build_contact_plan(
    clusters: usize,
    total_rounds: usize,
    idle_slots_per_cycle: usize,
    window_seconds: f64,
) -> Result<ContactPlan> {
    if total_rounds == 0 {
        return Err(Error::Argument("a contact plan needs at least one round".into()));
    }
    if clusters == 0 {
        return Err(Error::Argument("a contact plan needs at least one cluster".into()));
    }
    let cycle = clusters + idle_slots_per_cycle;
    let slots = (1..=total_rounds)
        .map(|t| {
            let pos = (t - 1) % cycle;
            if pos < clusters {
                Slot::Connected {
                    cluster: pos,
                    window_s: window_seconds,
                    rate_bps: f64::INFINITY,
                    budget_bytes: None,
                }
            } else {
                Slot::Idle
            }
        })
        .collect();
    Ok(ContactPlan {
        clusters,
        idle_slots_per_cycle,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchor() -> LinkBudget {
        LinkBudget {
            large_scale: LargeScale::Fixed { gain_db: -160.0 },
            ..LinkBudget::default()
        }
    }

    #[test]
    fn free_space_at_zenith() {
        let b = LinkBudget::default();
        let g = GeometryModel::default();
        assert!((g.slant_range(90.0) - 600e3).abs() < 1e-6);
        let a = large_scale(90.0, &b, &g).unwrap();
        let expected = 0.15 / (4.0 * PI * 6e5);
        assert!((a - expected).abs() < 1e-20);
        assert!((a - 1.989e-8).abs() < 1e-11);
        assert!((20.0 * a.log10() + 154.0).abs() < 0.05);
    }

    #[test]
    fn atmospheric_loss_scales_inverse_sine() {
        let b = LinkBudget {
            atmos_coeff_db: 1.5,
            ..LinkBudget::default()
        };
        let g = GeometryModel::default();
        let free = LinkBudget::default();
        let loss =
            |theta: f64| 20.0 * (large_scale(theta, &free, &g).unwrap() / large_scale(theta, &b, &g).unwrap()).log10();
        assert!((loss(30.0) - 2.0 * loss(90.0)).abs() < 1e-9);
    }

    #[test]
    fn non_positive_elevation_is_domain_error() {
        let err = large_scale(0.0, &LinkBudget::default(), &GeometryModel::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn doppler_profile() {
        let b = LinkBudget::default();
        let g = GeometryModel::default();
        assert_eq!(doppler(90.0, &b, &g), 0.0);
        assert!((doppler(60.0, &b, &g) - 25_000.0).abs() < 1e-6);
        assert!((doppler(1e-9, &b, &g) - 7.5e3 / 0.15).abs() < 1e-6);
        assert!(doppler(10.0, &b, &g) > doppler(20.0, &b, &g));
    }

    #[test]
    fn below_threshold_channel_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = channel(3.0, 10.0, &LinkBudget::default(), &GeometryModel::default(), &mut rng).unwrap();
        assert_eq!(h, (0.0, 0.0));
        assert_eq!(
            shannon_upper(&LinkBudget::default(), 10.0, &GeometryModel::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn line_of_sight_limit_has_deterministic_magnitude() {
        let b = LinkBudget {
            rician_k_db: f64::INFINITY,
            ..LinkBudget::default()
        };
        let g = GeometryModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (re, im) = channel(0.0, 75.0, &b, &g, &mut rng).unwrap();
        let a = large_scale(75.0, &b, &g).unwrap();
        assert!(((re * re + im * im).sqrt() - a).abs() < 1e-22);
        // Doppler rotates the phase but keeps the magnitude
        let (re, im) = channel(0.123, 75.0, &b, &g, &mut rng).unwrap();
        assert!(((re * re + im * im).sqrt() - a).abs() / a < 1e-12);
    }

    #[test]
    fn shannon_anchor_values() {
        let g = GeometryModel::default();
        let rate = shannon_upper(&anchor(), 90.0, &g).unwrap();
        assert_eq!(rate, 5e6);
        assert_eq!(capacity_bps(5e6, 0.0), 0.0);
        assert_eq!(capacity_bps(5e6, 3.0), 1e7);
    }

    #[test]
    fn deterministic_channel_ergodic_equals_upper() {
        let b = LinkBudget {
            rician_k_db: f64::INFINITY,
            ..LinkBudget::default()
        };
        let g = GeometryModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = ergodic_capacity(&b, 80.0, &g, 100, &mut rng).unwrap();
        let u = shannon_upper(&b, 80.0, &g).unwrap();
        assert!((e.rate_bps - u).abs() <= 1e-12 * u, "{} vs {u}", e.rate_bps);
        assert!(ergodic_capacity(&b, 80.0, &g, 0, &mut rng).is_err());
    }

    #[test]
    fn window_budgets() {
        assert_eq!(window_bytes(5e6, 600.0), 375_000_000);
        assert_eq!(window_bytes(5e6, 320.0), 200_000_000);
        assert_eq!(window_bytes(0.0, 600.0), 0);
    }

    #[test]
    fn plans_cycle_through_clusters() {
        let p = build_contact_plan(3, 7, 0, 600.0).unwrap();
        let clusters: Vec<_> = p.slots.iter().map(|s| s.cluster()).collect();
        assert_eq!(
            clusters,
            vec![Some(0), Some(1), Some(2), Some(0), Some(1), Some(2), Some(0)]
        );
        let p = build_contact_plan(2, 6, 1, 600.0).unwrap();
        let clusters: Vec<_> = p.slots.iter().map(|s| s.cluster()).collect();
        assert_eq!(clusters, vec![Some(0), Some(1), None, Some(0), Some(1), None]);
        assert!(build_contact_plan(2, 0, 0, 1.0).is_err());
    }

    #[test]
    fn low_peak_elevation_idles_everything() {
        let g = GeometryModel {
            peak_elevation_deg: vec![20.0],
            ..GeometryModel::default()
        };
        let p = build_contact_plan(2, 4, 0, 600.0)
            .unwrap()
            .with_link(&LinkBudget::default(), &g)
            .unwrap();
        assert!(p.all_idle());
    }

    #[test]
    fn plan_export_rows() {
        let p = build_contact_plan(2, 3, 1, 600.0)
            .unwrap()
            .with_link(&anchor(), &GeometryModel::default())
            .unwrap();
        assert_eq!(
            p.export(),
            "round,cluster,window_s,rate_bps,budget_bytes\n1,1,600,5000000,375000000\n2,2,600,5000000,375000000\n3,IDLE,0,0,0\n"
        );
    }
}
