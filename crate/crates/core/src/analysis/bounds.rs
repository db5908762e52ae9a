//! Closed-form convergence bounds on the averaged squared gradient norm.
//!
//! `bound_emsfl` covers expert-split training, `bound_baseline` covers
//! synchronous full-model training. Both decay as `1 / sqrt(T)` in the number
//! of orbital cycles `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants of the smoothness, bounded-gradient, variance and heterogeneity
/// assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub l_smooth: f64,
    pub g_e: f64,
    pub g_u: f64,
    pub sigma_e_sq: f64,
    pub sigma_u_sq: f64,
    /// Between-cluster heterogeneity of expert gradients (baseline only).
    pub zeta_e_sq: f64,
    /// Largest local-to-global expert-relevant density ratio.
    pub gamma: f64,
    pub clusters: usize,
    /// Initial optimality gap `F(theta_0) - F*`.
    pub f0_gap: f64,
}

impl BoundParams {
    fn check_domain(&self, t: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Domain("cluster count must be >= 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Domain(format!("gamma must be positive, got {}", self.gamma)));
        }
        if t == 0 {
            return Err(Error::Domain("T must be >= 1".into()));
        }
        let fields = [
            ("l_smooth", self.l_smooth),
            ("g_e", self.g_e),
            ("g_u", self.g_u),
            ("sigma_e_sq", self.sigma_e_sq),
            ("sigma_u_sq", self.sigma_u_sq),
            ("zeta_e_sq", self.zeta_e_sq),
            ("f0_gap", self.f0_gap),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
        Ok(())
    }

    /// Full validity check, including `1 <= gamma <= C`.
    pub fn validate(&self) -> Result<()> {
        self.check_domain(1)?;
        if self.gamma < 1.0 || self.gamma > self.clusters as f64 {
            return Err(Error::Validation(format!(
                "gamma must lie in [1, C = {}], got {}",
                self.clusters, self.gamma
            )));
        }
        Ok(())
    }
}

/// `F0/(gamma C sqrt T) + 5 L C^2 gamma [C (G_E^2 + s_E^2) + G_U^2 + s_U^2] / sqrt T`.
pub fn bound_emsfl(p: &BoundParams, t: usize) -> Result<f64> {
    p.check_domain(t)?;
    let c = p.clusters as f64;
    let sqrt_t = (t as f64).sqrt();
    let first = p.f0_gap / (p.gamma * c * sqrt_t);
    let inner = c * (p.g_e * p.g_e + p.sigma_e_sq) + p.g_u * p.g_u + p.sigma_u_sq;
    Ok(first + 5.0 * p.l_smooth * c * c * p.gamma * inner / sqrt_t)
}

/// `F0/(C sqrt T) + [5 L C^2 (G_E^2 + z_E^2 + s_E^2) + 5 L C^2 gamma^2 (G_U^2 + s_U^2)] / sqrt T`.
pub fn bound_baseline(p: &BoundParams, t: usize) -> Result<f64> {
    p.check_domain(t)?;
    let c = p.clusters as f64;
    let sqrt_t = (t as f64).sqrt();
    let first = p.f0_gap / (c * sqrt_t);
    let expert = 5.0 * p.l_smooth * c * c * (p.g_e * p.g_e + p.zeta_e_sq + p.sigma_e_sq);
    let gate = 5.0 * p.l_smooth * c * c * p.gamma * p.gamma * (p.g_u * p.g_u + p.sigma_u_sq);
    Ok(first + (expert + gate) / sqrt_t)
}

pub const CROSSOVER_TOL: f64 = 1e-9;

/// Smallest heterogeneity `zeta_E^2` at which the baseline bound reaches the
/// EMS-FL bound, found by bisection. `zeta_e_sq` in `p` is ignored. Returns
/// `Some(0.0)` when the baseline bound is already at least as large and
/// `None` when it never catches up (`L = 0`). Both bounds scale as
/// `1 / sqrt(T)`, so the crossover does not depend on `T`; it is computed at
/// `T = 1` once `t` has been checked.
pub fn crossover_zeta_sq(p: &BoundParams, t: usize) -> Result<Option<f64>> {
    p.check_domain(t)?;
    let t = 1;
    let ems = bound_emsfl(p, t)?;
    let base_at = |z: f64| {
        bound_baseline(
            &BoundParams {
                zeta_e_sq: z,
                ..p.clone()
            },
            t,
        )
    };
    if base_at(0.0)? >= ems {
        return Ok(Some(0.0));
    }
    if p.l_smooth == 0.0 {
        return Ok(None);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while base_at(hi)? < ems {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Ok(None);
        }
    }
    while hi - lo > CROSSOVER_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if base_at(mid)? < ems {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(hi))
}

/// Step sizes satisfying `eta_E <= eta_U / gamma <= 1 / sqrt(T)`, taken at equality.
pub fn step_sizes(gamma: f64, t: usize) -> Result<(f64, f64)> {
    if !(gamma >= 1.0) || t == 0 {
        return Err(Error::Domain("step sizes need gamma >= 1 and T >= 1".into()));
    }
    let eta_u = 1.0 / (t as f64).sqrt();
    Ok((eta_u / gamma, eta_u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(c: usize, gamma: f64) -> BoundParams {
        BoundParams {
            l_smooth: 1.0,
            g_e: 1.0,
            g_u: 1.0,
            sigma_e_sq: 1.0,
            sigma_u_sq: 1.0,
            zeta_e_sq: 0.0,
            gamma,
            clusters: c,
            f0_gap: 1.0,
        }
    }

    #[test]
    fn hand_arithmetic_points() {
        let p = unit(2, 1.0);
        // 1/(1*2*10) + 5*1*4*1*(2*2 + 2)/10
        assert!((bound_emsfl(&p, 100).unwrap() - 12.05).abs() < 1e-12);
        // 1/(2*10) + (5*4*2 + 5*4*1*2)/10
        assert!((bound_baseline(&p, 100).unwrap() - 8.05).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let mut p = unit(2, 0.0);
        assert!(matches!(bound_emsfl(&p, 10), Err(Error::Domain(_))));
        p.gamma = 1.0;
        p.clusters = 0;
        assert!(matches!(bound_baseline(&p, 10), Err(Error::Domain(_))));
        assert!(matches!(bound_emsfl(&unit(2, 1.0), 0), Err(Error::Domain(_))));
        assert!(unit(2, 3.0).validate().is_err());
        assert!(unit(2, 2.0).validate().is_ok());
    }

    #[test]
    fn f0_enters_first_term_only() {
        let p = unit(3, 2.0);
        let q = BoundParams {
            f0_gap: 2.0,
            ..p.clone()
        };
        let d = bound_emsfl(&q, 49).unwrap() - bound_emsfl(&p, 49).unwrap();
        assert!((d - 1.0 / (2.0 * 3.0 * 7.0)).abs() < 1e-12);
    }

    #[test]
    fn crossover_balances_the_bounds() {
        let p = unit(3, 3.0);
        let z = crossover_zeta_sq(&p, 100).unwrap().unwrap();
        let ems = bound_emsfl(&p, 100).unwrap();
        let base = bound_baseline(
            &BoundParams {
                zeta_e_sq: z,
                ..p.clone()
            },
            100,
        )
        .unwrap();
        assert!((base - ems).abs() < 1e-6 * ems);
        // independent of T
        let z2 = crossover_zeta_sq(&p, 10_000).unwrap().unwrap();
        assert!((z - z2).abs() < 1e-6 * z);
        // without curvature terms only the first terms remain, and F0/C >= F0/(gamma C)
        let flat = BoundParams { l_smooth: 0.0, ..p };
        assert_eq!(crossover_zeta_sq(&flat, 100).unwrap(), Some(0.0));
    }

    #[test]
    fn step_size_rule() {
        let (e, u) = step_sizes(4.0, 100).unwrap();
        assert!((u - 0.1).abs() < 1e-15);
        assert!((e - 0.025).abs() < 1e-15);
        assert!(step_sizes(0.5, 100).is_err());
    }
}
