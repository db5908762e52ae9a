//! Empirical plug-ins for the bound constants.
//!
//! Estimators, all over the cycle-end [`Snapshot`]s of one run:
//!
//! * `L`: largest `|g_i - g_j| / |theta_i - theta_j|` over snapshot pairs.
//! * `G_E`, `G_U`: largest expert / gate gradient norm seen on any device or
//!   on the global dataset.
//! * `sigma^2`: largest mean within-cluster dispersion of device gradients
//!   around their cluster mean.
//! * `zeta_E^2`: largest mean dispersion of cluster-mean expert gradients
//!   around their average.
//! * `F0_gap`: initial loss minus the smallest loss observed.

use std::borrow::Borrow;

use super::bounds::BoundParams;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::federation::{DeviceGradients, Snapshot};
use crate::moe::{backward, MoeParams, Trainable};

/// Squared norm of the full-dataset gradient with respect to `trainable`.
pub fn estimate_grad_variance<B: Borrow<Sample>>(
    params: &MoeParams,
    dataset: &[B],
    trainable: &Trainable,
) -> Result<f64> {
    let (_, g) = backward(params, dataset, trainable, None, None)?;
    Ok(g.norm_sq())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn centroid<'v>(vs: impl Iterator<Item = &'v [f64]>, len: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; len];
    let mut n = 0;
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    (acc, n)
}

/// Mean squared distance of `vs` to their centroid.
fn dispersion(vs: &[&[f64]]) -> f64 {
    if vs.len() < 2 {
        return 0.0;
    }
    let (c, n) = centroid(vs.iter().copied(), vs[0].len());
    vs.iter().map(|v| dist(v, &c).powi(2)).sum::<f64>() / n as f64
}

fn within(devices: &[Vec<DeviceGradients>], pick: fn(&DeviceGradients) -> &[f64]) -> f64 {
    let per_cluster: Vec<f64> = devices
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| dispersion(&d.iter().map(pick).collect::<Vec<_>>()))
        .collect();
    if per_cluster.is_empty() {
        0.0
    } else {
        per_cluster.iter().sum::<f64>() / per_cluster.len() as f64
    }
}

fn between(devices: &[Vec<DeviceGradients>]) -> f64 {
    let means: Vec<Vec<f64>> = devices
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| centroid(d.iter().map(|g| g.expert.as_slice()), d[0].expert.len()).0)
        .collect();
    dispersion(&means.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

/// Plug-in bound constants from at least two snapshots. `gamma` comes from
/// the relevance ratios of the run's assignment.
pub fn estimate_bound_constants(
    snapshots: &[Snapshot],
    initial_loss: f64,
    gamma: f64,
    clusters: usize,
) -> Result<BoundParams> {
    if snapshots.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    let full = |s: &Snapshot| -> Vec<f64> { s.expert_grad.iter().chain(&s.gate_grad).copied().collect() };
    let mut l_smooth: f64 = 0.0;
    for (i, a) in snapshots.iter().enumerate() {
        for b in &snapshots[i + 1..] {
            let dp = dist(&a.params, &b.params);
            if dp > 0.0 {
                l_smooth = l_smooth.max(dist(&full(a), &full(b)) / dp);
            }
        }
    }
    let mut g_e: f64 = 0.0;
    let mut g_u: f64 = 0.0;
    let mut sigma_e_sq: f64 = 0.0;
    let mut sigma_u_sq: f64 = 0.0;
    let mut zeta_e_sq: f64 = 0.0;
    for s in snapshots {
        g_e = g_e.max(norm(&s.expert_grad));
        g_u = g_u.max(norm(&s.gate_grad));
        for d in s.devices.iter().flatten() {
            g_e = g_e.max(norm(&d.expert));
            g_u = g_u.max(norm(&d.gate));
        }
        sigma_e_sq = sigma_e_sq.max(within(&s.devices, |d| &d.expert));
        sigma_u_sq = sigma_u_sq.max(within(&s.devices, |d| &d.gate));
        zeta_e_sq = zeta_e_sq.max(between(&s.devices));
    }
    let min_loss = snapshots.iter().map(|s| s.loss).fold(initial_loss, f64::min);
    Ok(BoundParams {
        l_smooth,
        g_e,
        g_u,
        sigma_e_sq,
        sigma_u_sq,
        zeta_e_sq,
        gamma,
        clusters,
        f0_gap: (initial_loss - min_loss).max(0.0),
    })
}
