//! Fixtures shared by the integration tests.

#![allow(dead_code)]

pub mod audit;
pub mod gradcheck;
pub mod oracle;

use orbitfl::channel::{build_contact_plan, ContactPlan};
use orbitfl::data::{generate, ClusterDataset, HeterogeneityProfile, ModalitySpec};
use orbitfl::federation::Hyper;
use orbitfl::moe::{MoeConfig, MoeParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn config(layers: usize, experts: usize, top_k: usize, d: usize) -> MoeConfig {
    MoeConfig {
        layers,
        experts,
        top_k,
        d_in: d,
        d_hidden: d + 1,
        d_out: d,
        noise_std: 0.0,
        n_classes: 4,
    }
}

pub fn model(cfg: &MoeConfig, seed: u64) -> MoeParams {
    MoeParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// One modality per cluster, two classes per modality, `devices` shards of `n` samples.
pub fn localized_data(clusters: usize, devices: usize, n: usize, d: usize, seed: u64) -> Vec<ClusterDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<ModalitySpec> = (0..clusters)
        .map(|k| ModalitySpec::isotropic(k, &[(2 * k) % 4, (2 * k + 1) % 4], d, 1.5, 0.7, &mut rng))
        .collect();
    generate(
        &HeterogeneityProfile::identity(clusters),
        &specs,
        clusters,
        devices,
        n,
        seed + 1,
    )
    .unwrap()
}

pub fn plan(clusters: usize, rounds: usize, idle: usize) -> ContactPlan {
    build_contact_plan(clusters, rounds, idle, 600.0).unwrap()
}

/// Full-batch, dense-upload hyperparameters.
pub fn dense_hyper(eta_expert: f64, eta_gate: f64) -> Hyper {
    Hyper {
        eta_expert,
        eta_gate,
        lora_rank: None,
        local_steps: 1,
        local_epochs: 1,
        gate_rounds: 0,
        batch_size: None,
        snapshots: false,
    }
}

/// Upload size of one `rows x cols` matrix at rank `r`: factors only when they are smaller.
pub fn matrix_bytes(rows: usize, cols: usize, rank: Option<usize>) -> u64 {
    let dense = rows * cols;
    let values = match rank {
        Some(r) if cols > 1 && r * (rows + cols) < dense => r * (rows + cols),
        _ => dense,
    };
    8 * values as u64
}

/// Closed-form upload size of one expert (all layers).
pub fn expert_bytes(cfg: &MoeConfig, rank: Option<usize>) -> u64 {
    let (d, h) = (cfg.d_in, cfg.d_hidden);
    let per_layer = matrix_bytes(h, d, rank) + 8 * h as u64 + matrix_bytes(d, h, rank) + 8 * d as u64;
    cfg.layers as u64 * per_layer
}

pub fn gate_bytes(cfg: &MoeConfig, rank: Option<usize>) -> u64 {
    cfg.layers as u64 * matrix_bytes(cfg.experts, cfg.d_in, rank)
}

/// Parameters resident on a device holding `experts` experts, the gate and the frozen backbone.
pub fn loaded_params(cfg: &MoeConfig, experts: usize) -> usize {
    let (d, h) = (cfg.d_in, cfg.d_hidden);
    let backbone = d * d + (cfg.layers - 1) * d * d + cfg.d_out * d + cfg.n_classes * cfg.d_out;
    let expert = cfg.layers * (2 * h * d + h + d);
    let gate = cfg.layers * cfg.experts * d;
    backbone + experts * expert + gate
}
