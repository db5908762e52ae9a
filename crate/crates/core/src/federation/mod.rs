//! Federated training protocols.
//!
//! Three schemes share one round-driven simulator ([`Simulation`]):
//!
//! * `Baseline`: the connected cluster receives the whole model, takes a
//!   local step on every expert and the gate, and uploads everything.
//!   Disconnected clusters sit idle.
//! * `EmsFl`: each cluster owns a disjoint expert group. The connected
//!   cluster uploads its group, downloads the aggregated model, trains its
//!   group plus the gate, and uploads the gate. Disconnected clusters keep
//!   training their own experts with the gate frozen.
//! * `Enhanced`: like `EmsFl`, but routing on every device is masked to the
//!   cluster's own experts and the gate stays frozen; the last `gate_rounds`
//!   rounds switch to plain `EmsFl` to tune the gate.
//!
//! Uploads go through [`lowrank`]; rounds whose per-device upload exceeds the
//! window budget are logged as infeasible and skip aggregation.

pub mod checkpoint;
pub mod lowrank;
mod sim;
pub mod warmup;

use std::borrow::Borrow;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::moe::{backward, Expert, ExpertMask, Gate, MoeParams, Trainable};
use crate::tensor;

pub use sim::{
    run, run_baseline, run_ems_fl, run_enhanced, take_snapshot, ClusterState, DeviceGradients, GlobalModelState,
    RunOutput, Simulation, Snapshot,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    EmsFl,
    Enhanced,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Baseline, Scheme::EmsFl, Scheme::Enhanced];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::EmsFl => "ems_fl",
            Scheme::Enhanced => "enhanced",
        }
    }

    fn code(self) -> u8 {
        match self {
            Scheme::Baseline => 0,
            Scheme::EmsFl => 1,
            Scheme::Enhanced => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Scheme::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (expected baseline, ems_fl or enhanced)")))
    }
}

/// Training hyperparameters shared by all schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub eta_expert: f64,
    pub eta_gate: f64,
    /// Upload rank; `None` uploads dense tensors.
    pub lora_rank: Option<usize>,
    /// Local steps per connected round.
    pub local_steps: usize,
    /// Local expert steps per round for clusters out of view.
    pub local_epochs: usize,
    /// Enhanced scheme only: trailing rounds of plain EMS-FL gate tuning.
    pub gate_rounds: usize,
    /// Minibatch size; `None` uses the full shard.
    pub batch_size: Option<usize>,
    /// Record gradient snapshots at every cycle end.
    pub snapshots: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            eta_expert: 0.05,
            eta_gate: 0.05,
            lora_rank: Some(4),
            local_steps: 1,
            local_epochs: 1,
            gate_rounds: 0,
            batch_size: None,
            snapshots: false,
        }
    }
}

fn check_step_size(name: &str, eta: f64) -> Result<()> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::Config(format!(
            "{name} must be a finite non-negative step size, got {eta}"
        )));
    }
    Ok(())
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        check_step_size("eta_expert", self.eta_expert)?;
        check_step_size("eta_gate", self.eta_gate)?;
        if self.lora_rank == Some(0) {
            return Err(Error::Config("lora_rank must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One gradient-descent step on the trainable groups of a device model.
/// Returns the pre-step batch loss.
pub fn local_step<B: Borrow<Sample>>(
    device: &mut MoeParams,
    batch: &[B],
    trainable: &Trainable,
    mask: Option<&ExpertMask>,
    eta_expert: f64,
    eta_gate: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    check_step_size("eta_expert", eta_expert)?;
    check_step_size("eta_gate", eta_gate)?;
    let (loss, grads) = backward(device, batch, trainable, mask, rng)?;
    device.apply_gradients(&grads, eta_expert, eta_gate);
    Ok(loss)
}

/// Expert-wise aggregation: elementwise mean of the uploaded copies.
pub fn aggregate_experts(copies: &[Expert]) -> Result<Expert> {
    tensor::mean(copies)
}

/// Gate aggregation: elementwise mean of the uploaded gates.
pub fn aggregate_gate(copies: &[Gate]) -> Result<Gate> {
    tensor::mean(copies)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Enhanced scheme before gate tuning.
    Expert,
    /// Every other round.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Aggregate,
    Infeasible,
    LocalStep,
    Idle,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Aggregate => "aggregate",
            EventKind::Infeasible => "infeasible",
            EventKind::LocalStep => "local-step",
            EventKind::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub scheme: Scheme,
    pub phase: Phase,
    pub event: EventKind,
    /// Connected cluster, 0-based.
    pub cluster: Option<usize>,
    /// Experts whose global copy was replaced by an aggregate this round.
    pub experts_aggregated: Vec<usize>,
    pub gate_aggregated: bool,
    /// Bytes delivered by all devices of the connected cluster.
    pub bytes_up: u64,
    /// Bytes the connected cluster needed to send, delivered or not.
    pub bytes_required: u64,
    /// Window budget summed over the connected cluster's devices.
    pub bytes_budget: Option<u64>,
    pub params_loaded_max: usize,
    pub loss_global: Option<f64>,
    pub grad_var_est: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "round,scheme,event,cluster,loss_global,grad_var_est,bytes_up,bytes_budget,params_loaded_max";

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV: header plus one row per round. Clusters are written 1-based,
/// `-` when idle; unknown budgets as `inf`.
pub fn metrics_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.round,
            l.scheme,
            l.event.as_str(),
            l.cluster.map_or_else(|| "-".to_string(), |c| (c + 1).to_string()),
            opt_f64(l.loss_global),
            opt_f64(l.grad_var_est),
            l.bytes_up,
            l.bytes_budget.map_or_else(|| "inf".to_string(), |b| b.to_string()),
            l.params_loaded_max
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{MoeConfig, Trainable};
    use crate::tensor::ParamGroup;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> MoeParams {
        let cfg = MoeConfig {
            layers: 1,
            experts: 2,
            top_k: 1,
            d_in: 3,
            d_hidden: 4,
            d_out: 3,
            noise_std: 0.0,
            n_classes: 2,
        };
        MoeParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn batch() -> Vec<Sample> {
        vec![
            Sample {
                x: DVector::from_vec(vec![1.0, 0.0, -1.0]),
                y: 0,
                modality: 0,
            },
            Sample {
                x: DVector::from_vec(vec![-0.5, 2.0, 0.3]),
                y: 1,
                modality: 0,
            },
        ]
    }

    #[test]
    fn zero_step_size_leaves_experts() {
        let mut p = tiny();
        let before = p.clone();
        local_step(&mut p, &batch(), &Trainable::all(2), None, 0.0, 0.1, None).unwrap();
        for (a, b) in p.experts.iter().zip(&before.experts) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn negative_step_size_rejected() {
        let mut p = tiny();
        let err = local_step(&mut p, &batch(), &Trainable::all(2), None, -0.1, 0.1, None);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = local_step(&mut p, &batch(), &Trainable::all(2), None, 0.1, f64::NAN, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn aggregation_examples() {
        let p = tiny();
        let e = p.experts[0].clone();
        let agg = aggregate_experts(&[e.clone(), e.clone()]).unwrap();
        assert!(agg.bit_eq(&e));
        // three copies: x + x + x may round before the division
        let agg = aggregate_experts(&[e.clone(), e.clone(), e.clone()]).unwrap();
        for (a, b) in agg.flatten().iter().zip(e.flatten()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
        let mut neg = e.clone();
        neg.scale(-1.0);
        let agg = aggregate_experts(&[e.clone(), neg]).unwrap();
        assert_eq!(agg.norm_sq(), 0.0);
        let g = p.gate.clone();
        let mut neg = g.clone();
        neg.scale(-1.0);
        assert_eq!(aggregate_gate(&[g, neg]).unwrap().norm_sq(), 0.0);
    }

    #[test]
    fn aggregation_shape_mismatch() {
        let p = tiny();
        let mut other = p.experts[0].clone();
        other.layers[0].b1 = DVector::zeros(7);
        assert!(matches!(
            aggregate_experts(&[p.experts[0].clone(), other]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(aggregate_gate(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn scheme_names_roundtrip() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
            assert_eq!(Scheme::from_code(s.code()), Some(s));
        }
        assert!("fedavg".parse::<Scheme>().is_err());
    }

    #[test]
    fn csv_row_format() {
        let log = RoundLog {
            round: 3,
            scheme: Scheme::EmsFl,
            phase: Phase::Standard,
            event: EventKind::Idle,
            cluster: None,
            experts_aggregated: vec![],
            gate_aggregated: false,
            bytes_up: 0,
            bytes_required: 0,
            bytes_budget: None,
            params_loaded_max: 12,
            loss_global: Some(0.5),
            grad_var_est: None,
        };
        let csv = metrics_csv(&[log]);
        assert_eq!(csv, format!("{METRICS_HEADER}\n3,ems_fl,idle,-,0.5,,0,inf,12\n"));
    }
}
