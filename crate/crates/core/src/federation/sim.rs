//! Round-by-round simulator shared by the three schemes.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lowrank::{decode, encode, upload_bytes};
use super::{local_step, EventKind, Hyper, Phase, RoundLog, Scheme};
use crate::channel::{ContactPlan, Slot};
use crate::data::{global_view, ClusterDataset, DeviceShard, Sample};
use crate::error::{Error, Result};
use crate::moe::{backward, loss, ExpertMask, MoeParams, Trainable};
use crate::split::ExpertAssignment;
use crate::tensor::{mean, ParamGroup};

/// The satellite's copy of the model and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelState {
    /// Last completed round (0 before training).
    pub round: usize,
    pub params: MoeParams,
    pub assignment: ExpertAssignment,
    /// Round at which each expert's global copy was last replaced.
    pub last_update: Vec<Option<usize>>,
    pub gate_last_update: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub cluster: usize,
    /// One local model per device. The backbone is the frozen global one.
    pub devices: Vec<MoeParams>,
    pub rounds_since_sync: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGradients {
    pub expert: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Global-model gradients at a cycle end, plus each device's local gradient
/// at the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: usize,
    pub loss: f64,
    /// Trainable parameters, experts then gate.
    pub params: Vec<f64>,
    pub expert_grad: Vec<f64>,
    pub gate_grad: Vec<f64>,
    /// `[cluster][device]`, devices with empty shards omitted.
    pub devices: Vec<Vec<DeviceGradients>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: MoeParams,
    pub assignment: ExpertAssignment,
    pub logs: Vec<RoundLog>,
    pub snapshots: Vec<Snapshot>,
    pub initial_loss: f64,
}

/// Gradient snapshot of `params` with `experts` and the gate trainable.
pub fn take_snapshot(
    round: usize,
    params: &MoeParams,
    datasets: &[ClusterDataset],
    experts: &[usize],
) -> Result<Snapshot> {
    let trainable = Trainable::experts(experts.iter().copied()).with_gate();
    let view = global_view(datasets);
    let (loss, g) = backward(params, &view, &trainable, None, None)?;
    let mut flat = Vec::new();
    for &m in experts {
        flat.extend(params.experts[m].flatten());
    }
    flat.extend(params.gate.flatten());
    let devices = datasets
        .iter()
        .map(|d| {
            d.shards
                .iter()
                .filter(|s| !s.samples.is_empty())
                .map(|s| {
                    let (_, g) = backward(params, &s.samples, &trainable, None, None)?;
                    Ok(DeviceGradients {
                        expert: g.flatten_experts(),
                        gate: g.flatten_gate(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot {
        round,
        loss,
        params: flat,
        expert_grad: g.flatten_experts(),
        gate_grad: g.flatten_gate(),
        devices,
    })
}

fn select_batch<'s>(shard: &'s DeviceShard, batch_size: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<&'s Sample> {
    match batch_size {
        Some(b) if b < shard.samples.len() => {
            let mut idx = index::sample(rng, shard.samples.len(), b).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &shard.samples[i]).collect()
        }
        _ => shard.samples.iter().collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_device(
    device: &mut MoeParams,
    shard: &DeviceShard,
    trainable: &Trainable,
    mask: Option<&ExpertMask>,
    hyper: &Hyper,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if shard.samples.is_empty() || trainable.is_empty() {
        return Ok(());
    }
    for _ in 0..steps {
        let batch = select_batch(shard, hyper.batch_size, rng);
        let noise: Option<&mut dyn RngCore> = if device.config.noise_std > 0.0 {
            Some(&mut *rng)
        } else {
            None
        };
        local_step(device, &batch, trainable, mask, hyper.eta_expert, hyper.eta_gate, noise)?;
    }
    Ok(())
}

pub struct Simulation<'a> {
    pub(crate) scheme: Scheme,
    pub(crate) hyper: Hyper,
    pub(crate) plan: ContactPlan,
    pub(crate) data: &'a [ClusterDataset],
    pub(crate) global: GlobalModelState,
    pub(crate) clusters: Vec<ClusterState>,
    pub(crate) rng: ChaCha8Rng,
    eval: Vec<&'a Sample>,
    logs: Vec<RoundLog>,
    snapshots: Vec<Snapshot>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        scheme: Scheme,
        model: MoeParams,
        data: &'a [ClusterDataset],
        plan: ContactPlan,
        assignment: ExpertAssignment,
        hyper: Hyper,
        seed: u64,
    ) -> Result<Self> {
        let clusters = data
            .iter()
            .enumerate()
            .map(|(c, d)| ClusterState {
                cluster: c,
                devices: vec![model.clone(); d.shards.len()],
                rounds_since_sync: 0,
            })
            .collect();
        let experts = model.config.experts;
        let global = GlobalModelState {
            round: 0,
            params: model,
            assignment,
            last_update: vec![None; experts],
            gate_last_update: None,
        };
        Self::assemble(
            scheme,
            hyper,
            plan,
            data,
            global,
            clusters,
            ChaCha8Rng::seed_from_u64(seed),
        )
    }

    pub(crate) fn assemble(
        scheme: Scheme,
        hyper: Hyper,
        plan: ContactPlan,
        data: &'a [ClusterDataset],
        global: GlobalModelState,
        clusters: Vec<ClusterState>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        hyper.validate()?;
        global.params.config.validate()?;
        let c = plan.clusters;
        if data.len() != c {
            return Err(Error::Argument(format!(
                "contact plan has {c} clusters but {} datasets were given",
                data.len()
            )));
        }
        if global.assignment.clusters() != c || global.assignment.experts() != global.params.config.experts {
            return Err(Error::Argument("assignment does not match clusters and experts".into()));
        }
        if clusters.len() != c
            || clusters
                .iter()
                .zip(data)
                .any(|(s, d)| s.devices.len() != d.shards.len())
        {
            return Err(Error::Argument("device states do not match the datasets".into()));
        }
        if data.iter().any(|d| d.shards.is_empty()) {
            return Err(Error::Argument("every cluster needs at least one device".into()));
        }
        let eval = global_view(data);
        if eval.is_empty() {
            return Err(Error::Argument("datasets hold no samples".into()));
        }
        Ok(Self {
            scheme,
            hyper,
            plan,
            data,
            global,
            clusters,
            rng,
            eval,
            logs: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn plan(&self) -> &ContactPlan {
        &self.plan
    }

    pub fn global(&self) -> &GlobalModelState {
        &self.global
    }

    pub fn clusters(&self) -> &[ClusterState] {
        &self.clusters
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn is_done(&self) -> bool {
        self.global.round >= self.plan.rounds()
    }

    /// Rounds of the enhanced scheme's masked expert phase.
    pub fn expert_rounds(&self) -> usize {
        match self.scheme {
            Scheme::Enhanced => self.plan.rounds().saturating_sub(self.hyper.gate_rounds),
            _ => 0,
        }
    }

    pub fn phase(&self, round: usize) -> Phase {
        if round <= self.expert_rounds() {
            Phase::Expert
        } else {
            Phase::Standard
        }
    }

    pub fn global_loss(&self) -> Result<f64> {
        loss(&self.global.params, &self.eval, None, None)
    }

    /// Experts that receive updates under this scheme.
    pub fn trained_experts(&self) -> Vec<usize> {
        let m = self.global.params.config.experts;
        match self.scheme {
            Scheme::Baseline => (0..m).collect(),
            _ => (0..m).filter(|&e| self.global.assignment.owner(e).is_some()).collect(),
        }
    }

    fn group(&self, cluster: usize) -> Vec<usize> {
        match self.scheme {
            Scheme::Baseline => (0..self.global.params.config.experts).collect(),
            _ => self.global.assignment.group(cluster).iter().copied().collect(),
        }
    }

    /// Advance one round and return its log entry.
    pub fn step(&mut self) -> Result<RoundLog> {
        if self.is_done() {
            return Err(Error::Protocol("the contact plan is exhausted".into()));
        }
        let t = self.global.round + 1;
        let slot = self.plan.slot(t);
        let phase = self.phase(t);
        let mut log = RoundLog {
            round: t,
            scheme: self.scheme,
            phase,
            event: EventKind::Idle,
            cluster: slot.cluster(),
            experts_aggregated: Vec::new(),
            gate_aggregated: false,
            bytes_up: 0,
            bytes_required: 0,
            bytes_budget: None,
            params_loaded_max: 0,
            loss_global: None,
            grad_var_est: None,
        };
        match self.scheme {
            Scheme::Baseline => self.baseline_round(t, slot, &mut log)?,
            Scheme::EmsFl | Scheme::Enhanced => self.ems_round(t, slot, phase, &mut log)?,
        }
        for (c, state) in self.clusters.iter_mut().enumerate() {
            if slot.cluster() == Some(c) {
                state.rounds_since_sync = 0;
            } else {
                state.rounds_since_sync += 1;
            }
        }
        self.global.round = t;
        log.loss_global = Some(self.global_loss()?);
        if self.plan.is_cycle_end(t) {
            let experts = self.trained_experts();
            if self.hyper.snapshots {
                let snap = take_snapshot(t, &self.global.params, self.data, &experts)?;
                let g: f64 = snap.expert_grad.iter().chain(&snap.gate_grad).map(|v| v * v).sum();
                log.grad_var_est = Some(g);
                self.snapshots.push(snap);
            } else {
                let trainable = Trainable::experts(experts).with_gate();
                let (_, g) = backward(&self.global.params, &self.eval, &trainable, None, None)?;
                log.grad_var_est = Some(g.norm_sq());
            }
        }
        self.logs.push(log.clone());
        Ok(log)
    }

    fn budget(&self, slot: Slot, devices: usize, log: &mut RoundLog) -> Option<u64> {
        match slot {
            Slot::Connected { budget_bytes, .. } => {
                log.bytes_budget = budget_bytes.map(|b| b * devices as u64);
                budget_bytes
            }
            Slot::Idle => None,
        }
    }

    fn baseline_round(&mut self, t: usize, slot: Slot, log: &mut RoundLog) -> Result<()> {
        let Some(c) = slot.cluster() else {
            return Ok(());
        };
        let m = self.global.params.config.experts;
        let rank = self.hyper.lora_rank;
        let params = &self.global.params;
        let per_device =
            params.experts.iter().map(|e| upload_bytes(e, rank)).sum::<u64>() + upload_bytes(&params.gate, rank);
        let j = self.clusters[c].devices.len();
        log.bytes_required = per_device * j as u64;
        log.params_loaded_max = params.loaded_param_count(m);
        if self.budget(slot, j, log).is_some_and(|b| per_device > b) {
            log.event = EventKind::Infeasible;
            return Ok(());
        }
        let trainable = Trainable::all(m);
        let global = &self.global.params;
        for (device, shard) in self.clusters[c].devices.iter_mut().zip(&self.data[c].shards) {
            *device = global.clone();
            train_device(
                device,
                shard,
                &trainable,
                None,
                &self.hyper,
                self.hyper.local_steps,
                &mut self.rng,
            )?;
        }
        let devices = &self.clusters[c].devices;
        let mut bytes = 0;
        let mut new_experts = Vec::with_capacity(m);
        for e in 0..m {
            let reference = &global.experts[e];
            let copies = devices
                .iter()
                .map(|d| {
                    let enc = encode(&d.experts[e], reference, rank)?;
                    bytes += enc.bytes();
                    decode(&enc, reference)
                })
                .collect::<Result<Vec<_>>>()?;
            new_experts.push(mean(&copies)?);
        }
        let gates = devices
            .iter()
            .map(|d| {
                let enc = encode(&d.gate, &global.gate, rank)?;
                bytes += enc.bytes();
                decode(&enc, &global.gate)
            })
            .collect::<Result<Vec<_>>>()?;
        let new_gate = mean(&gates)?;
        self.global.params.experts = new_experts;
        self.global.params.gate = new_gate;
        self.global.last_update.iter_mut().for_each(|u| *u = Some(t));
        self.global.gate_last_update = Some(t);
        log.bytes_up = bytes;
        log.experts_aggregated = (0..m).collect();
        log.gate_aggregated = true;
        log.event = EventKind::Aggregate;
        Ok(())
    }

    fn ems_round(&mut self, t: usize, slot: Slot, phase: Phase, log: &mut RoundLog) -> Result<()> {
        let expert_phase = phase == Phase::Expert;
        let rank = self.hyper.lora_rank;
        let m_total = self.global.params.config.experts;
        let loaded = |group_len: usize, params: &MoeParams| {
            params.loaded_param_count(if expert_phase { group_len } else { m_total })
        };
        let mut synced = None;
        let mut trained_any = false;

        if let Some(c) = slot.cluster() {
            let group = self.group(c);
            let params = &self.global.params;
            let expert_bytes: u64 = group.iter().map(|&e| upload_bytes(&params.experts[e], rank)).sum();
            let gate_bytes = if expert_phase {
                0
            } else {
                upload_bytes(&params.gate, rank)
            };
            let per_device = expert_bytes + gate_bytes;
            let j = self.clusters[c].devices.len();
            log.bytes_required = per_device * j as u64;
            let feasible = !self.budget(slot, j, log).is_some_and(|b| per_device > b);
            if !feasible {
                log.event = EventKind::Infeasible;
            } else if !group.is_empty() || !expert_phase {
                synced = Some(c);
                let mut bytes = 0;
                // expert-wise aggregation of the cluster's group
                for &e in &group {
                    let reference = &self.global.params.experts[e];
                    let copies = self.clusters[c]
                        .devices
                        .iter()
                        .map(|d| {
                            let enc = encode(&d.experts[e], reference, rank)?;
                            bytes += enc.bytes();
                            decode(&enc, reference)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    self.global.params.experts[e] = mean(&copies)?;
                    self.global.last_update[e] = Some(t);
                }
                log.experts_aggregated = group.clone();
                // download
                let global = &self.global.params;
                for d in &mut self.clusters[c].devices {
                    if expert_phase {
                        for &e in &group {
                            d.experts[e] = global.experts[e].clone();
                        }
                        d.gate = global.gate.clone();
                    } else {
                        *d = global.clone();
                    }
                }
                // local update
                let mut trainable = Trainable::experts(group.iter().copied());
                trainable.gate = !expert_phase;
                let mask = if expert_phase {
                    Some(ExpertMask::new(group.iter().copied(), m_total)?)
                } else {
                    None
                };
                for (device, shard) in self.clusters[c].devices.iter_mut().zip(&self.data[c].shards) {
                    train_device(
                        device,
                        shard,
                        &trainable,
                        mask.as_ref(),
                        &self.hyper,
                        self.hyper.local_steps,
                        &mut self.rng,
                    )?;
                }
                trained_any = true;
                log.params_loaded_max = log.params_loaded_max.max(loaded(group.len(), &self.global.params));
                // gate upload, aggregation and download
                if !expert_phase {
                    let reference = &self.global.params.gate;
                    let gates = self.clusters[c]
                        .devices
                        .iter()
                        .map(|d| {
                            let enc = encode(&d.gate, reference, rank)?;
                            bytes += enc.bytes();
                            decode(&enc, reference)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let gate = mean(&gates)?;
                    for d in &mut self.clusters[c].devices {
                        d.gate = gate.clone();
                    }
                    self.global.params.gate = gate;
                    self.global.gate_last_update = Some(t);
                    log.gate_aggregated = true;
                }
                log.bytes_up = bytes;
                log.event = EventKind::Aggregate;
            }
        }

        // clusters out of view keep training their own experts, gate frozen
        for c in 0..self.clusters.len() {
            if synced == Some(c) {
                continue;
            }
            let group = self.group(c);
            if group.is_empty() || self.hyper.local_epochs == 0 {
                continue;
            }
            let trainable = Trainable::experts(group.iter().copied());
            let mask = if expert_phase {
                Some(ExpertMask::new(group.iter().copied(), m_total)?)
            } else {
                None
            };
            for (device, shard) in self.clusters[c].devices.iter_mut().zip(&self.data[c].shards) {
                train_device(
                    device,
                    shard,
                    &trainable,
                    mask.as_ref(),
                    &self.hyper,
                    self.hyper.local_epochs,
                    &mut self.rng,
                )?;
            }
            trained_any = true;
            log.params_loaded_max = log.params_loaded_max.max(loaded(group.len(), &self.global.params));
        }
        if log.event == EventKind::Idle && trained_any {
            log.event = EventKind::LocalStep;
        }
        Ok(())
    }

    /// Step until the plan is exhausted.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn into_output(self, initial_loss: f64) -> RunOutput {
        RunOutput {
            params: self.global.params,
            assignment: self.global.assignment,
            logs: self.logs,
            snapshots: self.snapshots,
            initial_loss,
        }
    }
}

/// Run `scheme` over the whole contact plan.
pub fn run(
    scheme: Scheme,
    model: MoeParams,
    datasets: &[ClusterDataset],
    plan: &ContactPlan,
    assignment: &ExpertAssignment,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(
        scheme,
        model,
        datasets,
        plan.clone(),
        assignment.clone(),
        hyper.clone(),
        seed,
    )?;
    let initial_loss = sim.global_loss()?;
    sim.run_to_end()?;
    Ok(sim.into_output(initial_loss))
}

pub fn run_baseline(
    model: MoeParams,
    datasets: &[ClusterDataset],
    plan: &ContactPlan,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunOutput> {
    let empty = ExpertAssignment::from_groups(vec![Vec::new(); plan.clusters], model.config.experts)?;
    run(Scheme::Baseline, model, datasets, plan, &empty, hyper, seed)
}

pub fn run_ems_fl(
    model: MoeParams,
    datasets: &[ClusterDataset],
    plan: &ContactPlan,
    assignment: &ExpertAssignment,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunOutput> {
    run(Scheme::EmsFl, model, datasets, plan, assignment, hyper, seed)
}

pub fn run_enhanced(
    model: MoeParams,
    datasets: &[ClusterDataset],
    plan: &ContactPlan,
    assignment: &ExpertAssignment,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunOutput> {
    run(Scheme::Enhanced, model, datasets, plan, assignment, hyper, seed)
}
