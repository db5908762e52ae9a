//! Central-difference check of the analytic backward pass.
//!
//! The loss is piecewise smooth: Top-K selection and ReLU switch at kinks.
//! An entry is skipped, and counted, when a perturbation changes any routing
//! decision or when two step sizes give inconsistent differences (a ReLU
//! crossing). Everything else must match.

use nalgebra::DVector;
use orbitfl::data::Sample;
use orbitfl::moe::{backward, forward, loss, ExpertMask, MoeConfig, MoeParams, Trainable};
use orbitfl::tensor::ParamGroup;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which entries are compared against this floor instead of their own size.
pub const FLOOR: f64 = 1e-5;
const STEP: f64 = 1e-5;

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

pub struct Instance {
    pub params: MoeParams,
    pub batch: Vec<Sample>,
    pub mask: Option<ExpertMask>,
}

/// Random instance with d, hidden width <= 8, M <= 4, L <= 3.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let experts = rng.random_range(1..=4);
    let cfg = MoeConfig {
        layers: rng.random_range(1..=3),
        experts,
        top_k: rng.random_range(1..=experts),
        d_in: rng.random_range(2..=8),
        d_hidden: rng.random_range(2..=8),
        d_out: rng.random_range(2..=8),
        noise_std: 0.0,
        n_classes: rng.random_range(2..=4),
    };
    let mut params = MoeParams::init(&cfg, &mut rng).unwrap();
    // nonzero biases and larger expert outputs exercise every path
    for e in &mut params.experts {
        for l in &mut e.layers {
            l.b1.iter_mut()
                .for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
            l.b2.iter_mut()
                .for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
            l.w2 *= 5.0;
        }
    }
    let batch = (0..3)
        .map(|_| Sample {
            x: DVector::from_fn(cfg.d_in, |_, _| rng.sample(StandardNormal)),
            y: rng.random_range(0..cfg.n_classes),
            modality: 0,
        })
        .collect();
    let mask = if experts > 1 && rng.random_bool(0.5) {
        let mut allowed: Vec<usize> = (0..experts).filter(|_| rng.random_bool(0.6)).collect();
        if allowed.is_empty() {
            allowed.push(rng.random_range(0..experts));
        }
        Some(ExpertMask::new(allowed, experts).unwrap())
    } else {
        None
    };
    Instance { params, batch, mask }
}

fn routes(params: &MoeParams, batch: &[Sample], mask: Option<&ExpertMask>) -> Vec<Vec<Vec<usize>>> {
    batch
        .iter()
        .map(|s| {
            let (_, trace) = forward(params, &s.x, mask, None).unwrap();
            trace.layers.into_iter().map(|l| l.selected).collect()
        })
        .collect()
}

/// Which group a flat coordinate belongs to: `None` is the gate.
type Slot = Option<usize>;

fn read(params: &MoeParams, slot: Slot) -> Vec<f64> {
    match slot {
        None => params.gate.flatten(),
        Some(m) => params.experts[m].flatten(),
    }
}

fn write(params: &mut MoeParams, slot: Slot, flat: &[f64]) {
    match slot {
        None => params.gate.load_flat(flat).unwrap(),
        Some(m) => params.experts[m].load_flat(flat).unwrap(),
    }
}

pub fn check(inst: &Instance) -> GradReport {
    let Instance { params, batch, mask } = inst;
    let mask = mask.as_ref();
    let experts = params.config.experts;
    let (_, grads) = backward(params, batch, &Trainable::all(experts), mask, None).unwrap();
    let base_routes = routes(params, batch, mask);
    let mut report = GradReport::default();

    let slots: Vec<Slot> = std::iter::once(None).chain((0..experts).map(Some)).collect();
    for slot in slots {
        let analytic = match slot {
            None => grads.gate.as_ref().unwrap().flatten(),
            Some(m) => grads.experts[m].as_ref().unwrap().flatten(),
        };
        let theta = read(params, slot);
        let mut probe = params.clone();
        let diff_at = |probe: &mut MoeParams, i: usize, h: f64| -> (f64, bool) {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            write(probe, slot, &t);
            let plus = loss(probe, batch, mask, None).unwrap();
            let same_plus = routes(probe, batch, mask) == base_routes;
            t[i] = theta[i] - h;
            write(probe, slot, &t);
            let minus = loss(probe, batch, mask, None).unwrap();
            let same_minus = routes(probe, batch, mask) == base_routes;
            write(probe, slot, &theta);
            ((plus - minus) / (2.0 * h), same_plus && same_minus)
        };
        for (i, &g) in analytic.iter().enumerate() {
            let (fd, smooth) = diff_at(&mut probe, i, STEP);
            let (fd_half, smooth_half) = diff_at(&mut probe, i, STEP / 2.0);
            let scale = g.abs().max(fd.abs()).max(FLOOR);
            let consistent = (fd - fd_half).abs() <= 0.1 * REL_TOL * scale;
            if !(smooth && smooth_half && consistent) {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (g - fd).abs() / scale;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > REL_TOL {
                report.failures.push(format!(
                    "{} entry {i}: analytic {g:e}, finite difference {fd:e}",
                    slot.map_or("gate".to_string(), |m| format!("expert {m}"))
                ));
            }
        }
    }
    report
}

/// Check `n` instances seeded `first_seed..first_seed + n`.
pub fn check_many(first_seed: u64, n: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in first_seed..first_seed + n {
        total.merge(check(&random_instance(seed)));
    }
    total
}
