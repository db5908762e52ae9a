//! Straight-line reference scripts of the three training schemes, written
//! against the model primitives only. Full-batch, noise-free, dense uploads.

use orbitfl::data::ClusterDataset;
use orbitfl::moe::{backward, Expert, ExpertMask, Gate, MoeParams, Trainable};
use orbitfl::tensor::ParamGroup;

fn gd_step(
    p: &mut MoeParams,
    data: &[orbitfl::data::Sample],
    trainable: &Trainable,
    mask: Option<&ExpertMask>,
    eta_e: f64,
    eta_u: f64,
) {
    let (_, g) = backward(p, data, trainable, mask, None).unwrap();
    if let Some(gg) = &g.gate {
        for (w, d) in p.gate.layers.iter_mut().zip(&gg.layers) {
            for (a, b) in w.iter_mut().zip(d.iter()) {
                *a -= eta_u * b;
            }
        }
    }
    for (e, ge) in p.experts.iter_mut().zip(&g.experts) {
        let Some(ge) = ge else { continue };
        for (l, gl) in e.layers.iter_mut().zip(&ge.layers) {
            for (a, b) in l.w1.iter_mut().zip(gl.w1.iter()) {
                *a -= eta_e * b;
            }
            for (a, b) in l.b1.iter_mut().zip(gl.b1.iter()) {
                *a -= eta_e * b;
            }
            for (a, b) in l.w2.iter_mut().zip(gl.w2.iter()) {
                *a -= eta_e * b;
            }
            for (a, b) in l.b2.iter_mut().zip(gl.b2.iter()) {
                *a -= eta_e * b;
            }
        }
    }
}

/// Elementwise mean written out: left-to-right sum, then one division.
fn average<G: ParamGroup>(copies: &[&G]) -> G {
    let mut flat = copies[0].flatten();
    for c in &copies[1..] {
        for (a, b) in flat.iter_mut().zip(c.flatten()) {
            *a += b;
        }
    }
    let n = copies.len() as f64;
    flat.iter_mut().for_each(|v| *v /= n);
    let mut out = copies[0].clone();
    out.load_flat(&flat).unwrap();
    out
}

fn connected(round: usize, clusters: usize) -> usize {
    (round - 1) % clusters
}

/// Baseline with no idle slots: broadcast, one step on everything, average.
pub fn baseline(model: &MoeParams, data: &[ClusterDataset], rounds: usize, eta_e: f64, eta_u: f64) -> MoeParams {
    let mut global = model.clone();
    let all = Trainable::all(model.config.experts);
    for t in 1..=rounds {
        let c = connected(t, data.len());
        let locals: Vec<MoeParams> = data[c]
            .shards
            .iter()
            .map(|s| {
                let mut p = global.clone();
                gd_step(&mut p, &s.samples, &all, None, eta_e, eta_u);
                p
            })
            .collect();
        for m in 0..model.config.experts {
            let copies: Vec<&Expert> = locals.iter().map(|p| &p.experts[m]).collect();
            global.experts[m] = average(&copies);
        }
        let gates: Vec<&Gate> = locals.iter().map(|p| &p.gate).collect();
        global.gate = average(&gates);
    }
    global
}

/// EMS-FL and its enhanced variant with no idle slots. Rounds up to
/// `expert_rounds` run the masked expert phase.
pub fn ems(
    model: &MoeParams,
    data: &[ClusterDataset],
    groups: &[Vec<usize>],
    rounds: usize,
    expert_rounds: usize,
    eta_e: f64,
    eta_u: f64,
) -> MoeParams {
    let experts = model.config.experts;
    let mut global = model.clone();
    let mut devices: Vec<Vec<MoeParams>> = data.iter().map(|d| vec![model.clone(); d.shards.len()]).collect();
    for t in 1..=rounds {
        let masked = t <= expert_rounds;
        let c = connected(t, data.len());
        let mask_of = |c: usize| masked.then(|| ExpertMask::new(groups[c].iter().copied(), experts).unwrap());

        // connected cluster: upload its experts, download, train, then sync the gate
        for &m in &groups[c] {
            let copies: Vec<&Expert> = devices[c].iter().map(|p| &p.experts[m]).collect();
            global.experts[m] = average(&copies);
        }
        for p in devices[c].iter_mut() {
            if masked {
                for &m in &groups[c] {
                    p.experts[m] = global.experts[m].clone();
                }
                p.gate = global.gate.clone();
            } else {
                *p = global.clone();
            }
        }
        let mut trainable = Trainable::experts(groups[c].iter().copied());
        trainable.gate = !masked;
        let mask = mask_of(c);
        for (p, s) in devices[c].iter_mut().zip(&data[c].shards) {
            gd_step(p, &s.samples, &trainable, mask.as_ref(), eta_e, eta_u);
        }
        if !masked {
            let gates: Vec<&Gate> = devices[c].iter().map(|p| &p.gate).collect();
            global.gate = average(&gates);
            for p in devices[c].iter_mut() {
                p.gate = global.gate.clone();
            }
        }

        // everyone else trains its own experts with the gate frozen
        for o in (0..data.len()).filter(|&o| o != c) {
            let trainable = Trainable::experts(groups[o].iter().copied());
            let mask = mask_of(o);
            for (p, s) in devices[o].iter_mut().zip(&data[o].shards) {
                gd_step(p, &s.samples, &trainable, mask.as_ref(), eta_e, eta_u);
            }
        }
    }
    global
}
