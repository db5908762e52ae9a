//! Log audit of the partial-update rules of EMS-FL.

use orbitfl::federation::Simulation;
use orbitfl::tensor::ParamGroup;

/// Step `sim` to the end and list every violation of: a global expert changes
/// only when its owning cluster is in contact, the gate changes only when it
/// is aggregated, the backbone never changes, and the gate is aggregated
/// exactly `C` times per cycle. Assumes every contact is feasible.
pub fn partial_update_violations(sim: &mut Simulation) -> Vec<String> {
    let mut out = Vec::new();
    let clusters = sim.plan().clusters;
    let experts = sim.global().params.config.experts;
    let mut gate_syncs = 0;
    while !sim.is_done() {
        let before = sim.global().params.clone();
        let log = sim.step().expect("round failed");
        let after = &sim.global().params;
        for e in 0..experts {
            if !after.experts[e].bit_eq(&before.experts[e]) {
                let owner = sim.global().assignment.owner(e);
                if owner.is_none() || owner != log.cluster || !log.experts_aggregated.contains(&e) {
                    out.push(format!(
                        "round {}: expert {e} changed outside its cluster's contact",
                        log.round
                    ));
                }
            }
        }
        if !after.gate.bit_eq(&before.gate) && !log.gate_aggregated {
            out.push(format!("round {}: gate changed without aggregation", log.round));
        }
        if !after.backbone.bit_eq(&before.backbone) {
            out.push(format!("round {}: backbone changed", log.round));
        }
        gate_syncs += usize::from(log.gate_aggregated);
        if sim.plan().is_cycle_end(log.round) {
            if gate_syncs != clusters {
                out.push(format!(
                    "cycle ending at round {}: {gate_syncs} gate updates",
                    log.round
                ));
            }
            gate_syncs = 0;
        }
    }
    out
}
