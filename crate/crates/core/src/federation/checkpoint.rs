//! Binary checkpoints of a running simulation.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "ORBITFL\0"
//! version      u32      currently 1
//! scheme       u8       0 baseline, 1 ems_fl, 2 enhanced
//! round        u64      last completed round
//! config       u64 x 7  layers experts top_k d_in d_hidden d_out n_classes
//!              f64      noise_std
//! global       tensors  gate, experts in index order, backbone
//! assignment   u64      clusters
//!              i64 x M  owning cluster per expert, -1 if unassigned
//! last_update  i64 x M  round of last replacement, -1 if never
//!              i64      same for the gate
//! clusters     u64      C, then per cluster:
//!              u64 u64  device count J, rounds since sync
//!              tensors  per device: gate, experts in index order
//! rng          32 bytes seed, u64 stream, u128 word position
//! ```
//!
//! A tensor group is written as `u64 length` followed by that many `f64`s.
//! Datasets, contact plan and hyperparameters are not stored; they are
//! rebuilt from the run's configuration.

use rand_chacha::ChaCha8Rng;

use super::sim::{ClusterState, GlobalModelState, Simulation};
use super::{Hyper, Scheme};
use crate::channel::ContactPlan;
use crate::data::ClusterDataset;
use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoeParams};
use crate::split::ExpertAssignment;
use crate::tensor::ParamGroup;
use rand::SeedableRng;

pub const MAGIC: &[u8; 8] = b"ORBITFL\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn i64(&mut self, v: Option<usize>) {
        let v = v.map_or(-1, |x| x as i64);
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn group<G: ParamGroup>(&mut self, g: &G) {
        let flat = g.flatten();
        self.u64(flat.len() as u64);
        for v in flat {
            self.f64(v);
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("value overflows usize".into()))
    }

    fn i64(&mut self) -> Result<Option<usize>> {
        match i64::from_le_bytes(self.array()?) {
            -1 => Ok(None),
            v if v >= 0 => Ok(Some(v as usize)),
            v => Err(Error::Checkpoint(format!("invalid index {v}"))),
        }
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn group<G: ParamGroup>(&mut self, g: &mut G) -> Result<()> {
        let n = self.usize()?;
        if n != g.num_params() {
            return Err(Error::Checkpoint(format!(
                "tensor group holds {n} values, expected {}",
                g.num_params()
            )));
        }
        let flat = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        g.load_flat(&flat)
    }
}

fn write_params(w: &mut Writer, p: &MoeParams, with_backbone: bool) {
    w.group(&p.gate);
    for e in &p.experts {
        w.group(e);
    }
    if with_backbone {
        w.group(&p.backbone);
    }
}

fn read_params(r: &mut Reader, p: &mut MoeParams, with_backbone: bool) -> Result<()> {
    r.group(&mut p.gate)?;
    for e in &mut p.experts {
        r.group(e)?;
    }
    if with_backbone {
        r.group(&mut p.backbone)?;
    }
    Ok(())
}

pub fn save(sim: &Simulation) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.0.push(sim.scheme.code());
    let g = &sim.global;
    w.u64(g.round as u64);
    let cfg = &g.params.config;
    for v in [
        cfg.layers,
        cfg.experts,
        cfg.top_k,
        cfg.d_in,
        cfg.d_hidden,
        cfg.d_out,
        cfg.n_classes,
    ] {
        w.u64(v as u64);
    }
    w.f64(cfg.noise_std);
    write_params(&mut w, &g.params, true);
    w.u64(g.assignment.clusters() as u64);
    for m in 0..cfg.experts {
        w.i64(g.assignment.owner(m));
    }
    for &u in &g.last_update {
        w.i64(u);
    }
    w.i64(g.gate_last_update);
    w.u64(sim.clusters.len() as u64);
    for c in &sim.clusters {
        w.u64(c.devices.len() as u64);
        w.u64(c.rounds_since_sync as u64);
        for d in &c.devices {
            write_params(&mut w, d, false);
        }
    }
    w.0.extend_from_slice(&sim.rng.get_seed());
    w.u64(sim.rng.get_stream());
    w.0.extend_from_slice(&sim.rng.get_word_pos().to_le_bytes());
    w.0
}

/// Rebuild a simulation from [`save`] output. `data`, `plan` and `hyper` must
/// be the ones the checkpointed run was started with.
pub fn restore<'a>(
    bytes: &[u8],
    data: &'a [ClusterDataset],
    plan: ContactPlan,
    hyper: Hyper,
) -> Result<Simulation<'a>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not an orbitfl checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let [code] = r.array()?;
    let scheme = Scheme::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown scheme code {code}")))?;
    let round = r.usize()?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = MoeConfig {
        layers: dims[0],
        experts: dims[1],
        top_k: dims[2],
        d_in: dims[3],
        d_hidden: dims[4],
        d_out: dims[5],
        n_classes: dims[6],
        noise_std: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
    // shapes come from a throwaway initialization; every value is overwritten
    let mut params = MoeParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    read_params(&mut r, &mut params, true)?;

    let clusters = r.usize()?;
    let mut groups = vec![Vec::new(); clusters];
    for m in 0..config.experts {
        if let Some(c) = r.i64()? {
            groups
                .get_mut(c)
                .ok_or_else(|| Error::Checkpoint(format!("expert {m} owned by missing cluster {c}")))?
                .push(m);
        }
    }
    let assignment =
        ExpertAssignment::from_groups(groups, config.experts).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let last_update = (0..config.experts).map(|_| r.i64()).collect::<Result<Vec<_>>>()?;
    let gate_last_update = r.i64()?;

    let n_clusters = r.usize()?;
    let mut states = Vec::with_capacity(n_clusters.min(1024));
    for c in 0..n_clusters {
        let j = r.usize()?;
        let rounds_since_sync = r.usize()?;
        let mut devices = Vec::with_capacity(j.min(1024));
        for _ in 0..j {
            let mut d = params.clone();
            read_params(&mut r, &mut d, false)?;
            devices.push(d);
        }
        states.push(ClusterState {
            cluster: c,
            devices,
            rounds_since_sync,
        });
    }
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    if round > plan.rounds() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at round {round} but the plan has {} rounds",
            plan.rounds()
        )));
    }
    let global = GlobalModelState {
        round,
        params,
        assignment,
        last_update,
        gate_last_update,
    };
    Simulation::assemble(scheme, hyper, plan, data, global, states, rng)
        .map_err(|e| Error::Checkpoint(format!("checkpoint does not match the run: {e}")))
}

impl Simulation<'_> {
    pub fn checkpoint(&self) -> Vec<u8> {
        save(self)
    }
}
