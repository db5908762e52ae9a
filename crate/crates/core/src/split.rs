//! Expert-driven model splitting.
//!
//! Relevance `p[m][c]` is the share of layer-routing decisions on cluster
//! `c`'s trial data that pick expert `m`. Small relevances are truncated,
//! rows are normalized into assignment probabilities, and experts are then
//! handed out one by one to clusters, preferring clusters that still have
//! room under the per-cluster cap.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::moe::{forward, MoeParams};

/// `m x C` matrix indexed `[expert][cluster]`.
pub type Matrix = Vec<Vec<f64>>;

/// Expert relevance measured on per-cluster trial sets with gating noise off.
pub fn relevance(model: &MoeParams, trials: &[Vec<Sample>]) -> Result<Matrix> {
    if trials.is_empty() {
        return Err(Error::Argument("no trial sets".into()));
    }
    let cfg = &model.config;
    let mut probe = model.clone();
    probe.config.noise_std = 0.0;
    let mut p = vec![vec![0.0; trials.len()]; cfg.experts];
    for (c, trial) in trials.iter().enumerate() {
        if trial.is_empty() {
            return Err(Error::Argument(format!("trial set of cluster {c} is empty")));
        }
        let mut counts = vec![0usize; cfg.experts];
        for s in trial {
            let (_, trace) = forward(&probe, &s.x, None, None)?;
            for layer in &trace.layers {
                for &m in &layer.selected {
                    counts[m] += 1;
                }
            }
        }
        let denom = (cfg.layers * trial.len()) as f64;
        for m in 0..cfg.experts {
            p[m][c] = counts[m] as f64 / denom;
        }
    }
    Ok(p)
}

/// Zero every entry below `threshold`; entries equal to it are kept.
pub fn truncate(p: &Matrix, threshold: f64) -> Matrix {
    p.iter()
        .map(|row| row.iter().map(|&v| if v >= threshold { v } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignProbs {
    pub probs: Matrix,
    /// Experts whose truncated row is all zero.
    pub unassignable: Vec<usize>,
}

/// Row-normalize the truncated relevance.
pub fn assign_probs(truncated: &Matrix) -> AssignProbs {
    let mut unassignable = Vec::new();
    let probs = truncated
        .iter()
        .enumerate()
        .map(|(m, row)| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|v| v / total).collect()
            } else {
                unassignable.push(m);
                vec![0.0; row.len()]
            }
        })
        .collect();
    AssignProbs { probs, unassignable }
}

/// Disjoint expert groups, one per cluster. Experts in no group are frozen everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertAssignment {
    groups: Vec<BTreeSet<usize>>,
    experts: usize,
}

impl ExpertAssignment {
    pub fn from_groups(groups: Vec<Vec<usize>>, experts: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut set = BTreeSet::new();
            for m in g {
                if m >= experts {
                    return Err(Error::Argument(format!("expert {m} out of range")));
                }
                if !seen.insert(m) {
                    return Err(Error::Argument(format!("expert {m} assigned twice")));
                }
                set.insert(m);
            }
            out.push(set);
        }
        Ok(Self { groups: out, experts })
    }

    pub fn clusters(&self) -> usize {
        self.groups.len()
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn group(&self, cluster: usize) -> &BTreeSet<usize> {
        &self.groups[cluster]
    }

    pub fn groups(&self) -> &[BTreeSet<usize>] {
        &self.groups
    }

    pub fn owner(&self, expert: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&expert))
    }

    pub fn unassigned(&self) -> Vec<usize> {
        (0..self.experts).filter(|&m| self.owner(m).is_none()).collect()
    }

    /// Text audit mapping, 1-based: `expert,cluster` with `-` for unassigned experts.
    pub fn export(&self) -> String {
        let mut out = String::from("expert,cluster\n");
        for m in 0..self.experts {
            match self.owner(m) {
                Some(c) => writeln!(out, "{},{}", m + 1, c + 1).unwrap(),
                None => writeln!(out, "{},-", m + 1).unwrap(),
            }
        }
        out
    }

    pub fn import(text: &str, clusters: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("expert,cluster") {
            return Err(Error::Parse("missing assignment header".into()));
        }
        let mut groups = vec![Vec::new(); clusters];
        let mut experts = 0;
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (e, c) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected expert,cluster", i + 2)))?;
            let m: usize = e
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad expert index", i + 2)))?;
            if m == 0 {
                return Err(Error::Parse(format!("line {}: expert indices are 1-based", i + 2)));
            }
            experts = experts.max(m);
            if c != "-" {
                let c: usize = c
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad cluster index", i + 2)))?;
                if c == 0 || c > clusters {
                    return Err(Error::Parse(format!("line {}: cluster {c} out of range", i + 2)));
                }
                groups[c - 1].push(m - 1);
            }
        }
        Self::from_groups(groups, experts)
    }
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Expert-by-expert randomized assignment.
///
/// Expert `m` draws a cluster from its assignment probabilities. The draw is
/// kept when the cluster is still feasible or when none of the expert's
/// relevant clusters is feasible; otherwise a cluster is redrawn among the
/// feasible relevant ones. A cluster leaves the feasible set once it holds
/// `cap` experts. Experts with an all-zero row stay unassigned.
pub fn split(truncated: &Matrix, clusters: usize, cap: usize, rng: &mut impl Rng) -> Result<ExpertAssignment> {
    if cap == 0 {
        return Err(Error::Argument("per-cluster cap must be >= 1".into()));
    }
    if let Some(row) = truncated.iter().find(|r| r.len() != clusters) {
        return Err(Error::Argument(format!(
            "relevance row has {} clusters, expected {clusters}",
            row.len()
        )));
    }
    let probs = assign_probs(truncated).probs;
    let mut feasible = vec![true; clusters];
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for (m, p) in probs.iter().enumerate() {
        if p.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut chosen = sample_index(p, rng);
        let feasible_mass: f64 = (0..clusters).filter(|&c| feasible[c]).map(|c| p[c]).sum();
        if !feasible[chosen] && feasible_mass > 0.0 {
            let restricted: Vec<f64> = (0..clusters).map(|c| if feasible[c] { p[c] } else { 0.0 }).collect();
            chosen = sample_index(&restricted, rng);
        }
        groups[chosen].push(m);
        if groups[chosen].len() >= cap {
            feasible[chosen] = false;
        }
    }
    ExpertAssignment::from_groups(groups, truncated.len())
}

/// Default per-cluster cap: `ceil(M / C)`.
pub fn default_cap(experts: usize, clusters: usize) -> usize {
    experts.div_ceil(clusters.max(1)).max(1)
}
