//! Synthetic multi-modal classification data spread over device clusters.
//!
//! Each modality is a set of class-conditional Gaussians. A mixing matrix
//! fixes what fraction of every cluster's data comes from each modality, and
//! per-shard modality counts are allocated deterministically with
//! largest-remainder rounding, so heterogeneity is exact rather than sampled.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::split::ExpertAssignment;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub y: usize,
    pub modality: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub label: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub id: usize,
    pub classes: Vec<ClassSpec>,
}

impl ModalitySpec {
    /// Isotropic classes with means drawn from `N(0, separation^2 I)`.
    pub fn isotropic(id: usize, labels: &[usize], dim: usize, separation: f64, std: f64, rng: &mut impl Rng) -> Self {
        let classes = labels
            .iter()
            .map(|&label| ClassSpec {
                label,
                mean: DVector::from_fn(dim, |_, _| separation * rng.sample::<f64, _>(StandardNormal)),
                cov: DMatrix::identity(dim, dim) * (std * std),
            })
            .collect();
        Self { id, classes }
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Validation(format!(
                "modality {} needs at least 2 labels",
                self.id
            )));
        }
        let d = self.dim();
        for c in &self.classes {
            if c.mean.len() != d || c.cov.shape() != (d, d) {
                return Err(Error::Validation(format!(
                    "modality {} has inconsistent shapes",
                    self.id
                )));
            }
            if Cholesky::new(c.cov.clone()).is_none() {
                return Err(Error::Validation(format!(
                    "modality {} label {} covariance is not positive-definite",
                    self.id, c.label
                )));
            }
        }
        Ok(())
    }
}

/// Row `c` gives the modality mix of cluster `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityProfile {
    pub mixing: Vec<Vec<f64>>,
}

impl HeterogeneityProfile {
    pub fn identity(n: usize) -> Self {
        Self {
            mixing: (0..n)
                .map(|c| (0..n).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn uniform(clusters: usize, modalities: usize) -> Self {
        Self {
            mixing: vec![vec![1.0 / modalities as f64; modalities]; clusters],
        }
    }

    pub fn clusters(&self) -> usize {
        self.mixing.len()
    }

    pub fn modalities(&self) -> usize {
        self.mixing.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.modalities();
        if k == 0 {
            return Err(Error::Validation("mixing matrix is empty".into()));
        }
        for (c, row) in self.mixing.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Validation(format!(
                    "mixing row {c} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::Validation(format!("mixing row {c} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("mixing row {c} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    pub device: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub cluster: usize,
    pub shards: Vec<DeviceShard>,
}

impl ClusterDataset {
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.shards.iter().flat_map(|s| s.samples.iter())
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality_counts(&self, modalities: usize) -> Vec<usize> {
        let mut counts = vec![0; modalities];
        for s in self.samples() {
            counts[s.modality] += 1;
        }
        counts
    }
}

/// The union of every shard, in cluster then device order.
pub fn global_view(datasets: &[ClusterDataset]) -> Vec<&Sample> {
    datasets.iter().flat_map(|d| d.samples()).collect()
}

/// Split `total` into integer parts proportional to `weights` (summing to 1).
/// Remainders go to the largest fractional parts; ties to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

struct Sampler {
    chol: Vec<Vec<DMatrix<f64>>>,
}

impl Sampler {
    fn new(specs: &[ModalitySpec]) -> Result<Self> {
        let chol = specs
            .iter()
            .map(|m| {
                m.classes
                    .iter()
                    .map(|c| {
                        Cholesky::new(c.cov.clone())
                            .map(|ch| ch.l())
                            .ok_or_else(|| Error::Validation("covariance not positive-definite".into()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { chol })
    }

    fn draw(&self, spec: &ModalitySpec, modality: usize, rng: &mut impl Rng) -> Sample {
        let ci = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[ci];
        let z = DVector::from_fn(class.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Sample {
            x: &class.mean + &self.chol[modality][ci] * z,
            y: class.label,
            modality,
        }
    }
}

/// Generate `clusters` datasets of `devices` shards with `samples_per_device` samples each.
pub fn generate(
    profile: &HeterogeneityProfile,
    specs: &[ModalitySpec],
    clusters: usize,
    devices: usize,
    samples_per_device: usize,
    seed: u64,
) -> Result<Vec<ClusterDataset>> {
    profile.validate()?;
    if profile.clusters() != clusters {
        return Err(Error::Validation(format!(
            "mixing matrix has {} rows for {clusters} clusters",
            profile.clusters()
        )));
    }
    if profile.modalities() != specs.len() {
        return Err(Error::Validation(format!(
            "mixing matrix has {} columns for {} modalities",
            profile.modalities(),
            specs.len()
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let sampler = Sampler::new(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clusters);
    for c in 0..clusters {
        let counts = largest_remainder(&profile.mixing[c], samples_per_device);
        let mut shards = Vec::with_capacity(devices);
        for device in 0..devices {
            let mut samples = Vec::with_capacity(samples_per_device);
            for (k, &n) in counts.iter().enumerate() {
                for _ in 0..n {
                    samples.push(sampler.draw(&specs[k], k, &mut rng));
                }
            }
            samples.shuffle(&mut rng);
            shards.push(DeviceShard { device, samples });
        }
        out.push(ClusterDataset { cluster: c, shards });
    }
    Ok(out)
}

/// Ground truth: which experts each modality is correlated with.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub experts_of_modality: Vec<Vec<usize>>,
}

impl CorrelationMap {
    /// Modality `k` correlates with expert `k mod experts`.
    pub fn diagonal(modalities: usize, experts: usize) -> Self {
        Self {
            experts_of_modality: (0..modalities).map(|k| vec![k % experts]).collect(),
        }
    }

    fn correlated(&self, modality: usize, group: &[usize]) -> bool {
        self.experts_of_modality
            .get(modality)
            .is_some_and(|es| es.iter().any(|e| group.contains(e)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceRatios {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma_c: Vec<f64>,
    pub gamma: f64,
}

/// Local and global expert-relevant ratios of every cluster's expert group and
/// their ratio. A sample is correlated with group `c` when its modality maps
/// to at least one expert assigned to `c`.
pub fn relevance_ratios(
    datasets: &[ClusterDataset],
    assignment: &ExpertAssignment,
    correlation: &CorrelationMap,
) -> Result<RelevanceRatios> {
    if assignment.clusters() != datasets.len() {
        return Err(Error::Argument(format!(
            "assignment has {} clusters, data has {}",
            assignment.clusters(),
            datasets.len()
        )));
    }
    let global_len: usize = datasets.iter().map(ClusterDataset::len).sum();
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut gamma_c = Vec::new();
    for (c, d) in datasets.iter().enumerate() {
        let group: Vec<usize> = assignment.group(c).iter().copied().collect();
        let local = d
            .samples()
            .filter(|s| correlation.correlated(s.modality, &group))
            .count();
        let global = datasets
            .iter()
            .flat_map(|d| d.samples())
            .filter(|s| correlation.correlated(s.modality, &group))
            .count();
        if global == 0 {
            return Err(Error::UndefinedRatio(format!(
                "no sample anywhere is correlated with the expert group of cluster {c}"
            )));
        }
        let a = local as f64 / d.len() as f64;
        let b = global as f64 / global_len as f64;
        alpha.push(a);
        beta.push(b);
        gamma_c.push(a / b);
    }
    let gamma = gamma_c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RelevanceRatios {
        alpha,
        beta,
        gamma_c,
        gamma,
    })
}

/// Stratified trial subset of a cluster's data. Per-modality counts follow the
/// cluster's modality proportions; samples within a modality are chosen
/// uniformly and returned in their original order.
pub fn draw_trial(dataset: &ClusterDataset, n_trial: usize, seed: u64) -> Result<Vec<Sample>> {
    if n_trial == 0 {
        return Err(Error::Argument("trial size must be positive".into()));
    }
    let all: Vec<&Sample> = dataset.samples().collect();
    if n_trial > all.len() {
        return Err(Error::Argument(format!(
            "trial size {n_trial} exceeds cluster size {}",
            all.len()
        )));
    }
    let modalities = all.iter().map(|s| s.modality + 1).max().unwrap_or(0);
    let counts = dataset.modality_counts(modalities);
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64 / all.len() as f64).collect();
    let take = largest_remainder(&weights, n_trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_trial);
    for (k, &n) in take.iter().enumerate() {
        let mut idx: Vec<usize> = (0..all.len()).filter(|&i| all[i].modality == k).collect();
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(n));
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| all[i].clone()).collect())
}

const DATASET_HEADER: &str = "# orbitfl-dataset v1";

/// One row per sample: features, label, modality, cluster, device.
pub fn export_datasets(datasets: &[ClusterDataset]) -> String {
    let mut out = String::new();
    let dim = datasets
        .iter()
        .flat_map(|d| d.samples())
        .next()
        .map_or(0, |s| s.x.len());
    writeln!(out, "{DATASET_HEADER}").unwrap();
    let cols: Vec<String> = (0..dim)
        .map(|i| format!("x{i}"))
        .chain(["label", "modality", "cluster", "device"].map(String::from))
        .collect();
    writeln!(out, "{}", cols.join(",")).unwrap();
    for d in datasets {
        for shard in &d.shards {
            for s in &shard.samples {
                for v in s.x.iter() {
                    write!(out, "{v},").unwrap();
                }
                writeln!(out, "{},{},{},{}", s.y, s.modality, d.cluster, shard.device).unwrap();
            }
        }
    }
    out
}

fn parse_field<T: FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse '{field}'")))
}

pub fn import_datasets(text: &str) -> Result<Vec<ClusterDataset>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DATASET_HEADER => {}
        _ => return Err(Error::Parse("missing dataset header".into())),
    }
    let (_, cols) = lines.next().ok_or_else(|| Error::Parse("missing column row".into()))?;
    let dim = cols
        .split(',')
        .count()
        .checked_sub(4)
        .ok_or_else(|| Error::Parse("column row too short".into()))?;
    let mut out: Vec<ClusterDataset> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 4 {
            return Err(Error::Parse(format!("line {}: expected {} fields", i + 1, dim + 4)));
        }
        let x = fields[..dim]
            .iter()
            .map(|f| parse_field::<f64>(f, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let y = parse_field(fields[dim], i + 1)?;
        let modality = parse_field(fields[dim + 1], i + 1)?;
        let cluster: usize = parse_field(fields[dim + 2], i + 1)?;
        let device: usize = parse_field(fields[dim + 3], i + 1)?;
        while out.len() <= cluster {
            out.push(ClusterDataset {
                cluster: out.len(),
                shards: Vec::new(),
            });
        }
        let shards = &mut out[cluster].shards;
        while shards.len() <= device {
            shards.push(DeviceShard {
                device: shards.len(),
                samples: Vec::new(),
            });
        }
        shards[device].samples.push(Sample {
            x: DVector::from_vec(x),
            y,
            modality,
        });
    }
    Ok(out)
}
