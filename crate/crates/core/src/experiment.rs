//! Experiment configuration and the preparation pipeline shared by the CLI,
//! the comparison report and the browser demo.
//!
//! `prepare` turns a config into everything a run needs: synthetic cluster
//! data, a warm-started model, trial subsets, the relevance matrix and expert
//! assignment, and the contact plan. Every random stream is derived from the
//! config's single seed.

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{build_contact_plan, ContactPlan, GeometryModel, LinkBudget};
use crate::data::{
    draw_trial, generate, relevance_ratios, ClusterDataset, CorrelationMap, HeterogeneityProfile, ModalitySpec,
    RelevanceRatios, Sample,
};
use crate::error::{Error, Result};
use crate::federation::warmup::{pretrain_gate, warm_experts};
use crate::federation::{run, Hyper, RunOutput, Scheme};
use crate::moe::{MoeConfig, MoeParams};
use crate::split::{assign_probs, default_cap, relevance, split, truncate, AssignProbs, ExpertAssignment, Matrix};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub scheme: Scheme,
    pub model: MoeConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub link: LinkConfig,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedMixing {
    /// Cluster `c` sees only modality `c`.
    Identity,
    /// Every cluster sees every modality equally.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mixing {
    Named(NamedMixing),
    /// Rows are clusters, columns modalities; rows sum to 1.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clusters: usize,
    pub devices: usize,
    pub samples_per_device: usize,
    pub modalities: usize,
    /// Modality `k` owns labels `k * classes_per_modality ..`.
    pub classes_per_modality: usize,
    /// Spread of modality centres.
    pub modality_separation: f64,
    /// Spread of class means around their modality centre.
    pub separation: f64,
    pub class_std: f64,
    pub mixing: Mixing,
    /// Size of the pooled warm-start set.
    pub shared_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_trial: usize,
    pub p_th: f64,
    /// Experts per cluster; defaults to `ceil(M / C)`.
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub idle_slots: usize,
    pub window_s: f64,
    /// Without a budget every upload fits.
    pub budget: Option<LinkBudget>,
    pub geometry: Option<GeometryModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta_expert: f64,
    pub eta_gate: f64,
    pub lora_rank: Option<usize>,
    /// Total orbital cycles.
    pub cycles: usize,
    #[serde(default)]
    pub gate_rounds: usize,
    #[serde(default = "one")]
    pub local_steps: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub snapshots: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub expert_steps: usize,
    pub expert_eta: f64,
    #[serde(default = "default_gate_steps")]
    pub gate_steps: usize,
    pub gate_eta: f64,
}

fn default_gate_steps() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Target global loss as a fraction of the initial loss.
    pub target_loss_fraction: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            target_loss_fraction: 0.5,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn finite_nonneg(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("must be finite and >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(field_err(
                "version",
                format!(
                    "unsupported config version {} (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        self.model.validate().map_err(|e| field_err("model", e))?;
        let d = &self.data;
        for (name, v) in [
            ("data.clusters", d.clusters),
            ("data.devices", d.devices),
            ("data.samples_per_device", d.samples_per_device),
            ("data.modalities", d.modalities),
            ("data.shared_samples", d.shared_samples),
        ] {
            if v == 0 {
                return Err(field_err(name, "must be >= 1"));
            }
        }
        if d.classes_per_modality < 2 {
            return Err(field_err("data.classes_per_modality", "must be >= 2"));
        }
        if d.modalities * d.classes_per_modality > self.model.n_classes {
            return Err(field_err(
                "model.n_classes",
                format!(
                    "{} modalities x {} classes need {} labels",
                    d.modalities,
                    d.classes_per_modality,
                    d.modalities * d.classes_per_modality
                ),
            ));
        }
        finite_nonneg("data.separation", d.separation)?;
        finite_nonneg("data.modality_separation", d.modality_separation)?;
        if !(d.class_std > 0.0 && d.class_std.is_finite()) {
            return Err(field_err("data.class_std", "must be positive"));
        }
        self.profile().map_err(|e| field_err("data.mixing", e))?;

        let s = &self.split;
        if s.n_trial == 0 || s.n_trial > d.devices * d.samples_per_device {
            return Err(field_err(
                "split.n_trial",
                format!("must lie in [1, {}]", d.devices * d.samples_per_device),
            ));
        }
        finite_nonneg("split.p_th", s.p_th)?;
        if s.cap == Some(0) {
            return Err(field_err("split.cap", "must be >= 1"));
        }

        let l = &self.link;
        if !(l.window_s > 0.0 && l.window_s.is_finite()) {
            return Err(field_err("link.window_s", "must be positive"));
        }
        if let Some(b) = &l.budget {
            b.validate().map_err(|e| field_err("link.budget", e))?;
        }

        let t = &self.train;
        finite_nonneg("train.eta_expert", t.eta_expert)?;
        finite_nonneg("train.eta_gate", t.eta_gate)?;
        if t.eta_expert > t.eta_gate {
            return Err(field_err(
                "train.eta_expert",
                format!("must not exceed train.eta_gate ({} > {})", t.eta_expert, t.eta_gate),
            ));
        }
        if t.cycles == 0 {
            return Err(field_err("train.cycles", "must be >= 1"));
        }
        if t.lora_rank == Some(0) {
            return Err(field_err("train.lora_rank", "must be >= 1"));
        }
        if t.batch_size == Some(0) {
            return Err(field_err("train.batch_size", "must be >= 1"));
        }
        finite_nonneg("warmup.expert_eta", self.warmup.expert_eta)?;
        finite_nonneg("warmup.gate_eta", self.warmup.gate_eta)?;
        let f = self.report.target_loss_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(field_err("report.target_loss_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn profile(&self) -> Result<HeterogeneityProfile> {
        let d = &self.data;
        let profile = match &d.mixing {
            Mixing::Named(NamedMixing::Identity) => {
                if d.clusters != d.modalities {
                    return Err(Error::Config(format!(
                        "identity mixing needs as many clusters ({}) as modalities ({})",
                        d.clusters, d.modalities
                    )));
                }
                HeterogeneityProfile::identity(d.clusters)
            }
            Mixing::Named(NamedMixing::Uniform) => HeterogeneityProfile::uniform(d.clusters, d.modalities),
            Mixing::Matrix(m) => HeterogeneityProfile { mixing: m.clone() },
        };
        if profile.clusters() != d.clusters || profile.modalities() != d.modalities {
            return Err(Error::Config(format!(
                "mixing matrix must be {} x {}",
                d.clusters, d.modalities
            )));
        }
        profile.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(profile)
    }

    pub fn hyper(&self) -> Hyper {
        let t = &self.train;
        Hyper {
            eta_expert: t.eta_expert,
            eta_gate: t.eta_gate,
            lora_rank: t.lora_rank,
            local_steps: t.local_steps,
            local_epochs: t.local_epochs,
            gate_rounds: t.gate_rounds,
            batch_size: t.batch_size,
            snapshots: t.snapshots,
        }
    }

    pub fn total_rounds(&self) -> usize {
        self.train.cycles * (self.data.clusters + self.link.idle_slots)
    }

    /// The contact plan, with rates and budgets attached when a link budget is configured.
    pub fn contact_plan(&self) -> Result<ContactPlan> {
        let plan = build_contact_plan(
            self.data.clusters,
            self.total_rounds(),
            self.link.idle_slots,
            self.link.window_s,
        )?;
        match &self.link.budget {
            Some(b) => plan.with_link(b, &self.link.geometry.clone().unwrap_or_default()),
            None => Ok(plan),
        }
    }
}

/// Independent sub-seeds of the master seed, one stream per purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_SPECS: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_SHARED: u64 = 3;
const STREAM_MODEL: u64 = 4;
const STREAM_TRIAL: u64 = 5;
const STREAM_SPLIT: u64 = 6;
const STREAM_TRAIN: u64 = 7;

/// Everything a run needs, derived from one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub specs: Vec<ModalitySpec>,
    pub datasets: Vec<ClusterDataset>,
    pub shared: Vec<Sample>,
    pub correlation: CorrelationMap,
    /// Warm-started model at round 0.
    pub model: MoeParams,
    pub trials: Vec<Vec<Sample>>,
    pub relevance: Matrix,
    pub truncated: Matrix,
    pub probs: AssignProbs,
    pub cap: usize,
    pub assignment: ExpertAssignment,
    pub ratios: Option<RelevanceRatios>,
    pub plan: ContactPlan,
    pub hyper: Hyper,
    pub warnings: Vec<String>,
}

impl Prepared {
    pub fn train_seed(&self) -> u64 {
        derive_seed(self.config.seed, STREAM_TRAIN)
    }

    pub fn run(&self) -> Result<RunOutput> {
        run(
            self.config.scheme,
            self.model.clone(),
            &self.datasets,
            &self.plan,
            &self.assignment,
            &self.hyper,
            self.train_seed(),
        )
    }
}

pub fn make_specs(config: &ExperimentConfig) -> Vec<ModalitySpec> {
    let d = &config.data;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SPECS));
    (0..d.modalities)
        .map(|k| {
            let labels: Vec<usize> = (0..d.classes_per_modality)
                .map(|i| k * d.classes_per_modality + i)
                .collect();
            let centre = DVector::from_fn(config.model.d_in, |_, _| {
                d.modality_separation * rng.sample::<f64, _>(StandardNormal)
            });
            let mut spec = ModalitySpec::isotropic(k, &labels, config.model.d_in, d.separation, d.class_std, &mut rng);
            for c in &mut spec.classes {
                c.mean += &centre;
            }
            spec
        })
        .collect()
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let d = &config.data;
    let m = config.model.experts;
    let mut warnings = Vec::new();

    let specs = make_specs(config);
    let profile = config.profile()?;
    let datasets = generate(
        &profile,
        &specs,
        d.clusters,
        d.devices,
        d.samples_per_device,
        derive_seed(config.seed, STREAM_DATA),
    )?;
    let shared = generate(
        &HeterogeneityProfile::uniform(1, d.modalities),
        &specs,
        1,
        1,
        d.shared_samples,
        derive_seed(config.seed, STREAM_SHARED),
    )?
    .remove(0)
    .shards
    .remove(0)
    .samples;
    let correlation = CorrelationMap::diagonal(d.modalities, m);

    let mut model = MoeParams::init(
        &config.model,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_MODEL)),
    )?;
    let w = &config.warmup;
    warm_experts(&mut model, &shared, &correlation, w.expert_steps, w.expert_eta)?;
    pretrain_gate(&mut model, &shared, w.gate_steps, w.gate_eta)?;

    let trial_seed = derive_seed(config.seed, STREAM_TRIAL);
    let trials = datasets
        .iter()
        .enumerate()
        .map(|(c, ds)| draw_trial(ds, config.split.n_trial, trial_seed.wrapping_add(c as u64)))
        .collect::<Result<Vec<_>>>()?;
    let p = relevance(&model, &trials)?;
    let truncated = truncate(&p, config.split.p_th);
    let probs = assign_probs(&truncated);
    if probs.unassignable.len() == m {
        warnings.push(format!(
            "every expert is unassignable at p_th = {}; all experts stay frozen",
            config.split.p_th
        ));
    }
    let cap = config.split.cap.unwrap_or_else(|| default_cap(m, d.clusters));
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SPLIT));
    let assignment = split(&truncated, d.clusters, cap, &mut split_rng)?;

    let ratios = match relevance_ratios(&datasets, &assignment, &correlation) {
        Ok(r) => {
            if config.train.eta_expert > config.train.eta_gate / r.gamma {
                warnings.push(format!(
                    "eta_expert = {} exceeds eta_gate / gamma = {}",
                    config.train.eta_expert,
                    config.train.eta_gate / r.gamma
                ));
            }
            Some(r)
        }
        Err(e) => {
            warnings.push(format!("relevance ratios unavailable: {e}"));
            None
        }
    };

    let plan = config.contact_plan()?;
    if plan.all_idle() {
        warnings.push("every slot of the contact plan is idle".into());
    }
    Ok(Prepared {
        config: config.clone(),
        specs,
        datasets,
        shared,
        correlation,
        model,
        trials,
        relevance: p,
        truncated,
        probs,
        cap,
        assignment,
        ratios,
        plan,
        hyper: config.hyper(),
        warnings,
    })
}
