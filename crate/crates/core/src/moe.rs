//! Desk-scale sparse mixture-of-experts classifier.
//!
//! Layout of one forward pass for a feature vector `x`:
//!
//! ```text
//! h_0 = E x                                   (frozen embedding)
//! for each MoE layer l:
//!     z      = h_{l-1}
//!     route  = TopK(U_l z [+ noise], mask)     (gate, K experts)
//!     y      = z + sum_k w_k * expert_{l,m_k}(z)
//!     h_l    = V_l y   (frozen inter-layer map, omitted after the last layer)
//! logits = H_2 tanh(H_1 h_L)                   (frozen head)
//! ```
//!
//! Each expert is a residual two-layer ReLU MLP (`d_in -> d_hidden -> d_in`).
//! Routing weights are a softmax over the clean logits of the selected
//! experts; noise only perturbs which experts are selected. Selection itself is
//! not differentiated.

use std::borrow::Borrow;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tensor, TensorMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    /// Number of MoE layers.
    pub layers: usize,
    /// Experts per layer.
    pub experts: usize,
    /// Routing fan-out.
    pub top_k: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    /// Width of the frozen head's hidden projection.
    pub d_out: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub n_classes: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= top_k <= experts ({}), got {}",
                self.experts, self.top_k
            )));
        }
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLayer {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Expert `m`: its per-layer networks across all MoE layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub layers: Vec<ExpertLayer>,
}

impl ParamGroup for Expert {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    Tensor::Matrix(&l.w1),
                    Tensor::Vector(&l.b1),
                    Tensor::Matrix(&l.w2),
                    Tensor::Vector(&l.b2),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    TensorMut::Matrix(&mut l.w1),
                    TensorMut::Vector(&mut l.b1),
                    TensorMut::Matrix(&mut l.w2),
                    TensorMut::Vector(&mut l.b2),
                ]
            })
            .collect()
    }
}

/// Gate: one `experts x d_in` logit map per layer, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub layers: Vec<DMatrix<f64>>,
}

impl ParamGroup for Gate {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        self.layers.iter().map(Tensor::Matrix).collect()
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.layers.iter_mut().map(TensorMut::Matrix).collect()
    }
}

/// Frozen shared weights. Never updated by any protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embed: DMatrix<f64>,
    pub inter: Vec<DMatrix<f64>>,
    pub head_hidden: DMatrix<f64>,
    pub head_out: DMatrix<f64>,
}

impl ParamGroup for Backbone {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = vec![Tensor::Matrix(&self.embed)];
        out.extend(self.inter.iter().map(Tensor::Matrix));
        out.push(Tensor::Matrix(&self.head_hidden));
        out.push(Tensor::Matrix(&self.head_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![TensorMut::Matrix(&mut self.embed)];
        out.extend(self.inter.iter_mut().map(TensorMut::Matrix));
        out.push(TensorMut::Matrix(&mut self.head_hidden));
        out.push(TensorMut::Matrix(&mut self.head_out));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub config: MoeConfig,
    pub gate: Gate,
    pub experts: Vec<Expert>,
    pub backbone: Backbone,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut dyn RngCore) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn near_identity(d: usize, std: f64, rng: &mut dyn RngCore) -> DMatrix<f64> {
    DMatrix::identity(d, d) + gaussian_matrix(d, d, std, rng)
}

impl MoeParams {
    /// Random initialization. Embedding and inter-layer maps start near the
    /// identity so that input structure survives the frozen backbone.
    pub fn init(config: &MoeConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let d = config.d_in;
        let h = config.d_hidden;
        let backbone = Backbone {
            embed: near_identity(d, 0.1 / (d as f64).sqrt(), rng),
            inter: (1..config.layers)
                .map(|_| near_identity(d, 0.1 / (d as f64).sqrt(), rng))
                .collect(),
            head_hidden: gaussian_matrix(config.d_out, d, 1.0 / (d as f64).sqrt(), rng),
            head_out: gaussian_matrix(config.n_classes, config.d_out, 2.0 / (config.d_out as f64).sqrt(), rng),
        };
        let gate = Gate {
            layers: (0..config.layers)
                .map(|_| gaussian_matrix(config.experts, d, 1.0 / (d as f64).sqrt(), rng))
                .collect(),
        };
        let experts = (0..config.experts)
            .map(|_| Expert {
                layers: (0..config.layers)
                    .map(|_| ExpertLayer {
                        w1: gaussian_matrix(h, d, 1.0 / (d as f64).sqrt(), rng),
                        b1: DVector::zeros(h),
                        w2: gaussian_matrix(d, h, 0.1 / (h as f64).sqrt(), rng),
                        b2: DVector::zeros(d),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            gate,
            experts,
            backbone,
        })
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.first().map_or(0, |e| e.num_params())
    }

    pub fn gate_param_count(&self) -> usize {
        self.gate.num_params()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone.num_params()
    }

    /// Parameters a device must hold in memory when only `loaded_experts` are resident.
    pub fn loaded_param_count(&self, loaded_experts: usize) -> usize {
        self.backbone_param_count() + loaded_experts * self.expert_param_count() + self.gate_param_count()
    }

    /// One descent step on every group present in `grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, eta_expert: f64, eta_gate: f64) {
        if let Some(g) = &grads.gate {
            self.gate.descend(eta_gate, g);
        }
        for (e, g) in self.experts.iter_mut().zip(&grads.experts) {
            if let Some(g) = g {
                e.descend(eta_expert, g);
            }
        }
    }
}

/// Set of experts the gate is allowed to route to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertMask {
    allowed: Vec<bool>,
}

impl ExpertMask {
    pub fn new(assigned: impl IntoIterator<Item = usize>, experts: usize) -> Result<Self> {
        let mut allowed = vec![false; experts];
        for m in assigned {
            if m >= experts {
                return Err(Error::Argument(format!("expert {m} out of range (M = {experts})")));
            }
            allowed[m] = true;
        }
        if !allowed.iter().any(|&a| a) {
            return Err(Error::Argument("expert mask must be nonempty".into()));
        }
        Ok(Self { allowed })
    }

    pub fn full(experts: usize) -> Self {
        Self {
            allowed: vec![true; experts],
        }
    }

    pub fn contains(&self, m: usize) -> bool {
        self.allowed.get(m).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn experts(&self) -> usize {
        self.allowed.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(m, _)| m)
    }
}

/// Routing decision of one layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRoute {
    /// Selected experts, highest score first.
    pub selected: Vec<usize>,
    /// Softmax weights aligned with `selected`.
    pub weights: Vec<f64>,
}

/// Per-layer routing of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerRoute>,
}

/// Top-K selection over `scores` (noisy logits, or clean when no noise) with
/// masked-out experts excluded; weights are the softmax of the clean `logits`
/// over the selected set. Ties go to the lower expert index.
pub fn top_k_route(logits: &[f64], scores: &[f64], k: usize, mask: Option<&ExpertMask>) -> LayerRoute {
    let mut candidates: Vec<usize> = (0..logits.len())
        .filter(|&m| mask.is_none_or(|mk| mk.contains(m)))
        .collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    let max = candidates.iter().map(|&m| logits[m]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = candidates.iter().map(|&m| (logits[m] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    LayerRoute {
        selected: candidates,
        weights: exps.iter().map(|e| e / total).collect(),
    }
}

/// A gate restricted to an assigned expert set. Excluded experts behave as if
/// their logits were negative infinity, so Top-K can never pick them.
#[derive(Debug, Clone)]
pub struct MaskedGate<'a> {
    gate: &'a Gate,
    mask: ExpertMask,
}

pub fn apply_masked_gate<'a>(gate: &'a Gate, assigned: &[usize]) -> Result<MaskedGate<'a>> {
    let experts = gate.layers.first().map_or(0, |u| u.nrows());
    let mask = ExpertMask::new(assigned.iter().copied(), experts)?;
    Ok(MaskedGate { gate, mask })
}

impl MaskedGate<'_> {
    pub fn mask(&self) -> &ExpertMask {
        &self.mask
    }

    /// Route one layer input without noise.
    pub fn route(&self, layer: usize, z: &DVector<f64>, k: usize) -> LayerRoute {
        let logits = &self.gate.layers[layer] * z;
        top_k_route(logits.as_slice(), logits.as_slice(), k, Some(&self.mask))
    }
}

struct ExpertCache {
    pre: DVector<f64>,
    hidden: DVector<f64>,
    out: DVector<f64>,
}

struct LayerCache {
    input: DVector<f64>,
    route: LayerRoute,
    experts: Vec<ExpertCache>,
}

struct SampleCache {
    layers: Vec<LayerCache>,
    head_act: DVector<f64>,
    logits: DVector<f64>,
}

fn expert_forward(layer: &ExpertLayer, z: &DVector<f64>) -> ExpertCache {
    let pre = &layer.w1 * z + &layer.b1;
    let hidden = pre.map(|v| v.max(0.0));
    let out = &layer.w2 * &hidden + &layer.b2;
    ExpertCache { pre, hidden, out }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn forward_cached(
    params: &MoeParams,
    x: &DVector<f64>,
    mask: Option<&ExpertMask>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<SampleCache> {
    let cfg = &params.config;
    if x.len() != cfg.d_in {
        return Err(Error::Config(format!(
            "feature width {} does not match d_in {}",
            x.len(),
            cfg.d_in
        )));
    }
    if let Some(mk) = mask {
        if mk.experts() != cfg.experts {
            return Err(Error::Config(format!(
                "mask covers {} experts, model has {}",
                mk.experts(),
                cfg.experts
            )));
        }
    }
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut h = &params.backbone.embed * x;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let z = h;
        let logits = &params.gate.layers[l] * &z;
        let route = match (noise.as_ref(), reborrow(&mut rng)) {
            (Some(dist), Some(r)) => {
                let noisy: Vec<f64> = logits.iter().map(|v| v + dist.sample(r)).collect();
                top_k_route(logits.as_slice(), &noisy, cfg.top_k, mask)
            }
            _ => top_k_route(logits.as_slice(), logits.as_slice(), cfg.top_k, mask),
        };
        let mut y = z.clone();
        let mut experts = Vec::with_capacity(route.selected.len());
        for (&m, &w) in route.selected.iter().zip(&route.weights) {
            let c = expert_forward(&params.experts[m].layers[l], &z);
            y.axpy(w, &c.out, 1.0);
            experts.push(c);
        }
        h = if l + 1 < cfg.layers {
            &params.backbone.inter[l] * &y
        } else {
            y
        };
        layers.push(LayerCache {
            input: z,
            route,
            experts,
        });
    }
    let head_act = (&params.backbone.head_hidden * &h).map(f64::tanh);
    let logits = &params.backbone.head_out * &head_act;
    Ok(SampleCache {
        layers,
        head_act,
        logits,
    })
}

/// Forward pass for one feature vector. Returns class logits and the routing trace.
pub fn forward(
    params: &MoeParams,
    x: &DVector<f64>,
    mask: Option<&ExpertMask>,
    rng: Option<&mut dyn RngCore>,
) -> Result<(DVector<f64>, ActivationTrace)> {
    let cache = forward_cached(params, x, mask, rng)?;
    let trace = ActivationTrace {
        layers: cache.layers.iter().map(|l| l.route.clone()).collect(),
    };
    Ok((cache.logits, trace))
}

fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.map(|v| v - lse)
}

fn check_label(params: &MoeParams, y: usize) -> Result<()> {
    if y >= params.config.n_classes {
        return Err(Error::Config(format!(
            "label {y} out of range for {} classes",
            params.config.n_classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn loss<B: Borrow<Sample>>(
    params: &MoeParams,
    batch: &[B],
    mask: Option<&ExpertMask>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let s = s.borrow();
        check_label(params, s.y)?;
        let cache = forward_cached(params, &s.x, mask, reborrow(&mut rng))?;
        total -= log_softmax(&cache.logits)[s.y];
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy<B: Borrow<Sample>>(params: &MoeParams, batch: &[B]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("accuracy of an empty batch".into()));
    }
    let mut hits = 0usize;
    for s in batch {
        let s = s.borrow();
        let cache = forward_cached(params, &s.x, None, None)?;
        if cache.logits.argmax().0 == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trainable {
    pub gate: bool,
    pub experts: BTreeSet<usize>,
}

impl Trainable {
    pub fn all(experts: usize) -> Self {
        Self {
            gate: true,
            experts: (0..experts).collect(),
        }
    }

    pub fn experts(experts: impl IntoIterator<Item = usize>) -> Self {
        Self {
            gate: false,
            experts: experts.into_iter().collect(),
        }
    }

    pub fn gate_only() -> Self {
        Self {
            gate: true,
            experts: BTreeSet::new(),
        }
    }

    pub fn with_gate(mut self) -> Self {
        self.gate = true;
        self
    }

    pub fn is_empty(&self) -> bool {
        !self.gate && self.experts.is_empty()
    }
}

/// Gradient structure mirroring the trainable groups. Untrainable groups are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gate: Option<Gate>,
    pub experts: Vec<Option<Expert>>,
}

impl Gradients {
    pub fn expert_norm_sq(&self) -> f64 {
        self.experts.iter().flatten().map(|e| e.norm_sq()).sum()
    }

    pub fn gate_norm_sq(&self) -> f64 {
        self.gate.as_ref().map_or(0.0, |g| g.norm_sq())
    }

    pub fn norm_sq(&self) -> f64 {
        self.expert_norm_sq() + self.gate_norm_sq()
    }

    /// Expert gradients in expert-index order, then the gate.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.flatten_experts();
        out.extend(self.flatten_gate());
        out
    }

    pub fn flatten_experts(&self) -> Vec<f64> {
        self.experts.iter().flatten().flat_map(|e| e.flatten()).collect()
    }

    pub fn flatten_gate(&self) -> Vec<f64> {
        self.gate.as_ref().map(|g| g.flatten()).unwrap_or_default()
    }
}

/// Mean loss over the batch and its exact gradient with respect to the
/// trainable groups, with routing fixed by the forward trace.
pub fn backward<B: Borrow<Sample>>(
    params: &MoeParams,
    batch: &[B],
    trainable: &Trainable,
    mask: Option<&ExpertMask>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Gradients)> {
    if trainable.is_empty() {
        return Err(Error::Argument("trainable set is empty".into()));
    }
    if batch.is_empty() {
        return Err(Error::Argument("gradient of an empty batch".into()));
    }
    let cfg = &params.config;
    if let Some(&m) = trainable.experts.iter().find(|&&m| m >= cfg.experts) {
        return Err(Error::Argument(format!("trainable expert {m} out of range")));
    }
    let mut grads = Gradients {
        gate: trainable.gate.then(|| params.gate.zeros_like()),
        experts: (0..cfg.experts)
            .map(|m| trainable.experts.contains(&m).then(|| params.experts[m].zeros_like()))
            .collect(),
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let bb = &params.backbone;

    for s in batch {
        let s = s.borrow();
        check_label(params, s.y)?;
        let cache = forward_cached(params, &s.x, mask, reborrow(&mut rng))?;
        let logp = log_softmax(&cache.logits);
        total -= logp[s.y];

        let mut dlogits = logp.map(f64::exp);
        dlogits[s.y] -= 1.0;
        dlogits *= scale;

        let dact = bb.head_out.tr_mul(&dlogits);
        let dpre = dact.zip_map(&cache.head_act, |d, a| d * (1.0 - a * a));
        let mut dh = bb.head_hidden.tr_mul(&dpre);

        for l in (0..cfg.layers).rev() {
            let lc = &cache.layers[l];
            let dy = if l + 1 < cfg.layers {
                bb.inter[l].tr_mul(&dh)
            } else {
                dh
            };
            let mut dz = dy.clone();
            let mut dweights = Vec::with_capacity(lc.route.selected.len());
            for ((&m, &w), ec) in lc.route.selected.iter().zip(&lc.route.weights).zip(&lc.experts) {
                dweights.push(dy.dot(&ec.out));
                let layer = &params.experts[m].layers[l];
                let dout = &dy * w;
                let dhidden = layer.w2.tr_mul(&dout);
                let dpre = dhidden.zip_map(&ec.pre, |d, p| if p > 0.0 { d } else { 0.0 });
                if let Some(g) = grads.experts[m].as_mut() {
                    let gl = &mut g.layers[l];
                    gl.w2.ger(1.0, &dout, &ec.hidden, 1.0);
                    gl.b2 += &dout;
                    gl.w1.ger(1.0, &dpre, &lc.input, 1.0);
                    gl.b1 += &dpre;
                }
                dz += layer.w1.tr_mul(&dpre);
            }
            // softmax over the selected logits
            let mean_dw: f64 = lc.route.weights.iter().zip(&dweights).map(|(w, d)| w * d).sum();
            let gate = &params.gate.layers[l];
            for ((&m, &w), &dw) in lc.route.selected.iter().zip(&lc.route.weights).zip(&dweights) {
                let dlogit = w * (dw - mean_dw);
                if dlogit == 0.0 {
                    continue;
                }
                if let Some(g) = grads.gate.as_mut() {
                    let mut row = g.layers[l].row_mut(m);
                    row += lc.input.transpose() * dlogit;
                }
                dz.axpy(dlogit, &gate.row(m).transpose(), 1.0);
            }
            dh = dz;
        }
    }
    Ok((total * scale, grads))
}
