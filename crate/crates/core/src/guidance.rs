//! The feature-matching objective and the per-timestep latent optimizer.
//!
//! For every trajectory `b`, frame `n ≥ 2` and captured layer, the loss adds
//! `‖G_b ⊙ (F_n[box_{b,n}] − SG(F_1[box_{b,1}]))‖₂`, one Frobenius norm per
//! term. The latent is then moved by a few AdamW steps whose state is reset
//! at every timestep.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{record_guidance_pass, DenoiserBackend, FeatureMapSet, FeatureVar, LayerKey, LayerKind, Stage};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::tape::{GatherIndex, Tape, Var};
use crate::tensor::Tensor;
use crate::trajectory::{gaussian_weight, GaussianWeight, LatentBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Gaussian,
    Identity,
}

/// Which features the loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Spatial self-attention with first-frame keys and values.
    AlignedSpatial,
    /// Spatial self-attention as the network computes it.
    RawSpatial,
    Temporal,
    Upsample,
    /// Upsample-block outputs minus their mean over frames.
    Moft,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 5] = [
        FeatureSource::AlignedSpatial,
        FeatureSource::RawSpatial,
        FeatureSource::Temporal,
        FeatureSource::Upsample,
        FeatureSource::Moft,
    ];

    pub fn aligned(self) -> bool {
        self == FeatureSource::AlignedSpatial
    }

    pub fn layer_kind(self) -> LayerKind {
        match self {
            FeatureSource::AlignedSpatial | FeatureSource::RawSpatial => LayerKind::SpatialAttn,
            FeatureSource::Temporal => LayerKind::TemporalAttn,
            FeatureSource::Upsample | FeatureSource::Moft => LayerKind::UpsampleBlock,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::AlignedSpatial => "aligned_spatial",
            FeatureSource::RawSpatial => "raw_spatial",
            FeatureSource::Temporal => "temporal",
            FeatureSource::Upsample => "upsample",
            FeatureSource::Moft => "moft",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Guidance hyperparameters. `timesteps` use the descending convention
/// `t = T − i + 1`, so `t = T` is the first (noisiest) sampler step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub timesteps: Vec<usize>,
    pub iterations_per_timestep: usize,
    pub learning_rate: f64,
    /// Layers named with spatial-attention keys; the feature source decides
    /// which kind of site at the same stage and index is actually read.
    pub layers: Vec<LayerKey>,
    pub weighting: Weighting,
    pub feature_source: FeatureSource,
    pub optimizer: AdamWSettings,
}

impl Default for GuidanceConfig {
    /// Defaults at the scale of a 50-step, 14-frame real-model run.
    fn default() -> Self {
        Self {
            timesteps: (30..=45).rev().collect(),
            iterations_per_timestep: 5,
            learning_rate: 0.21,
            layers: vec![
                LayerKey::new(Stage::Mid, LayerKind::SpatialAttn, 2),
                LayerKey::new(Stage::Mid, LayerKind::SpatialAttn, 3),
            ],
            weighting: Weighting::Gaussian,
            feature_source: FeatureSource::AlignedSpatial,
            optimizer: AdamWSettings::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.iterations_per_timestep == 0 {
            return Err(Error::Config("iterations_per_timestep must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(t) = self.timesteps.iter().find(|&&t| t == 0 || t > num_steps) {
            return Err(Error::Config(format!("timestep {t} outside 1..={num_steps}")));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("guidance needs at least one layer".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// The sites read for the configured feature source.
    pub fn resolved_layers(&self) -> Vec<LayerKey> {
        let kind = self.feature_source.layer_kind();
        let mut out: Vec<LayerKey> = Vec::new();
        for k in &self.layers {
            let key = LayerKey::new(k.stage, kind, k.index);
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }
}

/// The boxes of one trajectory on the latent grid and their weighting.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTarget {
    pub boxes: Vec<LatentBox>,
    pub weight: GaussianWeight,
}

impl GuidanceTarget {
    pub fn new(boxes: Vec<LatentBox>, weighting: Weighting) -> Result<Self> {
        let first = boxes
            .first()
            .ok_or_else(|| Error::Trajectory("trajectory has no boxes".into()))?;
        if boxes.iter().any(|b| b.height != first.height || b.width != first.width) {
            return Err(Error::Trajectory("crop shape must be constant across frames".into()));
        }
        let weight = match weighting {
            Weighting::Gaussian => gaussian_weight(first.height, first.width),
            Weighting::Identity => GaussianWeight::identity(first.height, first.width),
        };
        Ok(Self { boxes, weight })
    }
}

/// One `(layer, trajectory, frame)` term of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerm {
    pub layer: LayerKey,
    pub trajectory: usize,
    pub frame: usize,
    pub value: f64,
}

/// Loss value and its terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

fn check_crop(b: &LatentBox, shape: &[usize], t: usize) -> Result<()> {
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if b.frame >= n || b.top + b.height > h || b.left + b.width > w {
        return Err(Error::Shape(format!(
            "trajectory {t} box {b:?} outside feature map {n}×{h}×{w}"
        )));
    }
    Ok(())
}

fn check_target(t: &GuidanceTarget, frames: usize, index: usize) -> Result<()> {
    if t.boxes.len() != frames {
        return Err(Error::Trajectory(format!(
            "trajectory {index} has {} boxes for {frames} frames",
            t.boxes.len()
        )));
    }
    let b = &t.boxes[0];
    if t.weight.height != b.height || t.weight.width != b.width {
        return Err(Error::Shape(format!("trajectory {index} weight does not match its crop")));
    }
    Ok(())
}

/// Evaluates the objective on captured feature values.
pub fn eq1_loss(features: &[FeatureMapSet], targets: &[GuidanceTarget]) -> Result<LossBreakdown> {
    let mut terms = Vec::new();
    for f in features {
        let s = f.maps.shape().to_vec();
        let (frames, d) = (s[0], s[3]);
        for (ti, t) in targets.iter().enumerate() {
            check_target(t, frames, ti)?;
            for b in &t.boxes {
                check_crop(b, &s, ti)?;
            }
            let b1 = &t.boxes[0];
            for (n, bn) in t.boxes.iter().enumerate().skip(1) {
                let mut ss = 0.0;
                for r in 0..bn.height {
                    for c in 0..bn.width {
                        let g = t.weight.at(r, c);
                        let a = f.vector(n, bn.top + r, bn.left + c);
                        let a1 = f.vector(0, b1.top + r, b1.left + c);
                        for k in 0..d {
                            let diff = g * (a[k] - a1[k]);
                            ss += diff * diff;
                        }
                    }
                }
                terms.push(LossTerm {
                    layer: f.source,
                    trajectory: ti,
                    frame: n,
                    value: ss.sqrt(),
                });
            }
        }
    }
    Ok(LossBreakdown {
        total: terms.iter().map(|t| t.value).sum(),
        terms,
    })
}

/// Keeps the norm's derivative finite at zero while returning exactly zero there.
const NORM_EPS: f64 = 1e-24;

fn crop_index(b: &LatentBox, shape: &[usize]) -> Arc<Vec<GatherIndex>> {
    let (h, w, d) = (shape[1], shape[2], shape[3]);
    let mut index = Vec::with_capacity(b.height * b.width * d);
    for r in 0..b.height {
        for c in 0..b.width {
            let base = ((b.frame * h + b.top + r) * w + b.left + c) * d;
            index.extend((0..d).map(|k| Some((0, (base + k) as u32))));
        }
    }
    Arc::new(index)
}

/// Records the objective on a tape. Returns the scalar loss and one
/// variable per term, in the order of [`eq1_loss`].
pub fn eq1_loss_on_tape(
    tape: &mut Tape,
    features: &[FeatureVar],
    targets: &[GuidanceTarget],
) -> Result<(Var, Vec<(LossTerm, Var)>)> {
    let mut terms = Vec::new();
    for f in features {
        let s = tape.shape(f.var).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("feature map must be N×h×w×d, got {s:?}")));
        }
        let d = s[3];
        for (ti, t) in targets.iter().enumerate() {
            check_target(t, s[0], ti)?;
            for b in &t.boxes {
                check_crop(b, &s, ti)?;
            }
            let b1 = &t.boxes[0];
            let crop_shape = [b1.height, b1.width, d];
            let g = Arc::new(Tensor::from_fn(crop_shape, |i| t.weight.at(i[0], i[1])));
            let first = tape.gather(&[f.var], crop_shape, crop_index(b1, &s));
            let reference = tape.detach(first);
            for (n, bn) in t.boxes.iter().enumerate().skip(1) {
                let crop = tape.gather(&[f.var], crop_shape, crop_index(bn, &s));
                let diff = tape.sub(crop, reference);
                let weighted = tape.mul_const(diff, g.clone());
                let sq = tape.square(weighted);
                let ss = tape.sum(sq);
                let ss = tape.add_scalar(ss, NORM_EPS);
                let norm = tape.sqrt(ss);
                let norm = tape.add_scalar(norm, -NORM_EPS.sqrt());
                let value = tape.value(norm).item();
                terms.push((
                    LossTerm {
                        layer: f.source,
                        trajectory: ti,
                        frame: n,
                        value,
                    },
                    norm,
                ));
            }
        }
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (_, v) in &terms {
        total = tape.add(total, *v);
    }
    Ok((total, terms))
}

/// Subtracts the across-frame mean from a `[N, h, w, d]` feature variable.
pub fn subtract_frame_mean_on_tape(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    let n = s[0];
    if n < 2 {
        return Err(Error::Invalid("mean removal across frames needs at least two frames".into()));
    }
    let per_frame = s[1] * s[2] * s[3];
    let centering = Tensor::from_fn([n, n], |i| (if i[0] == i[1] { 1.0 } else { 0.0 }) - 1.0 / n as f64);
    let flat = tape.reshape(features, [1, n, per_frame]);
    let centered = tape.spatial_mix(flat, Arc::new(centering));
    Ok(tape.reshape(centered, s))
}

/// Records a guidance pass for `config` and returns the features the loss compares.
pub fn guidance_features(
    backend: &dyn DenoiserBackend,
    tape: &mut Tape,
    latent: &LatentVideo,
    config: &GuidanceConfig,
) -> Result<(Var, Vec<FeatureVar>, Vec<(Var, Var)>)> {
    let layers = config.resolved_layers();
    let source = config.feature_source;
    let (z, pass) = record_guidance_pass(backend, tape, latent, &layers, source.aligned())?;
    let mut features = pass.features;
    if source == FeatureSource::Moft {
        for f in &mut features {
            f.var = subtract_frame_mean_on_tape(tape, f.var)?;
        }
    }
    Ok((z, features, pass.anchors))
}

/// Objective value, its terms and its gradient with respect to `latent.data`.
pub fn loss_and_gradient(
    backend: &dyn DenoiserBackend,
    latent: &LatentVideo,
    targets: &[GuidanceTarget],
    config: &GuidanceConfig,
) -> Result<(LossBreakdown, Tensor)> {
    if !backend.capabilities().supports_analytic_gradient {
        return Err(Error::NoGradient(backend.name().to_string()));
    }
    let mut tape = Tape::new();
    let (z, features, _) = guidance_features(backend, &mut tape, latent, config)?;
    let (loss, terms) = eq1_loss_on_tape(&mut tape, &features, targets)?;
    let total = tape.value(loss).item();
    let grad = tape.backward(loss).wrt(z);
    Ok((
        LossBreakdown {
            total,
            terms: terms.into_iter().map(|(t, _)| t).collect(),
        },
        grad,
    ))
}

/// Adam with decoupled weight decay, on a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamW {
    settings: AdamWSettings,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, settings: AdamWSettings) -> Self {
        Self {
            settings,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let AdamWSettings {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.settings;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            if weight_decay != 0.0 {
                params[i] *= 1.0 - self.lr * weight_decay;
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Loss trace of one optimized timestep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuidanceLossReport {
    /// Sampler timestep `t`, when run inside the sampler.
    pub timestep: Option<usize>,
    /// Loss before each step plus the loss after the last step.
    pub losses: Vec<f64>,
    /// Terms before the first step and after the last.
    pub initial_terms: Vec<LossTerm>,
    pub final_terms: Vec<LossTerm>,
}

impl GuidanceLossReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    /// Final over initial loss, or 0 when the initial loss is 0.
    pub fn reduction_ratio(&self) -> f64 {
        if self.initial() > 0.0 {
            self.last() / self.initial()
        } else {
            0.0
        }
    }
}

/// Runs `config.iterations_per_timestep` AdamW steps on a copy of the latent.
///
/// The input latent is never modified; on a non-finite loss or gradient an
/// error is returned and the caller keeps its original latent.
pub fn optimize_latent(
    backend: &dyn DenoiserBackend,
    latent: &LatentVideo,
    targets: &[GuidanceTarget],
    config: &GuidanceConfig,
) -> Result<(LatentVideo, GuidanceLossReport)> {
    if config.iterations_per_timestep == 0 {
        return Err(Error::Config("iterations_per_timestep must be at least 1".into()));
    }
    let mut current = latent.clone();
    let mut opt = AdamW::new(current.data.len(), config.learning_rate, config.optimizer);
    let mut losses = Vec::with_capacity(config.iterations_per_timestep + 1);
    let mut initial_terms = Vec::new();
    for it in 0..=config.iterations_per_timestep {
        let (loss, grad) = loss_and_gradient(backend, &current, targets, config)?;
        if !loss.total.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "guidance iteration {it}: loss {} (gradient finite: {})",
                loss.total,
                grad.all_finite()
            )));
        }
        losses.push(loss.total);
        if it == 0 {
            initial_terms = loss.terms.clone();
        }
        if it == config.iterations_per_timestep {
            return Ok((
                current,
                GuidanceLossReport {
                    timestep: None,
                    losses,
                    initial_terms,
                    final_terms: loss.terms,
                },
            ));
        }
        opt.step(current.data.data_mut(), grad.data());
    }
    unreachable!("loop returns after the final evaluation")
}
