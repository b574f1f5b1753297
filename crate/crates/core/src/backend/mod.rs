//! The denoiser contract and its implementations.
//!
//! A backend exposes two kinds of forward pass. The generation pass
//! ([`DenoiserBackend::predict_clean`]) is what the sampler steps with; the
//! guidance pass ([`DenoiserBackend::record_features`]) is recorded on a
//! [`Tape`] so that any scalar function of the captured features can be
//! differentiated with respect to the latent. Guidance passes never touch
//! backend state, so they cannot perturb generation.

pub mod adapter;
pub mod blob;
pub mod toy_unet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use adapter::{AdapterManifest, SvdAdapter};
pub use blob::{BlobParams, SyntheticBlobDenoiser};
pub use toy_unet::{ToyUNetConfig, ToyUNetDenoiser};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Bottom,
    Mid,
    Top,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    SpatialAttn,
    TemporalAttn,
    UpsampleBlock,
}

/// Names one hookable site, written `stage.kind.index` (e.g. `mid.spatial_attn.2`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerKey {
    pub stage: Stage,
    pub kind: LayerKind,
    /// Block index within the stage, 1 to 3.
    pub index: u8,
}

impl LayerKey {
    pub const fn new(stage: Stage, kind: LayerKind, index: u8) -> Self {
        Self { stage, kind, index }
    }

    /// All 27 keys of a three-stage, three-block network.
    pub fn all() -> Vec<LayerKey> {
        let mut keys = Vec::with_capacity(27);
        for stage in [Stage::Bottom, Stage::Mid, Stage::Top] {
            for index in 1..=3 {
                for kind in [LayerKind::SpatialAttn, LayerKind::TemporalAttn, LayerKind::UpsampleBlock] {
                    keys.push(LayerKey::new(stage, kind, index));
                }
            }
        }
        keys
    }
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Bottom => "bottom",
            Stage::Mid => "mid",
            Stage::Top => "top",
        }
    }
}

impl LayerKind {
    fn as_str(self) -> &'static str {
        match self {
            LayerKind::SpatialAttn => "spatial_attn",
            LayerKind::TemporalAttn => "temporal_attn",
            LayerKind::UpsampleBlock => "upsample_block",
        }
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.stage.as_str(), self.kind.as_str(), self.index)
    }
}

impl FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid layer key {s:?}, expected stage.kind.index"));
        let mut parts = s.split('.');
        let (Some(stage), Some(kind), Some(index), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let stage = match stage {
            "bottom" => Stage::Bottom,
            "mid" => Stage::Mid,
            "top" => Stage::Top,
            _ => return Err(bad()),
        };
        let kind = match kind {
            "spatial_attn" => LayerKind::SpatialAttn,
            "temporal_attn" => LayerKind::TemporalAttn,
            "upsample_block" => LayerKind::UpsampleBlock,
            _ => return Err(bad()),
        };
        let index: u8 = index.parse().map_err(|_| bad())?;
        if !(1..=3).contains(&index) {
            return Err(bad());
        }
        Ok(LayerKey::new(stage, kind, index))
    }
}

impl Serialize for LayerKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-frame features from one layer, resized to the latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    /// `[frames, h, w, d]`.
    pub maps: Tensor,
    pub source: LayerKey,
    pub aligned: bool,
}

impl FeatureMapSet {
    pub fn frames(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.maps.shape()[3]
    }

    /// Feature vector at one frame and pixel.
    pub fn vector(&self, frame: usize, row: usize, col: usize) -> &[f64] {
        let s = self.maps.shape();
        let start = ((frame * s[1] + row) * s[2] + col) * s[3];
        &self.maps.data()[start..start + s[3]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub supports_alignment_mode: bool,
    pub supports_analytic_gradient: bool,
}

/// A feature captured on a tape: `[frames, h, w, d]` at latent resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVar {
    pub source: LayerKey,
    pub aligned: bool,
    pub var: Var,
}

/// Everything a guidance pass recorded.
#[derive(Clone, Debug, Default)]
pub struct RecordedPass {
    pub features: Vec<FeatureVar>,
    /// Frame-1 keys and values (before stop-gradient) of every anchored layer.
    pub anchors: Vec<(Var, Var)>,
}

pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    /// The latent dimensions this backend was configured for.
    fn latent_shape(&self) -> LatentShape;

    fn layers(&self) -> Vec<LayerKey>;

    fn capabilities(&self) -> Capabilities;

    /// Denoised estimate `x̂` of `latent.data` (`N × C × h × w`).
    fn predict_clean(&self, latent: &LatentVideo) -> Result<Tensor>;

    /// Records a guidance pass on `tape`, reading the latent from `z` (whose
    /// value must equal `latent.data`). Layers are already validated.
    fn record_features(
        &self,
        tape: &mut Tape,
        z: Var,
        latent: &LatentVideo,
        layers: &[LayerKey],
        aligned: bool,
    ) -> Result<RecordedPass>;
}

pub(crate) fn check_latent(backend: &dyn DenoiserBackend, latent: &LatentVideo) -> Result<()> {
    latent.validate()?;
    if latent.shape() != backend.latent_shape() {
        return Err(Error::Shape(format!(
            "backend {} expects latent {:?}, got {:?}",
            backend.name(),
            backend.latent_shape().dims(),
            latent.shape().dims()
        )));
    }
    Ok(())
}

/// Rejects unknown layers and alignment on non-spatial-attention layers.
pub fn validate_layers(backend: &dyn DenoiserBackend, layers: &[LayerKey], aligned: bool) -> Result<()> {
    let registry = backend.layers();
    for key in layers {
        if !registry.contains(key) {
            return Err(Error::UnknownLayer(*key, backend.name().to_string()));
        }
        if aligned && key.kind != LayerKind::SpatialAttn {
            return Err(Error::AlignmentUnsupported(*key));
        }
    }
    if aligned && !backend.capabilities().supports_alignment_mode {
        return Err(Error::Config(format!(
            "backend {} does not support aligned guidance passes",
            backend.name()
        )));
    }
    if layers.is_empty() {
        return Err(Error::Config("a guidance pass needs at least one layer".into()));
    }
    Ok(())
}

/// Records a guidance pass with the latent as a differentiable tape input.
pub fn record_guidance_pass(
    backend: &dyn DenoiserBackend,
    tape: &mut Tape,
    latent: &LatentVideo,
    layers: &[LayerKey],
    aligned: bool,
) -> Result<(Var, RecordedPass)> {
    check_latent(backend, latent)?;
    validate_layers(backend, layers, aligned)?;
    let z = tape.variable(latent.data.clone());
    let pass = backend.record_features(tape, z, latent, layers, aligned)?;
    Ok((z, pass))
}

/// Runs a guidance pass and returns the captured feature values.
pub fn run_guidance_pass(
    backend: &dyn DenoiserBackend,
    latent: &LatentVideo,
    layers: &[LayerKey],
    aligned: bool,
) -> Result<Vec<FeatureMapSet>> {
    let mut tape = Tape::new();
    let (_, pass) = record_guidance_pass(backend, &mut tape, latent, layers, aligned)?;
    Ok(pass
        .features
        .iter()
        .map(|f| FeatureMapSet {
            maps: tape.value(f.var).clone(),
            source: f.source,
            aligned: f.aligned,
        })
        .collect())
}

/// Value and latent gradient of a scalar built from captured features.
///
/// `loss` receives the tape, the latent variable and the recorded features
/// and must return a scalar variable on that tape.
pub fn gradient_of<F>(
    backend: &dyn DenoiserBackend,
    latent: &LatentVideo,
    layers: &[LayerKey],
    aligned: bool,
    loss: F,
) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Tape, Var, &RecordedPass) -> Result<Var>,
{
    if !backend.capabilities().supports_analytic_gradient {
        return Err(Error::NoGradient(backend.name().to_string()));
    }
    let mut tape = Tape::new();
    let (z, pass) = record_guidance_pass(backend, &mut tape, latent, layers, aligned)?;
    let l = loss(&mut tape, z, &pass)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    let grad = tape.backward(l).wrt(z);
    if !grad.all_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok((value, grad))
}

/// Row-major `[out, in]` matrix of 1-D linear interpolation weights mapping
/// `n_in` samples onto `n_out` samples (half-pixel-center convention).
pub(crate) fn linear_resize_weights(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - t;
        m[o * n_in + i1] += t;
    }
    m
}

/// `[h_out·w_out, h_in·w_in]` bilinear resize matrix.
pub(crate) fn bilinear_matrix(hw_in: (usize, usize), hw_out: (usize, usize)) -> Tensor {
    let ry = linear_resize_weights(hw_in.0, hw_out.0);
    let rx = linear_resize_weights(hw_in.1, hw_out.1);
    let (hi, wi) = hw_in;
    Tensor::from_fn([hw_out.0 * hw_out.1, hi * wi], |ix| {
        let (oy, ox) = (ix[0] / hw_out.1, ix[0] % hw_out.1);
        let (iy, ixx) = (ix[1] / wi, ix[1] % wi);
        ry[oy * hi + iy] * rx[ox * wi + ixx]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_key_round_trips_through_text() {
        for key in LayerKey::all() {
            let s = key.to_string();
            assert_eq!(s.parse::<LayerKey>().unwrap(), key);
        }
        assert_eq!(
            "mid.spatial_attn.2".parse::<LayerKey>().unwrap(),
            LayerKey::new(Stage::Mid, LayerKind::SpatialAttn, 2)
        );
        for bad in ["mid.spatial_attn.4", "middle.spatial_attn.1", "mid.cross_attn.1", "mid.spatial_attn", ""] {
            assert!(bad.parse::<LayerKey>().is_err(), "{bad}");
        }
    }

    #[test]
    fn resize_rows_are_partitions_of_unity() {
        for (a, b) in [(4, 8), (8, 4), (5, 5), (1, 3)] {
            let m = linear_resize_weights(a, b);
            for row in m.chunks(a) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // identity size is the identity map
        let m = linear_resize_weights(4, 4);
        for i in 0..4 {
            assert_eq!(m[i * 4 + i], 1.0);
        }
    }
}
