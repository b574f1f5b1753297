//! Interface shape for a pre-trained image-to-video U-Net.
//!
//! No weights ship with this crate. The adapter reads a manifest describing
//! how [`LayerKey`]s map onto module paths of the real network and what the
//! latent geometry is, so a downstream integration can implement the
//! forward passes. Until then every pass reports an error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{Capabilities, DenoiserBackend, LayerKey, LayerKind, RecordedPass, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub model: String,
    /// Image pixels per latent pixel along each axis.
    pub latent_scale: usize,
    pub latent_channels: usize,
    pub num_frames: usize,
    pub image_hw: (usize, usize),
    /// Free-form note on where preconditioning constants come from.
    pub preconditioning: String,
    /// Default optimizer step size at the model's latent scale.
    pub learning_rate: f64,
    /// Layer key (`stage.kind.index`) to module path.
    pub layer_map: BTreeMap<LayerKey, String>,
}

impl AdapterManifest {
    /// The reference mapping for the upsampling path of a spatio-temporal
    /// U-Net laid out like the public image-to-video checkpoint: the bottom,
    /// mid and top stages are decoder blocks 1, 2 and 3.
    pub fn reference() -> Self {
        let mut layer_map = BTreeMap::new();
        for (stage, block) in [(Stage::Bottom, 1), (Stage::Mid, 2), (Stage::Top, 3)] {
            for index in 1..=3u8 {
                let j = index - 1;
                let base = format!("up_blocks.{block}.attentions.{j}");
                layer_map.insert(
                    LayerKey::new(stage, LayerKind::SpatialAttn, index),
                    format!("{base}.transformer_blocks.0.attn1"),
                );
                layer_map.insert(
                    LayerKey::new(stage, LayerKind::TemporalAttn, index),
                    format!("{base}.temporal_transformer_blocks.0.attn1"),
                );
                layer_map.insert(LayerKey::new(stage, LayerKind::UpsampleBlock, index), base);
            }
        }
        Self {
            model: "stable-video-diffusion-img2vid".into(),
            latent_scale: 8,
            latent_channels: 4,
            num_frames: 14,
            image_hw: (576, 1024),
            preconditioning: "read c_skip, c_out, c_in and c_noise from the model's scheduler config".into(),
            learning_rate: 0.21,
            layer_map,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_scale == 0 || self.latent_channels == 0 || self.num_frames == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        if !self.image_hw.0.is_multiple_of(self.latent_scale) || !self.image_hw.1.is_multiple_of(self.latent_scale) {
            return Err(Error::Config("image size must be a multiple of the latent scale".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("adapter learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            frames: self.num_frames,
            channels: self.latent_channels,
            height: self.image_hw.0 / self.latent_scale,
            width: self.image_hw.1 / self.latent_scale,
        }
    }
}

/// A backend that knows the geometry and layer names but has no weights.
#[derive(Clone, Debug)]
pub struct SvdAdapter {
    manifest: AdapterManifest,
    name: String,
}

impl SvdAdapter {
    pub fn new(manifest: AdapterManifest) -> Result<Self> {
        manifest.validate()?;
        Ok(Self {
            name: format!("adapter:{}", manifest.model),
            manifest,
        })
    }

    pub fn manifest(&self) -> &AdapterManifest {
        &self.manifest
    }

    fn unavailable(&self) -> Error {
        Error::Invalid(format!(
            "backend {} has no weights loaded; implement the forward pass for {}",
            self.name, self.manifest.model
        ))
    }
}

impl DenoiserBackend for SvdAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn latent_shape(&self) -> LatentShape {
        self.manifest.latent_shape()
    }

    fn layers(&self) -> Vec<LayerKey> {
        self.manifest.layer_map.keys().copied().collect()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_alignment_mode: true,
            supports_analytic_gradient: false,
        }
    }

    fn predict_clean(&self, _latent: &LatentVideo) -> Result<Tensor> {
        Err(self.unavailable())
    }

    fn record_features(
        &self,
        _tape: &mut Tape,
        _z: Var,
        _latent: &LatentVideo,
        _layers: &[LayerKey],
        _aligned: bool,
    ) -> Result<RecordedPass> {
        Err(self.unavailable())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_manifest_round_trips_and_covers_every_key() {
        let m = AdapterManifest::reference();
        assert_eq!(m.layer_map.len(), 27);
        let json = serde_json::to_string_pretty(&m).unwrap();
        let back: AdapterManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.latent_shape().dims(), [14, 4, 72, 128]);
        assert_eq!(
            m.layer_map[&"mid.spatial_attn.3".parse().unwrap()],
            "up_blocks.2.attentions.2.transformer_blocks.0.attn1"
        );
    }

    #[test]
    fn adapter_reports_missing_weights() {
        let a = SvdAdapter::new(AdapterManifest::reference()).unwrap();
        assert!(!a.capabilities().supports_analytic_gradient);
        let shape = a.latent_shape();
        let latent = LatentVideo::new(
            Tensor::zeros(shape.dims()),
            1.0,
            Tensor::zeros([shape.channels, shape.height, shape.width]),
        )
        .unwrap();
        assert!(a.predict_clean(&latent).is_err());
    }
}
