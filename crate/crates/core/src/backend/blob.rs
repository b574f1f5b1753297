//! An analytic denoiser whose output is a single Gaussian blob.
//!
//! Channel 0 of every frame is read as a field of logits
//! `(x − mean)/(std·τ) + κ_n·cond₀`; the softmax-weighted center of mass of
//! those logits is the blob position. The conditioning prior pins frame 1
//! strongly (`κ₁`) and the remaining frames weakly, which makes unguided
//! samples drift toward a static video. Because the blob center is a closed
//! form function of the latent, control error can be measured exactly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::tape::{GatherIndex, Tape, Var};
use crate::tensor::Tensor;

use super::{
    check_latent, Capabilities, DenoiserBackend, FeatureVar, LayerKey, LayerKind, RecordedPass, Stage,
};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobParams {
    /// Blob radius (standard deviation) in latent pixels.
    pub rho: f64,
    /// Softmax temperature applied to per-frame standardized logits.
    pub tau: f64,
    /// Conditioning prior weight on frame 1.
    pub kappa_first: f64,
    /// Conditioning prior weight on frames 2..N.
    pub kappa_rest: f64,
    /// Feature channel `k` is a Gaussian of radius `rho · feature_scales[k]`.
    pub feature_scales: Vec<f64>,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            rho: 2.5,
            tau: 0.5,
            kappa_first: 10.0,
            kappa_rest: 3.0,
            feature_scales: vec![1.0, 2.0, 3.0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBlobDenoiser {
    shape: LatentShape,
    params: BlobParams,
    coords: Arc<Tensor>,
}

const STD_FLOOR_SQ: f64 = 1e-12;

impl SyntheticBlobDenoiser {
    pub fn new(shape: LatentShape, params: BlobParams) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::Config("blob backend needs positive latent dimensions".into()));
        }
        if !(params.rho > 0.0 && params.tau > 0.0) || params.feature_scales.is_empty() {
            return Err(Error::Config("blob radius, temperature and feature scales must be positive".into()));
        }
        if params.feature_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("feature scales must be positive".into()));
        }
        let w = shape.width;
        let coords = Tensor::from_fn([shape.height * w, 2], |i| {
            if i[1] == 0 {
                (i[0] / w) as f64
            } else {
                (i[0] % w) as f64
            }
        });
        Ok(Self {
            shape,
            params,
            coords: Arc::new(coords),
        })
    }

    pub fn params(&self) -> &BlobParams {
        &self.params
    }

    /// Unit-peak Gaussian plane of radius `radius` at `(row, col)`.
    pub fn blob_plane(height: usize, width: usize, center: (f64, f64), radius: f64) -> Vec<f64> {
        (0..height * width)
            .map(|p| {
                let dy = (p / width) as f64 - center.0;
                let dx = (p % width) as f64 - center.1;
                (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp()
            })
            .collect()
    }

    /// A conditioning frame with the blob at `(row, col)` in channel 0.
    pub fn conditioning_at(&self, center: (f64, f64)) -> Tensor {
        let s = self.shape;
        let mut data = vec![0.0; s.frame_len()];
        data[..s.height * s.width]
            .copy_from_slice(&Self::blob_plane(s.height, s.width, center, self.params.rho));
        Tensor::new([s.channels, s.height, s.width], data)
    }

    /// Blob centers `(row, col)` implied by a latent, one per frame.
    pub fn centers(&self, latent: &LatentVideo) -> Result<Vec<(f64, f64)>> {
        check_latent(self, latent)?;
        let mut tape = Tape::new();
        let z = tape.constant(latent.data.clone());
        let com = self.center_of_mass(&mut tape, z, &latent.conditioning);
        Ok(tape
            .value(com)
            .data()
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect())
    }

    fn hw(&self) -> usize {
        self.shape.height * self.shape.width
    }

    /// Broadcasts `[N]` (or column `col` of `[N, 2]`) to `[N, hw]`.
    fn broadcast_rows(&self, tape: &mut Tape, x: Var, stride: usize, col: usize) -> Var {
        let (n, hw) = (self.shape.frames, self.hw());
        let index: Vec<GatherIndex> = (0..n * hw)
            .map(|i| Some((0, ((i / hw) * stride + col) as u32)))
            .collect();
        tape.gather(&[x], [n, hw], Arc::new(index))
    }

    /// `[N, 2]` softmax center of mass `(row, col)` per frame.
    fn center_of_mass(&self, tape: &mut Tape, z: Var, conditioning: &Tensor) -> Var {
        let s = self.shape;
        let hw = self.hw();
        let index: Vec<GatherIndex> = (0..s.frames * hw)
            .map(|i| Some((0, ((i / hw) * s.channels * hw + i % hw) as u32)))
            .collect();
        let x = tape.gather(&[z], [s.frames, hw], Arc::new(index));

        let total = tape.sum_last(x);
        let mean = tape.scale(total, 1.0 / hw as f64);
        let mean_b = self.broadcast_rows(tape, mean, 1, 0);
        let centered = tape.sub(x, mean_b);
        let sq = tape.square(centered);
        let ss = tape.sum_last(sq);
        let var = tape.scale(ss, 1.0 / hw as f64);
        let var = tape.add_scalar(var, STD_FLOOR_SQ);
        let std = tape.sqrt(var);
        let inv = tape.recip(std);
        let inv_b = self.broadcast_rows(tape, inv, 1, 0);
        let standardized = tape.mul(centered, inv_b);
        let logits = tape.scale(standardized, 1.0 / self.params.tau);

        let cond0 = &conditioning.data()[..hw];
        let prior = Tensor::from_fn([s.frames, hw], |i| {
            let kappa = if i[0] == 0 {
                self.params.kappa_first
            } else {
                self.params.kappa_rest
            };
            kappa * cond0[i[1]]
        });
        let logits = tape.add_const(logits, &prior);
        let weights = tape.softmax_last(logits);
        tape.linear(weights, self.coords.clone())
    }

    /// `[N, hw]` unit-peak Gaussians of radius `radius` at the per-frame centers.
    fn blob_maps(&self, tape: &mut Tape, com: Var, radius: f64) -> Var {
        let hw = self.hw();
        let neg_coord = |axis: usize| {
            let c = &self.coords;
            Tensor::from_fn([self.shape.frames, hw], |i| -c.at(&[i[1], axis]))
        };
        let cy = self.broadcast_rows(tape, com, 2, 0);
        let cx = self.broadcast_rows(tape, com, 2, 1);
        let dy = tape.add_const(cy, &neg_coord(0));
        let dx = tape.add_const(cx, &neg_coord(1));
        let dy2 = tape.square(dy);
        let dx2 = tape.square(dx);
        let d2 = tape.add(dy2, dx2);
        let arg = tape.scale(d2, -1.0 / (2.0 * radius * radius));
        tape.exp(arg)
    }
}

impl DenoiserBackend for SyntheticBlobDenoiser {
    fn name(&self) -> &str {
        "blob"
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    /// The analytic features are exposed as the three mid-stage spatial
    /// attention sites; they are identical at every site.
    fn layers(&self) -> Vec<LayerKey> {
        (1..=3)
            .map(|i| LayerKey::new(Stage::Mid, LayerKind::SpatialAttn, i))
            .collect()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_alignment_mode: true,
            supports_analytic_gradient: true,
        }
    }

    fn predict_clean(&self, latent: &LatentVideo) -> Result<Tensor> {
        check_latent(self, latent)?;
        let s = self.shape;
        let hw = self.hw();
        let mut tape = Tape::new();
        let z = tape.constant(latent.data.clone());
        let com = self.center_of_mass(&mut tape, z, &latent.conditioning);
        let blob = self.blob_maps(&mut tape, com, self.params.rho);
        let b = tape.value(blob).data();
        let mut out = vec![0.0; s.frames * s.frame_len()];
        for n in 0..s.frames {
            out[n * s.frame_len()..n * s.frame_len() + hw].copy_from_slice(&b[n * hw..(n + 1) * hw]);
        }
        Ok(Tensor::new(s.dims(), out))
    }

    fn record_features(
        &self,
        tape: &mut Tape,
        z: Var,
        latent: &LatentVideo,
        layers: &[LayerKey],
        aligned: bool,
    ) -> Result<RecordedPass> {
        let s = self.shape;
        let hw = self.hw();
        let com = self.center_of_mass(tape, z, &latent.conditioning);
        let maps: Vec<Var> = self
            .params
            .feature_scales
            .iter()
            .map(|&k| self.blob_maps(tape, com, self.params.rho * k))
            .collect();
        let d = maps.len();
        let index: Vec<GatherIndex> = (0..s.frames * hw * d)
            .map(|i| Some(((i % d) as u32, (i / d) as u32)))
            .collect();
        let features = tape.gather(&maps, [s.frames, s.height, s.width, d], Arc::new(index));
        Ok(RecordedPass {
            features: layers
                .iter()
                .map(|&source| FeatureVar {
                    source,
                    aligned,
                    var: features,
                })
                .collect(),
            anchors: Vec::new(),
        })
    }
}
