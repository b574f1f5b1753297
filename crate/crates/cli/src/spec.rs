//! The run specification and its resolution into backend, targets and options.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use trajguide_core::backend::{validate_layers, DenoiserBackend, SvdAdapter};
use trajguide_core::trajectory::{interpolate_trajectory, to_latent_boxes, Keyframe};
use trajguide_core::{
    AdapterManifest, BlobParams, BoxTrajectory, FeatureSource, FilterSpec, GenerateOptions, GuidanceConfig,
    GuidanceTarget, KeyframeTrajectory, LatentBox, LatentShape, LayerKey, NoiseInit, Point, ScheduleConfig,
    SyntheticBlobDenoiser, Tensor, ToyUNetConfig, ToyUNetDenoiser, Weighting,
};

/// An invalid or unreadable spec. Maps to exit code 2.
#[derive(Debug)]
pub struct SchemaError(pub String);

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid spec: {}", self.0)
    }
}

impl std::error::Error for SchemaError {}

fn schema(msg: impl fmt::Display) -> SchemaError {
    SchemaError(msg.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackendSpec {
    Blob,
    ToyUNet,
    Adapter(PathBuf),
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Blob => f.write_str("blob"),
            BackendSpec::ToyUNet => f.write_str("toy_unet"),
            BackendSpec::Adapter(p) => write!(f, "adapter:{}", p.display()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "blob" => Ok(BackendSpec::Blob),
            "toy_unet" => Ok(BackendSpec::ToyUNet),
            _ => match s.strip_prefix("adapter:") {
                Some(p) if !p.is_empty() => Ok(BackendSpec::Adapter(PathBuf::from(p))),
                _ => Err(serde::de::Error::custom(format!(
                    "unknown backend {s:?}, expected blob, toy_unet or adapter:<path>"
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeSpec {
    /// 1-based frame number.
    pub frame: usize,
    /// `[x, y]` in image pixels.
    pub center: [f64; 2],
}

/// One box trajectory in image pixels: dense centers or sparse keyframes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub h: u32,
    pub w: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframes: Option<Vec<KeyframeSpec>>,
}

impl TrajectorySpec {
    fn dense(&self, num_frames: usize) -> Result<BoxTrajectory, SchemaError> {
        let traj = match (&self.centers, &self.keyframes) {
            (Some(c), None) => BoxTrajectory {
                height_px: self.h,
                width_px: self.w,
                centers: c.iter().map(|p| Point::new(p[0], p[1])).collect(),
            },
            (None, Some(k)) => interpolate_trajectory(
                &KeyframeTrajectory {
                    height_px: self.h,
                    width_px: self.w,
                    keyframes: k
                        .iter()
                        .map(|k| Keyframe {
                            frame: k.frame,
                            center: Point::new(k.center[0], k.center[1]),
                        })
                        .collect(),
                },
                num_frames,
            )
            .map_err(schema)?,
            _ => return Err(schema("a trajectory needs exactly one of `centers` or `keyframes`")),
        };
        if traj.num_frames() != num_frames {
            return Err(schema(format!(
                "trajectory has {} centers for {num_frames} frames",
                traj.num_frames()
            )));
        }
        traj.validate().map_err(schema)?;
        Ok(traj)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tracker {
    /// Blob fit for the blob backend, patch tracking otherwise.
    #[default]
    Auto,
    BlobCenter,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub tracker: Tracker,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Rescale tracked and target points to this `[h, w]` before scoring.
    pub pre_resize: Option<[usize; 2]>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            tracker: Tracker::Auto,
            patch_radius: 2,
            search_radius: 3,
            pre_resize: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebugSpec {
    /// Dump the latent after every sampler step.
    pub latents: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSpec {
    /// Timestep whose features are visualized; defaults to the last
    /// configured guidance timestep.
    pub timestep: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSet {
    pub name: String,
    pub layers: Vec<LayerKey>,
}

/// Sweep values per ablation axis; missing axes use built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_source: Option<Vec<FeatureSource>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSet>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighting: Option<Vec<Weighting>>,
    /// Run sweep configurations on separate threads.
    pub parallel: bool,
}

fn default_channels() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub backend: BackendSpec,
    pub num_frames: usize,
    /// `[h, w]` of the latent grid.
    pub latent_hw: [usize; 2],
    /// `[h, w]` of the video in pixels; trajectories use these coordinates.
    pub image_hw: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the toy U-Net's weights.
    #[serde(default)]
    pub model_seed: u64,
    /// `[x, y]` pixel position of the subject in the conditioning frame;
    /// defaults to the first trajectory's first center.
    #[serde(default)]
    pub subject: Option<[f64; 2]>,
    #[serde(default)]
    pub trajectories: Vec<TrajectorySpec>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub noise_init: NoiseInit,
    #[serde(default)]
    pub blob: BlobParams,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub diagnose: DiagnoseSpec,
    #[serde(default)]
    pub debug: DebugSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub outputs: Option<PathBuf>,
}

impl RunSpec {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            frames: self.num_frames,
            channels: self.channels,
            height: self.latent_hw[0],
            width: self.latent_hw[1],
        }
    }

    pub fn guided(&self) -> bool {
        !self.trajectories.is_empty() && !self.guidance.timesteps.is_empty()
    }
}

/// A spec turned into runnable pieces. Construction validates everything a
/// run depends on, so no output is written for a spec that fails here.
pub struct Prepared {
    pub spec: RunSpec,
    pub backend: Box<dyn DenoiserBackend>,
    pub conditioning: Tensor,
    pub boxes: Vec<Vec<LatentBox>>,
    pub targets: Vec<GuidanceTarget>,
    pub options: GenerateOptions,
}

impl fmt::Debug for Prepared {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Prepared")
            .field("backend", &self.backend.name())
            .field("boxes", &self.boxes)
            .finish_non_exhaustive()
    }
}

fn build_backend(spec: &RunSpec) -> Result<Box<dyn DenoiserBackend>, SchemaError> {
    let shape = spec.latent_shape();
    Ok(match &spec.backend {
        BackendSpec::Blob => Box::new(SyntheticBlobDenoiser::new(shape, spec.blob.clone()).map_err(schema)?),
        BackendSpec::ToyUNet => Box::new(
            ToyUNetDenoiser::new(ToyUNetConfig {
                shape,
                seed: spec.model_seed,
            })
            .map_err(schema)?,
        ),
        BackendSpec::Adapter(path) => {
            let manifest = AdapterManifest::load(path).map_err(schema)?;
            if manifest.latent_shape() != shape {
                return Err(schema(format!(
                    "adapter manifest expects latent {:?}, spec gives {:?}",
                    manifest.latent_shape().dims(),
                    shape.dims()
                )));
            }
            Box::new(SvdAdapter::new(manifest).map_err(schema)?)
        }
    })
}

/// Channel-0 blob at `(row, col)` on the latent grid.
fn conditioning(spec: &RunSpec, center: (f64, f64)) -> Tensor {
    let [h, w] = spec.latent_hw;
    let radius = match spec.backend {
        BackendSpec::Blob => spec.blob.rho,
        _ => 2.5,
    };
    let mut data = vec![0.0; spec.channels * h * w];
    data[..h * w].copy_from_slice(&SyntheticBlobDenoiser::blob_plane(h, w, center, radius));
    Tensor::new([spec.channels, h, w], data)
}

pub fn prepare(spec: RunSpec) -> Result<Prepared, SchemaError> {
    let [ih, iw] = spec.image_hw;
    let [lh, lw] = spec.latent_hw;
    if spec.num_frames == 0 || spec.channels == 0 || ih == 0 || iw == 0 || lh == 0 || lw == 0 {
        return Err(schema("num_frames, channels, image_hw and latent_hw must be positive"));
    }
    let backend = build_backend(&spec)?;
    let schedule = spec.schedule.build().map_err(schema)?;

    let mut dense = Vec::new();
    let mut boxes = Vec::new();
    for (i, t) in spec.trajectories.iter().enumerate() {
        let traj = t.dense(spec.num_frames).map_err(|e| schema(format!("trajectories[{i}]: {}", e.0)))?;
        boxes.push(to_latent_boxes(&traj, (ih, iw), (lh, lw)).map_err(|e| schema(format!("trajectories[{i}]: {e}")))?);
        dense.push(traj);
    }
    let targets = boxes
        .iter()
        .map(|b| GuidanceTarget::new(b.clone(), spec.guidance.weighting))
        .collect::<Result<Vec<_>, _>>()
        .map_err(schema)?;

    if spec.guided() {
        spec.guidance.validate(schedule.steps()).map_err(schema)?;
        spec.filter.validate().map_err(schema)?;
        validate_layers(
            backend.as_ref(),
            &spec.guidance.resolved_layers(),
            spec.guidance.feature_source.aligned(),
        )
        .map_err(schema)?;
    }
    let e = &spec.eval;
    if e.patch_radius == 0 || e.search_radius == 0 {
        return Err(schema("eval radii must be at least 1"));
    }
    if let Some(t) = spec.diagnose.timestep {
        if t == 0 || t > schedule.steps() {
            return Err(schema(format!("diagnose.timestep {t} outside 1..={}", schedule.steps())));
        }
    }

    let subject = match (spec.subject, dense.first()) {
        (Some(p), _) => Point::new(p[0], p[1]),
        (None, Some(t)) => t.centers[0],
        (None, None) => Point::new((iw as f64 - 1.0) / 2.0, (ih as f64 - 1.0) / 2.0),
    };
    let center = (subject.y * lh as f64 / ih as f64, subject.x * lw as f64 / iw as f64);
    let conditioning = conditioning(&spec, center);

    let options = GenerateOptions {
        schedule: spec.schedule,
        guidance: spec.guidance.clone(),
        filter: spec.filter,
        noise_init: spec.noise_init,
        keep_latents: spec.debug.latents,
    };
    Ok(Prepared {
        spec,
        backend,
        conditioning,
        boxes,
        targets,
        options,
    })
}
