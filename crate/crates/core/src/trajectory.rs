//! Bounding-box trajectories: interpolation, latent-grid rasterization and
//! the Gaussian weighting used by the feature-matching loss.
//!
//! Image coordinates are pixels with `x` to the right and `y` down. Frame
//! numbers in keyframe lists are 1-based, as users write them; everything
//! else indexes frames from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A fixed-size box and its center in every output frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTrajectory {
    pub height_px: u32,
    pub width_px: u32,
    pub centers: Vec<Point>,
}

/// A center pinned at a 1-based frame number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub center: Point,
}

/// A box with sparse keyframed centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeTrajectory {
    pub height_px: u32,
    pub width_px: u32,
    pub keyframes: Vec<Keyframe>,
}

/// A trajectory box realized on the latent grid for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBox {
    pub frame: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentBox {
    pub fn center(&self) -> Point {
        Point::new(
            self.left as f64 + (self.width as f64 - 1.0) / 2.0,
            self.top as f64 + (self.height as f64 - 1.0) / 2.0,
        )
    }
}

/// Peak-normalized Gaussian heatmap over a box crop, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWeight {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GaussianWeight {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// All-ones weighting of the same shape.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }
}

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

impl BoxTrajectory {
    pub fn num_frames(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::Trajectory("box size must be at least 1x1".into()));
        }
        if self.centers.is_empty() {
            return Err(Error::Trajectory("trajectory has no centers".into()));
        }
        if let Some(c) = self.centers.iter().find(|c| !(c.x.is_finite() && c.y.is_finite())) {
            return Err(Error::Trajectory(format!("non-finite center {c:?}")));
        }
        Ok(())
    }

    /// Shifts every center so the whole box lies inside an `image_hw` image.
    pub fn clamped_to_image(&self, image_hw: (usize, usize)) -> Result<Self> {
        self.validate()?;
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let (bh, bw) = (self.height_px as f64, self.width_px as f64);
        if bh > ih || bw > iw {
            return Err(Error::Trajectory(format!(
                "box {}x{} does not fit in a {}x{} image",
                self.height_px, self.width_px, image_hw.0, image_hw.1
            )));
        }
        let centers = self
            .centers
            .iter()
            .map(|c| {
                Point::new(
                    c.x.clamp((bw - 1.0) / 2.0, iw - 1.0 - (bw - 1.0) / 2.0),
                    c.y.clamp((bh - 1.0) / 2.0, ih - 1.0 - (bh - 1.0) / 2.0),
                )
            })
            .collect();
        Ok(Self {
            centers,
            ..self.clone()
        })
    }

    /// True when every center equals the first one.
    pub fn is_static(&self) -> bool {
        self.centers.iter().all(|c| *c == self.centers[0])
    }
}

/// Densifies keyframes by piecewise-linear interpolation over `num_frames`
/// frames. Centers before the first or after the last keyframe are held
/// constant; keyframe centers are reproduced exactly.
pub fn interpolate_trajectory(spec: &KeyframeTrajectory, num_frames: usize) -> Result<BoxTrajectory> {
    if num_frames == 0 {
        return Err(Error::Trajectory("num_frames must be at least 1".into()));
    }
    if spec.keyframes.is_empty() {
        return Err(Error::Trajectory("no keyframes".into()));
    }
    let mut keys = spec.keyframes.clone();
    keys.sort_by_key(|k| k.frame);
    for pair in keys.windows(2) {
        if pair[0].frame == pair[1].frame {
            return Err(Error::Trajectory(format!(
                "duplicate keyframe at frame {}",
                pair[0].frame
            )));
        }
    }
    if let Some(k) = keys.iter().find(|k| k.frame < 1 || k.frame > num_frames) {
        return Err(Error::Trajectory(format!(
            "keyframe at frame {} outside [1, {num_frames}]",
            k.frame
        )));
    }

    let mut centers = Vec::with_capacity(num_frames);
    for frame in 1..=num_frames {
        let next = keys.partition_point(|k| k.frame < frame);
        let center = if next == keys.len() {
            keys[keys.len() - 1].center
        } else if keys[next].frame == frame || next == 0 {
            keys[next].center
        } else {
            let (a, b) = (&keys[next - 1], &keys[next]);
            let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
            Point::new(
                a.center.x + t * (b.center.x - a.center.x),
                a.center.y + t * (b.center.y - a.center.y),
            )
        };
        centers.push(center);
    }
    let dense = BoxTrajectory {
        height_px: spec.height_px,
        width_px: spec.width_px,
        centers,
    };
    dense.validate()?;
    Ok(dense)
}

/// Rasterizes a trajectory onto an `h × w` latent grid.
///
/// The box size is scaled and rounded once so every frame shares one crop
/// shape; per-frame corners are rounded half-up and then shifted (never
/// shrunk) to lie inside the grid.
pub fn to_latent_boxes(
    traj: &BoxTrajectory,
    image_hw: (usize, usize),
    latent_hw: (usize, usize),
) -> Result<Vec<LatentBox>> {
    traj.validate()?;
    let (ih, iw) = image_hw;
    let (lh, lw) = latent_hw;
    if ih == 0 || iw == 0 || lh == 0 || lw == 0 {
        return Err(Error::Trajectory("image and latent sizes must be positive".into()));
    }
    let sy = lh as f64 / ih as f64;
    let sx = lw as f64 / iw as f64;
    let height = round_half_up(traj.height_px as f64 * sy).max(1) as usize;
    let width = round_half_up(traj.width_px as f64 * sx).max(1) as usize;
    if height > lh || width > lw {
        return Err(Error::Trajectory(format!(
            "scaled box {height}x{width} exceeds the {lh}x{lw} latent grid"
        )));
    }
    Ok(traj
        .centers
        .iter()
        .enumerate()
        .map(|(frame, c)| {
            let top = round_half_up(c.y * sy - height as f64 / 2.0);
            let left = round_half_up(c.x * sx - width as f64 / 2.0);
            LatentBox {
                frame,
                top: top.clamp(0, (lh - height) as i64) as usize,
                left: left.clamp(0, (lw - width) as i64) as usize,
                height,
                width,
            }
        })
        .collect())
}

/// Gaussian heatmap with standard deviations `(0.2·h, 0.2·w)` centered on
/// the crop, normalized to a peak of 1.
pub fn gaussian_weight(height: usize, width: usize) -> GaussianWeight {
    assert!(height >= 1 && width >= 1, "gaussian_weight needs a non-empty crop");
    let row = gaussian_1d(height);
    let col = gaussian_1d(width);
    let values = row
        .iter()
        .flat_map(|r| col.iter().map(move |c| r * c))
        .collect();
    GaussianWeight {
        height,
        width,
        values,
    }
}

fn gaussian_1d(n: usize) -> Vec<f64> {
    let sigma = 0.2 * n as f64;
    let center = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}
