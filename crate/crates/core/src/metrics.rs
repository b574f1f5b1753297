//! Motion-fidelity and feature-alignment measurements.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::backend::FeatureMapSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::{LatentBox, Point};

/// Per-frame points with a validity flag each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackedTrajectory {
    pub points: Vec<Point>,
    pub valid: Vec<bool>,
}

impl TrackedTrajectory {
    pub fn all_valid(points: Vec<Point>) -> Self {
        let valid = vec![true; points.len()];
        Self { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Scales coordinates from one frame size to another, pixel centers aligned.
    pub fn resized(&self, from_hw: (usize, usize), to_hw: (usize, usize)) -> Self {
        let sy = to_hw.0 as f64 / from_hw.0 as f64;
        let sx = to_hw.1 as f64 / from_hw.1 as f64;
        let points = self
            .points
            .iter()
            .map(|p| Point::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5))
            .collect();
        Self {
            points,
            valid: self.valid.clone(),
        }
    }
}

fn inside(p: Point, hw: (usize, usize)) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (hw.1 - 1) as f64 && p.y <= (hw.0 - 1) as f64
}

/// Mean distance between generated and target points over every valid
/// (trajectory, frame) pair. With `frame_hw`, target points outside the
/// frame are skipped as well.
pub fn objmc(
    generated: &[TrackedTrajectory],
    target: &[TrackedTrajectory],
    frame_hw: Option<(usize, usize)>,
) -> Result<f64> {
    if generated.len() != target.len() {
        return Err(Error::Invalid(format!(
            "{} generated trajectories for {} targets",
            generated.len(),
            target.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (g, t) in generated.iter().zip(target) {
        if g.len() != t.len() || g.valid.len() != g.len() || t.valid.len() != t.len() {
            return Err(Error::Invalid("paired trajectories differ in length".into()));
        }
        for i in 0..g.len() {
            let keep = g.valid[i] && t.valid[i] && frame_hw.is_none_or(|hw| inside(t.points[i], hw));
            if keep {
                sum += g.points[i].distance(t.points[i]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidPoints);
    }
    Ok(sum / count as f64)
}

/// Keeps the videos with at least `min_frames` frames.
pub fn filter_short<T>(videos: Vec<(usize, T)>, min_frames: usize) -> Vec<(usize, T)> {
    videos.into_iter().filter(|(n, _)| *n >= min_frames).collect()
}

/// The dataset rule: videos shorter than this are omitted.
pub const MIN_EVAL_FRAMES: usize = 14;

/// Tracks a point through a `[N, H, W]` video by matching the frame-1 patch.
///
/// Every frame searches all integer displacements within `search_radius` of
/// the previous position and keeps the lowest mean squared difference over
/// the in-frame part of the patch. Ties go to the smallest displacement, then
/// to the first in row-major order. Frames where the patch had to be clipped
/// are marked invalid.
pub fn patch_track(video: &Tensor, start: Point, patch_radius: usize, search_radius: usize) -> Result<TrackedTrajectory> {
    let s = video.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("expected [frames, height, width], got {s:?}")));
    }
    if patch_radius == 0 || search_radius == 0 {
        return Err(Error::Invalid("patch and search radii must be at least 1".into()));
    }
    let (n, h, w) = (s[0], s[1] as i64, s[2] as i64);
    if !inside(start, (s[1], s[2])) {
        return Err(Error::Invalid(format!("start point ({}, {}) is outside frame 1", start.x, start.y)));
    }
    let (r0, c0) = (start.y.round() as i64, start.x.round() as i64);
    let pr = patch_radius as i64;
    let data = video.data();
    let px = |f: usize, r: i64, c: i64| data[(f * s[1] + r as usize) * s[2] + c as usize];
    let in_frame = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w;
    let clipped = |r: i64, c: i64| r - pr < 0 || c - pr < 0 || r + pr >= h || c + pr >= w;

    let mut points = vec![Point::new(c0 as f64, r0 as f64)];
    let mut valid = vec![!clipped(r0, c0)];
    let (mut r, mut c) = (r0, c0);
    let sr = search_radius as i64;
    for f in 1..n {
        let mut best: Option<(f64, i64, i64, i64)> = None;
        for dy in -sr..=sr {
            for dx in -sr..=sr {
                let (cr, cc) = (r + dy, c + dx);
                if !in_frame(cr, cc) {
                    continue;
                }
                let (mut ssd, mut count) = (0.0, 0usize);
                for py in -pr..=pr {
                    for pxo in -pr..=pr {
                        let (tr, tc) = (r0 + py, c0 + pxo);
                        let (vr, vc) = (cr + py, cc + pxo);
                        if in_frame(tr, tc) && in_frame(vr, vc) {
                            let d = px(f, vr, vc) - px(0, tr, tc);
                            ssd += d * d;
                            count += 1;
                        }
                    }
                }
                let cost = ssd / count as f64;
                let norm = dy * dy + dx * dx;
                let better = match best {
                    None => true,
                    Some((bc, bn, _, _)) => cost < bc || (cost == bc && norm < bn),
                };
                if better {
                    best = Some((cost, norm, cr, cc));
                }
            }
        }
        let (_, _, br, bc) = best.expect("the current position is always in frame");
        r = br;
        c = bc;
        points.push(Point::new(c as f64, r as f64));
        valid.push(!clipped(r, c) && !clipped(r0, c0));
    }
    Ok(TrackedTrajectory { points, valid })
}

/// Sub-pixel location of the maximum of a positive peak in a row-major plane,
/// refined by a parabola through the log-values of the neighbors on each axis.
/// Exact for an isotropic Gaussian away from the border.
pub fn blob_center(plane: &[f64], height: usize, width: usize) -> Result<Point> {
    if plane.len() != height * width || plane.is_empty() {
        return Err(Error::Shape("plane does not match its dimensions".into()));
    }
    let (mut best, mut at) = (f64::NEG_INFINITY, 0);
    for (i, &v) in plane.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite("blob plane".into()));
        }
        if v > best {
            best = v;
            at = i;
        }
    }
    let (r, c) = (at / width, at % width);
    let refine = |lo: Option<f64>, mid: f64, hi: Option<f64>| -> f64 {
        match (lo, hi) {
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 && mid > 0.0 => {
                let (la, lm, lb) = (a.ln(), mid.ln(), b.ln());
                let denom = la - 2.0 * lm + lb;
                if denom < 0.0 {
                    (0.5 * (la - lb) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let get = |rr: usize, cc: usize| plane[rr * width + cc];
    let dy = refine(
        r.checked_sub(1).map(|rr| get(rr, c)),
        best,
        (r + 1 < height).then(|| get(r + 1, c)),
    );
    let dx = refine(
        c.checked_sub(1).map(|cc| get(r, cc)),
        best,
        (c + 1 < width).then(|| get(r, c + 1)),
    );
    Ok(Point::new(c as f64 + dx, r as f64 + dy))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => dot / (na * nb),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Mean cosine similarity between each frame `n ≥ 2` and frame 1 at
/// corresponding pixels of a box trajectory.
pub fn cross_frame_cosine(features: &FeatureMapSet, boxes: &[LatentBox]) -> Result<f64> {
    let s = features.maps.shape();
    if boxes.len() != s[0] || boxes.len() < 2 {
        return Err(Error::Invalid(format!("{} boxes for {} frames", boxes.len(), s[0])));
    }
    let first = boxes[0];
    let (mut sum, mut count) = (0.0, 0usize);
    for (n, b) in boxes.iter().enumerate().skip(1) {
        if b.height != first.height || b.width != first.width {
            return Err(Error::Trajectory("box size changes along a trajectory".into()));
        }
        if b.top + b.height > s[1] || b.left + b.width > s[2] || first.top + first.height > s[1] || first.left + first.width > s[2] {
            return Err(Error::Trajectory(format!("box at frame {} leaves the feature grid", n + 1)));
        }
        for r in 0..b.height {
            for c in 0..b.width {
                let a = features.vector(n, b.top + r, b.left + c);
                let f = features.vector(0, first.top + r, first.left + c);
                sum += cosine(a, f);
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Joint PCA over every frame's feature vectors.
#[derive(Clone, Debug, Serialize)]
pub struct PcaDiagnostic {
    /// `[frames, h, w, k]`, each component min-max scaled to `[0, 1]`.
    #[serde(skip)]
    pub projections: Tensor,
    /// Share of total variance of each kept component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    /// Unit principal directions, one per kept component.
    pub components: Vec<Vec<f64>>,
    /// Number of components with non-negligible variance (at most 3 kept).
    pub rank: usize,
}

pub fn pca_diagnostic(features: &FeatureMapSet) -> Result<PcaDiagnostic> {
    let s = features.maps.shape().to_vec();
    let d = s[3];
    if d < 3 {
        return Err(Error::Invalid(format!("PCA diagnostic needs at least 3 channels, got {d}")));
    }
    let rows = s[0] * s[1] * s[2];
    let data = features.maps.data();
    let mut mean = vec![0.0; d];
    for v in data.chunks(d) {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / rows as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for v in data.chunks(d) {
        for i in 0..d {
            let a = v[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += a * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let x = cov[(i, j)] / rows as f64;
            cov[(i, j)] = x;
            cov[(j, i)] = x;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-12 * top.max(f64::MIN_POSITIVE))
        .count();
    let k = rank.min(3);
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let explained_variance_ratio = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();

    let mut proj = vec![0.0; rows * k];
    for (p, v) in data.chunks(d).enumerate() {
        for (j, comp) in components.iter().enumerate() {
            proj[p * k + j] = v.iter().zip(&mean).zip(comp).map(|((x, m), c)| (x - m) * c).sum();
        }
    }
    for j in 0..k {
        let (lo, hi) = (0..rows)
            .map(|p| proj[p * k + j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        for p in 0..rows {
            let x = &mut proj[p * k + j];
            *x = if hi > lo { (*x - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Ok(PcaDiagnostic {
        projections: Tensor::new([s[0], s[1], s[2], k], proj),
        explained_variance_ratio,
        components,
        rank,
    })
}
