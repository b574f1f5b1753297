//! PNG output: data frames, overlays and PCA projections.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use trajguide_core::metrics::TrackedTrajectory;
use trajguide_core::{LatentBox, Tensor};

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(pixels)?;
    Ok(())
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Min and max over channel 0 of every frame of an `[N, C, h, w]` video.
pub fn channel0_range(video: &Tensor) -> (f64, f64) {
    let s = video.shape();
    let hw = s[2] * s[3];
    (0..s[0])
        .flat_map(|n| &video.data()[n * s[1] * hw..n * s[1] * hw + hw])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn gray_frame(video: &Tensor, n: usize, range: (f64, f64)) -> Vec<u8> {
    let s = video.shape();
    let hw = s[2] * s[3];
    let span = if range.1 > range.0 { range.1 - range.0 } else { 1.0 };
    video.data()[n * s[1] * hw..n * s[1] * hw + hw]
        .iter()
        .map(|&x| to_u8((x - range.0) / span))
        .collect()
}

/// Channel 0 of frame `n` as an 8-bit grayscale PNG, normalized to `range`.
pub fn write_frame(path: &Path, video: &Tensor, n: usize, range: (f64, f64)) -> Result<()> {
    let s = video.shape();
    write_png(path, s[3], s[2], png::ColorType::Grayscale, &gray_frame(video, n, range))
}

/// Frame `n` upscaled by `scale`, with box outlines in red and tracked
/// points in green.
pub fn write_overlay(
    path: &Path,
    video: &Tensor,
    n: usize,
    range: (f64, f64),
    boxes: &[Vec<LatentBox>],
    tracked: &[TrackedTrajectory],
    scale: usize,
) -> Result<()> {
    let s = video.shape();
    let (h, w) = (s[2], s[3]);
    let (sh, sw) = (h * scale, w * scale);
    let gray = gray_frame(video, n, range);
    let mut rgb = vec![0u8; sh * sw * 3];
    for r in 0..sh {
        for c in 0..sw {
            let g = gray[(r / scale) * w + c / scale];
            rgb[(r * sw + c) * 3..(r * sw + c) * 3 + 3].copy_from_slice(&[g, g, g]);
        }
    }
    let mut paint = |r: usize, c: usize, color: [u8; 3]| {
        if r < sh && c < sw {
            rgb[(r * sw + c) * 3..(r * sw + c) * 3 + 3].copy_from_slice(&color);
        }
    };
    for traj in boxes {
        let b = traj[n];
        let (top, left) = (b.top * scale, b.left * scale);
        let (bottom, right) = ((b.top + b.height) * scale - 1, (b.left + b.width) * scale - 1);
        for c in left..=right {
            paint(top, c, [255, 0, 0]);
            paint(bottom, c, [255, 0, 0]);
        }
        for r in top..=bottom {
            paint(r, left, [255, 0, 0]);
            paint(r, right, [255, 0, 0]);
        }
    }
    for t in tracked {
        if t.valid[n] {
            let p = t.points[n];
            let (r, c) = ((p.y + 0.5) * scale as f64, (p.x + 0.5) * scale as f64);
            if r >= 0.0 && c >= 0.0 {
                let (r, c) = (r as usize, c as usize);
                for dr in 0..3 {
                    for dc in 0..3 {
                        paint((r + dr).saturating_sub(1), (c + dc).saturating_sub(1), [0, 255, 0]);
                    }
                }
            }
        }
    }
    write_png(path, sw, sh, png::ColorType::Rgb, &rgb)
}

/// Frame `n` of a `[N, h, w, k]` projection (values in `[0, 1]`) as RGB; a
/// missing component renders as 0.
pub fn write_projection(path: &Path, proj: &Tensor, n: usize) -> Result<()> {
    let s = proj.shape();
    let (h, w, k) = (s[1], s[2], s[3]);
    let base = n * h * w * k;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for j in 0..3 {
            rgb.push(if j < k { to_u8(proj.data()[base + p * k + j]) } else { 0 });
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &rgb)
}
