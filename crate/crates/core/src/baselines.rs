//! Zero-shot baselines adapted to the same guidance loop: trajectory-copied
//! initial noise, upsample-block features, and upsample features with the
//! frame mean removed.

use serde::{Deserialize, Serialize};

use crate::backend::{run_guidance_pass, DenoiserBackend, FeatureMapSet, LayerKey, LayerKind, Stage};
use crate::error::{Error, Result};
use crate::guidance::FeatureSource;
use crate::latent::LatentVideo;
use crate::tensor::Tensor;
use crate::trajectory::LatentBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    FreetrajInit,
    DragdiffusionFeats,
    MoftFeats,
}

impl BaselineVariant {
    /// Feature source the variant optimizes, if it changes it.
    pub fn feature_source(self) -> Option<FeatureSource> {
        match self {
            BaselineVariant::FreetrajInit => None,
            BaselineVariant::DragdiffusionFeats => Some(FeatureSource::Upsample),
            BaselineVariant::MoftFeats => Some(FeatureSource::Moft),
        }
    }
}

fn check_boxes(latent: &LatentVideo, boxes: &[LatentBox]) -> Result<()> {
    let s = latent.shape();
    if boxes.len() != s.frames {
        return Err(Error::Trajectory(format!(
            "trajectory has {} boxes for {} frames",
            boxes.len(),
            s.frames
        )));
    }
    let (h, w) = (boxes[0].height, boxes[0].width);
    for (n, b) in boxes.iter().enumerate() {
        if b.height != h || b.width != w {
            return Err(Error::Trajectory("box size changes along a trajectory".into()));
        }
        if b.height == 0 || b.width == 0 || b.top + b.height > s.height || b.left + b.width > s.width {
            return Err(Error::Trajectory(format!("box at frame {} leaves the latent", n + 1)));
        }
    }
    Ok(())
}

/// Replaces the noise under every box `b, n ≥ 2` with the frame-1 noise under
/// box `b, 1`, in all channels. Crops are always read from the input noise;
/// where boxes of different trajectories overlap, the later trajectory wins
/// and the overlap is reported.
pub fn freetraj_noise_init(noise: &LatentVideo, trajectories: &[Vec<LatentBox>]) -> Result<(LatentVideo, Vec<String>)> {
    noise.validate()?;
    for boxes in trajectories {
        check_boxes(noise, boxes)?;
    }
    let s = noise.shape();
    let [_, c, h, w] = s.dims();
    let src = noise.data.data();
    let mut out = src.to_vec();
    let mut owner: Vec<Option<usize>> = vec![None; s.frames * h * w];
    let mut diagnostics = Vec::new();
    for (b, boxes) in trajectories.iter().enumerate() {
        let first = boxes[0];
        for (n, bx) in boxes.iter().enumerate().skip(1) {
            let mut overlapped = None;
            for r in 0..bx.height {
                for col in 0..bx.width {
                    let (dr, dc) = (bx.top + r, bx.left + col);
                    let (sr, sc) = (first.top + r, first.left + col);
                    let cell = &mut owner[(n * h + dr) * w + dc];
                    if let Some(prev) = *cell {
                        overlapped.get_or_insert(prev);
                    }
                    *cell = Some(b);
                    for ch in 0..c {
                        out[((n * c + ch) * h + dr) * w + dc] = src[((ch) * h + sr) * w + sc];
                    }
                }
            }
            if let Some(prev) = overlapped {
                diagnostics.push(format!(
                    "frame {}: box of trajectory {} overwrites trajectory {}",
                    n + 1,
                    b + 1,
                    prev + 1
                ));
            }
        }
    }
    Ok((noise.with_data(Tensor::new(noise.data.shape().to_vec(), out)), diagnostics))
}

/// Default layers of the upsample-feature baseline: the second and third
/// upsample blocks of the middle stage.
pub fn dragdiffusion_layers() -> Vec<LayerKey> {
    vec![
        LayerKey::new(Stage::Mid, LayerKind::UpsampleBlock, 2),
        LayerKey::new(Stage::Mid, LayerKind::UpsampleBlock, 3),
    ]
}

/// Upsample-block outputs from a standard (non-aligned) pass.
pub fn dragdiffusion_features(
    backend: &dyn DenoiserBackend,
    latent: &LatentVideo,
    layers: &[LayerKey],
) -> Result<Vec<FeatureMapSet>> {
    if let Some(k) = layers.iter().find(|k| k.kind != LayerKind::UpsampleBlock) {
        return Err(Error::Config(format!("{k} is not an upsample block")));
    }
    run_guidance_pass(backend, latent, layers, false)
}

/// `F'_n = F_n − mean_m F_m` per location and channel.
pub fn moft_features(features: &[FeatureMapSet]) -> Result<Vec<FeatureMapSet>> {
    features
        .iter()
        .map(|f| {
            let s = f.maps.shape().to_vec();
            let n = s[0];
            if n < 2 {
                return Err(Error::Invalid("mean removal across frames needs at least two frames".into()));
            }
            let per_frame = s[1] * s[2] * s[3];
            let src = f.maps.data();
            let mut out = src.to_vec();
            for i in 0..per_frame {
                let mean = (0..n).map(|m| src[m * per_frame + i]).sum::<f64>() / n as f64;
                for m in 0..n {
                    out[m * per_frame + i] -= mean;
                }
            }
            Ok(FeatureMapSet {
                maps: Tensor::new(s, out),
                source: f.source,
                aligned: f.aligned,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use proptest::prelude::*;

    fn noise(frames: usize, c: usize, h: usize, w: usize, seed: u64) -> LatentVideo {
        let shape = LatentShape {
            frames,
            channels: c,
            height: h,
            width: w,
        };
        LatentVideo::noise(shape, 1.0, Tensor::zeros([c, h, w]), seed).unwrap()
    }

    fn lb(frame: usize, top: usize, left: usize, size: usize) -> LatentBox {
        LatentBox {
            frame,
            top,
            left,
            height: size,
            width: size,
        }
    }

    fn at(l: &LatentVideo, n: usize, c: usize, r: usize, col: usize) -> f64 {
        l.data.at(&[n, c, r, col])
    }

    #[test]
    fn one_pixel_copy_is_exact() {
        let z = noise(2, 2, 4, 4, 5);
        let (out, notes) = freetraj_noise_init(&z, &[vec![lb(0, 0, 0, 1), lb(1, 1, 1, 1)]]).unwrap();
        assert!(notes.is_empty());
        for c in 0..2 {
            assert_eq!(at(&out, 1, c, 1, 1).to_bits(), at(&z, 0, c, 0, 0).to_bits());
        }
        let changed = out.data.data().iter().zip(z.data.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
    }

    #[test]
    fn static_trajectory_is_idempotent() {
        let z = noise(4, 1, 6, 6, 9);
        let traj = vec![(0..4).map(|n| lb(n, 1, 2, 3)).collect::<Vec<_>>()];
        let (once, _) = freetraj_noise_init(&z, &traj).unwrap();
        let (twice, _) = freetraj_noise_init(&once, &traj).unwrap();
        assert_eq!(once.data, twice.data);
        for n in 1..4 {
            for r in 1..4 {
                for c in 2..5 {
                    assert_eq!(at(&once, n, 0, r, c), at(&z, 0, 0, r, c));
                }
            }
        }
    }

    #[test]
    fn overlaps_are_reported_and_later_wins() {
        let z = noise(2, 1, 6, 6, 2);
        let a = vec![lb(0, 0, 0, 2), lb(1, 2, 2, 2)];
        let b = vec![lb(0, 4, 4, 2), lb(1, 3, 3, 2)];
        let (out, notes) = freetraj_noise_init(&z, &[a, b]).unwrap();
        assert_eq!(notes.len(), 1);
        assert_eq!(at(&out, 1, 0, 3, 3), at(&z, 0, 0, 4, 4));
    }

    #[test]
    fn bad_boxes_are_rejected() {
        let z = noise(2, 1, 4, 4, 0);
        assert!(freetraj_noise_init(&z, &[vec![lb(0, 0, 0, 1)]]).is_err());
        assert!(freetraj_noise_init(&z, &[vec![lb(0, 0, 0, 2), lb(1, 3, 3, 2)]]).is_err());
        assert!(freetraj_noise_init(&z, &[vec![lb(0, 0, 0, 2), lb(1, 0, 0, 1)]]).is_err());
    }

    /// Two-sided one-sample KS p-value from the Kolmogorov series.
    fn ks_p_value(mut xs: Vec<f64>) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max);
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let p: f64 = (1..100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn noise_outside_crops_stays_standard_normal() {
        let z = noise(3, 4, 32, 32, 17);
        let traj: Vec<_> = (0..3).map(|n| lb(n, 4 + 3 * n, 4 + 3 * n, 7)).collect();
        let (out, _) = freetraj_noise_init(&z, std::slice::from_ref(&traj)).unwrap();
        let mut outside = Vec::new();
        for n in 1..3 {
            let b = traj[n];
            for c in 0..4 {
                for r in 0..32 {
                    for col in 0..32 {
                        let inside = (b.top..b.top + 7).contains(&r) && (b.left..b.left + 7).contains(&col);
                        if !inside {
                            outside.push(at(&out, n, c, r, col));
                        }
                    }
                }
            }
        }
        assert!(outside.len() >= 7000);
        let mut more = outside.clone();
        more.extend(out.plane(0, 0).iter().chain(out.plane(0, 1)).chain(out.plane(0, 2)).copied());
        assert!(more.len() >= 10_000);
        assert!(ks_p_value(more) > 0.01);
        assert!(ks_p_value(outside.iter().map(|x| x * 1.3 + 0.2).collect()) < 0.01);
    }

    fn fmap(values: Vec<f64>, frames: usize) -> FeatureMapSet {
        let per = values.len() / frames;
        FeatureMapSet {
            maps: Tensor::new([frames, 1, 1, per], values),
            source: LayerKey::new(Stage::Mid, LayerKind::UpsampleBlock, 2),
            aligned: false,
        }
    }

    #[test]
    fn moft_examples() {
        let out = moft_features(&[fmap(vec![1.0, 2.0, 6.0], 3)]).unwrap();
        assert_eq!(out[0].maps.data(), &[-2.0, -1.0, 3.0]);
        let out = moft_features(&[fmap(vec![0.5, -2.0, -0.5, 2.0], 2)]).unwrap();
        assert_eq!(out[0].maps.data(), &[0.5, -2.0, -0.5, 2.0]);
        let out = moft_features(&[fmap(vec![4.0, 4.0, 4.0], 3)]).unwrap();
        assert!(out[0].maps.data().iter().all(|&x| x == 0.0));
        assert!(moft_features(&[fmap(vec![1.0, 2.0], 1)]).is_err());
    }

    proptest! {
        #[test]
        fn moft_sums_to_zero_over_frames(frames in 2usize..6, d in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..frames * d).map(|_| rng.random_range(-50.0..50.0)).collect();
            let out = moft_features(&[fmap(values, frames)]).unwrap();
            for i in 0..d {
                let s: f64 = (0..frames).map(|m| out[0].maps.data()[m * d + i]).sum();
                prop_assert!(s.abs() < 1e-6);
            }
        }
    }
}
