use trajguide_core::backend::{run_guidance_pass, DenoiserBackend};
use trajguide_core::baselines::{dragdiffusion_features, dragdiffusion_layers, freetraj_noise_init};
use trajguide_core::guidance::loss_and_gradient;
use trajguide_core::metrics::{blob_center, cross_frame_cosine, pca_diagnostic};
use trajguide_core::scenes::{diagonal_boxes, moving_patch_latent};
use trajguide_core::*;

fn toy(frames: usize, hw: usize, seed: u64) -> ToyUNetDenoiser {
    let shape = LatentShape {
        frames,
        channels: 4,
        height: hw,
        width: hw,
    };
    ToyUNetDenoiser::new(ToyUNetConfig { shape, seed }).unwrap()
}

fn keys(list: &str) -> Vec<LayerKey> {
    list.split(',').map(|k| k.parse().unwrap()).collect()
}

fn mean_cosine(sets: &[FeatureMapSet], boxes: &[LatentBox]) -> f64 {
    sets.iter().map(|f| cross_frame_cosine(f, boxes).unwrap()).sum::<f64>() / sets.len() as f64
}

#[test]
fn aligned_features_agree_across_frames_more_than_raw_or_upsample() {
    let net = toy(6, 16, 0);
    let boxes = diagonal_boxes(6, 2, 5, 1);
    let latent = moving_patch_latent(net.latent_shape(), &boxes, 1.0, 7).unwrap();
    let spatial = keys("mid.spatial_attn.2,mid.spatial_attn.3");
    let aligned = mean_cosine(&run_guidance_pass(&net, &latent, &spatial, true).unwrap(), &boxes);
    let raw = mean_cosine(&run_guidance_pass(&net, &latent, &spatial, false).unwrap(), &boxes);
    let up = mean_cosine(&dragdiffusion_features(&net, &latent, &dragdiffusion_layers()).unwrap(), &boxes);
    assert!(aligned > raw, "aligned {aligned} raw {raw}");
    assert!(aligned > up, "aligned {aligned} upsample {up}");
}

#[test]
fn blob_features_are_at_least_as_aligned_as_raw_toy_features() {
    let shape = LatentShape {
        frames: 4,
        channels: 4,
        height: 16,
        width: 16,
    };
    let blob = SyntheticBlobDenoiser::new(shape, BlobParams::default()).unwrap();
    let net = ToyUNetDenoiser::new(ToyUNetConfig { shape, seed: 1 }).unwrap();
    let boxes = diagonal_boxes(4, 3, 5, 2);
    // every frame's blob sits at the center of its box
    let planes: Vec<f64> = (0..4)
        .flat_map(|n| {
            let c = boxes[n].center();
            let mut frame = SyntheticBlobDenoiser::blob_plane(16, 16, (c.y, c.x), 2.5);
            frame.extend(std::iter::repeat_n(0.0, 3 * 256));
            frame
        })
        .collect();
    let cond = blob.conditioning_at((boxes[0].center().y, boxes[0].center().x));
    let latent = LatentVideo::new(Tensor::new(shape.dims(), planes), 0.5, cond).unwrap();
    let blob_feats = run_guidance_pass(&blob, &latent, &keys("mid.spatial_attn.2"), true).unwrap();
    let raw = run_guidance_pass(&net, &latent, &keys("mid.spatial_attn.2"), false).unwrap();
    assert!(mean_cosine(&blob_feats, &boxes) >= mean_cosine(&raw, &boxes));
    let pca = pca_diagnostic(&raw[0]).unwrap();
    assert!(pca.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
}

#[test]
fn dragdiffusion_path_reports_unaligned_features_and_has_a_gradient() {
    let net = toy(3, 8, 2);
    let boxes = diagonal_boxes(3, 1, 3, 1);
    let latent = moving_patch_latent(net.latent_shape(), &boxes, 2.0, 3).unwrap();
    let feats = dragdiffusion_features(&net, &latent, &dragdiffusion_layers()).unwrap();
    assert_eq!(feats.len(), 2);
    assert!(feats.iter().all(|f| !f.aligned));
    assert!(dragdiffusion_features(&net, &latent, &keys("mid.spatial_attn.2")).is_err());

    let config = GuidanceConfig {
        feature_source: FeatureSource::Upsample,
        ..GuidanceConfig::default()
    };
    let target = GuidanceTarget::new(boxes, Weighting::Gaussian).unwrap();
    let (loss, grad) = loss_and_gradient(&net, &latent, &[target], &config).unwrap();
    assert!(loss.total > 0.0);
    assert!(grad.data().iter().any(|&g| g != 0.0));
}

#[test]
fn toy_unet_generation_with_every_feature_source() {
    let net = toy(3, 8, 4);
    let boxes = diagonal_boxes(3, 1, 3, 1);
    let cond = Tensor::from_fn([4, 8, 8], |i| ((i[0] + i[1] * 3 + i[2]) % 5) as f64 / 5.0);
    let target = GuidanceTarget::new(boxes, Weighting::Gaussian).unwrap();
    for source in FeatureSource::ALL {
        let options = GenerateOptions {
            schedule: ScheduleConfig {
                steps: 4,
                ..ScheduleConfig::default()
            },
            guidance: GuidanceConfig {
                timesteps: vec![4, 3],
                iterations_per_timestep: 2,
                feature_source: source,
                ..GuidanceConfig::default()
            },
            filter: FilterSpec::default(),
            noise_init: NoiseInit::Freetraj,
            keep_latents: false,
        };
        let out = generate(&net, &cond, std::slice::from_ref(&target), &options, 11).unwrap();
        assert_eq!(out.reports.len(), 2, "{source:?}");
        assert!(out.video.all_finite());
    }
}

#[test]
fn freetraj_init_moves_the_blob_start_noise() {
    let shape = LatentShape {
        frames: 2,
        channels: 1,
        height: 6,
        width: 6,
    };
    let noise = LatentVideo::noise(shape, 10.0, Tensor::zeros([1, 6, 6]), 0).unwrap();
    let boxes = diagonal_boxes(2, 0, 2, 3);
    let (out, _) = freetraj_noise_init(&noise, &[boxes]).unwrap();
    assert_eq!(out.data.at(&[1, 0, 4, 4]), noise.data.at(&[0, 0, 1, 1]));
    let c = blob_center(&SyntheticBlobDenoiser::blob_plane(6, 6, (2.0, 3.0), 1.0), 6, 6).unwrap();
    assert!((c.x - 3.0).abs() < 1e-9);
}
