//! Pins the toy U-Net's weights and forward pass to a stored digest so that
//! refactors cannot silently change the network.

use sha2::{Digest, Sha256};
use trajguide_core::backend::DenoiserBackend;
use trajguide_core::{LatentShape, LatentVideo, Tensor, ToyUNetConfig, ToyUNetDenoiser};

fn digest() -> String {
    let shape = LatentShape {
        frames: 2,
        channels: 4,
        height: 8,
        width: 8,
    };
    let net = ToyUNetDenoiser::new(ToyUNetConfig { shape, seed: 0 }).unwrap();
    let latent = LatentVideo::new(Tensor::zeros(shape.dims()), 1.0, Tensor::zeros([4, 8, 8])).unwrap();
    let x = net.predict_clean(&latent).unwrap();
    let hash = Sha256::digest(x.to_le_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn toy_unet_seed0_forward_digest() {
    let want = include_str!("golden/toy_unet_seed0.sha256").trim();
    let got = digest();
    if std::env::var_os("TRAJGUIDE_BLESS").is_some() {
        std::fs::write(
            concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/toy_unet_seed0.sha256"),
            format!("{got}\n"),
        )
        .unwrap();
        return;
    }
    assert_eq!(got, want, "rerun with TRAJGUIDE_BLESS=1 if the change is intended");
}
