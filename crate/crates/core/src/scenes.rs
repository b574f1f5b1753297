//! Small synthetic inputs shared by tests, benches and the CLI diagnostics.

use crate::error::Result;
use crate::latent::{LatentShape, LatentVideo};
use crate::tensor::Tensor;
use crate::trajectory::LatentBox;

/// A square patch of size `size` starting at `(start, start)` and moving one
/// pixel down and right per frame.
pub fn diagonal_boxes(frames: usize, start: usize, size: usize, step: usize) -> Vec<LatentBox> {
    (0..frames)
        .map(|n| LatentBox {
            frame: n,
            top: start + step * n,
            left: start + step * n,
            height: size,
            width: size,
        })
        .collect()
}

/// A textured patch riding along `boxes` over a faint noise background, at
/// noise level `sigma` with EDM input scaling (`√(σ² + 1)`). The conditioning
/// frame is the clean first frame.
pub fn moving_patch_latent(shape: LatentShape, boxes: &[LatentBox], sigma: f64, seed: u64) -> Result<LatentVideo> {
    let background = LatentVideo::noise(shape, 0.3, Tensor::zeros([shape.channels, shape.height, shape.width]), seed)?;
    let clean = Tensor::from_fn(shape.dims(), |i| {
        let (n, c, r, col) = (i[0], i[1], i[2], i[3]);
        let b = boxes[n];
        let inside = (b.top..b.top + b.height).contains(&r) && (b.left..b.left + b.width).contains(&col);
        if inside {
            let (dr, dc) = ((r - b.top) as i64, (col - b.left) as i64);
            2.0 * (((dr * 3 + dc * 5 + c as i64 * 2) % 7) as f64 / 3.0 - 1.0)
        } else {
            background.data.at(&[0, c, r, col])
        }
    });
    let frame = shape.frame_len();
    let conditioning = Tensor::new([shape.channels, shape.height, shape.width], clean.data()[..frame].to_vec());
    let scale = (sigma * sigma + 1.0).sqrt();
    LatentVideo::new(clean.map(|x| x * scale), sigma, conditioning)
}
