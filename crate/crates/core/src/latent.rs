use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A noisy video latent `frames × channels × h × w` at noise level `sigma`,
/// together with the clean conditioning frame (`channels × h × w`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub data: Tensor,
    pub sigma: f64,
    pub conditioning: Tensor,
}

/// Dimensions of a latent video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl LatentVideo {
    pub fn new(data: Tensor, sigma: f64, conditioning: Tensor) -> Result<Self> {
        let latent = Self {
            data,
            sigma,
            conditioning,
        };
        latent.validate()?;
        Ok(latent)
    }

    pub fn shape(&self) -> LatentShape {
        let s = self.data.shape();
        LatentShape {
            frames: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Shape(format!("latent must be N×C×h×w with positive dims, got {s:?}")));
        }
        if self.conditioning.shape() != &s[1..] {
            return Err(Error::Shape(format!(
                "conditioning frame {:?} does not match latent frame {:?}",
                self.conditioning.shape(),
                &s[1..]
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("invalid noise level {}", self.sigma)));
        }
        Ok(())
    }

    /// Same conditioning and noise level, different data.
    pub fn with_data(&self, data: Tensor) -> Self {
        Self {
            data,
            sigma: self.sigma,
            conditioning: self.conditioning.clone(),
        }
    }

    /// Seeded unit-normal noise scaled by `sigma`.
    pub fn noise(shape: LatentShape, sigma: f64, conditioning: Tensor, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::from_fn(shape.dims(), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        });
        Self::new(data, sigma, conditioning)
    }

    /// Slice of one frame (`channels × h × w`, row-major).
    pub fn frame(&self, n: usize) -> &[f64] {
        let len = self.shape().frame_len();
        &self.data.data()[n * len..(n + 1) * len]
    }

    /// One `h × w` plane of one frame.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let s = self.shape();
        let hw = s.height * s.width;
        let start = (n * s.channels + c) * hw;
        &self.data.data()[start..start + hw]
    }
}
