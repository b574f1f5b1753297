//! A small frozen-weight video U-Net with every hook kind.
//!
//! Two resolution levels: the bottom and mid stages run at half resolution
//! with 16 channels, the top stage at full resolution with 8 channels. Each
//! stage has three blocks of (residual MLP, spatial self-attention over the
//! pixels of one frame, temporal attention over frames at one pixel). The
//! input is `[c_in·z, conditioning, ln σ / 4]` per pixel and the output uses
//! EDM preconditioning with `σ_data = 1`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::spatial_self_attention;
use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::tape::{GatherIndex, Tape, Var};
use crate::tensor::Tensor;

use super::{
    bilinear_matrix, check_latent, Capabilities, DenoiserBackend, FeatureVar, LayerKey, LayerKind,
    RecordedPass, Stage,
};

const TOP_CHANNELS: usize = 8;
const LOW_CHANNELS: usize = 16;
const BLOCKS: usize = 3;
const RMS_EPS: f64 = 1e-6;
const BIAS_SCALE: f64 = 0.1;
const BRANCH_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyUNetConfig {
    pub shape: LatentShape,
    pub seed: u64,
}

#[derive(Debug)]
struct Dense {
    weight: Arc<Tensor>,
    bias: Vec<f64>,
}

#[derive(Debug)]
struct Block {
    res_in: Dense,
    res_out: Dense,
    spatial: [Dense; 4],
    temporal: [Dense; 4],
}

#[derive(Debug)]
struct Level {
    channels: usize,
    pixels: usize,
    temporal_perm: Arc<Vec<GatherIndex>>,
    temporal_unperm: Arc<Vec<GatherIndex>>,
    /// Resize matrix to the latent grid, absent at full resolution.
    to_latent: Option<Arc<Tensor>>,
}

#[derive(Debug)]
pub struct ToyUNetDenoiser {
    config: ToyUNetConfig,
    conv_in: Dense,
    down: Dense,
    up: Dense,
    head: Dense,
    stages: [Vec<Block>; 3],
    pool: Arc<Tensor>,
    upsample: Arc<Tensor>,
    im2col: Arc<Vec<GatherIndex>>,
    input_index: Arc<Vec<GatherIndex>>,
    output_index: Arc<Vec<GatherIndex>>,
    full: Level,
    half: Level,
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    let weight = Tensor::from_fn([fan_in, fan_out], |_| scale * draw());
    let bias = (0..fan_out).map(|_| BIAS_SCALE * draw()).collect();
    Dense {
        weight: Arc::new(weight),
        bias,
    }
}

fn block(rng: &mut ChaCha8Rng, c: usize) -> Block {
    Block {
        res_in: dense(rng, c, c),
        res_out: dense(rng, c, c),
        spatial: [dense(rng, c, c), dense(rng, c, c), dense(rng, c, c), dense(rng, c, c)],
        temporal: [dense(rng, c, c), dense(rng, c, c), dense(rng, c, c), dense(rng, c, c)],
    }
}

/// `[N, P, C] ↔ [P, N, C]` permutation.
fn transpose01(a: usize, b: usize, c: usize) -> Arc<Vec<GatherIndex>> {
    let mut index = Vec::with_capacity(a * b * c);
    for j in 0..b {
        for i in 0..a {
            for k in 0..c {
                index.push(Some((0, ((i * b + j) * c + k) as u32)));
            }
        }
    }
    Arc::new(index)
}

impl Level {
    fn new(frames: usize, channels: usize, hw: (usize, usize), latent_hw: (usize, usize)) -> Self {
        let pixels = hw.0 * hw.1;
        Self {
            channels,
            pixels,
            temporal_perm: transpose01(frames, pixels, channels),
            temporal_unperm: transpose01(pixels, frames, channels),
            to_latent: (hw != latent_hw).then(|| Arc::new(bilinear_matrix(hw, latent_hw))),
        }
    }
}

impl ToyUNetDenoiser {
    pub fn new(config: ToyUNetConfig) -> Result<Self> {
        let s = config.shape;
        if s.dims().contains(&0) || !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "toy U-Net needs positive, even spatial dims, got {:?}",
                s.dims()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cin = 2 * s.channels + 1;
        let conv_in = dense(&mut rng, 9 * cin, TOP_CHANNELS);
        let down = dense(&mut rng, TOP_CHANNELS, LOW_CHANNELS);
        let stages = [
            (0..BLOCKS).map(|_| block(&mut rng, LOW_CHANNELS)).collect(),
            (0..BLOCKS).map(|_| block(&mut rng, LOW_CHANNELS)).collect(),
            (0..BLOCKS).map(|_| block(&mut rng, TOP_CHANNELS)).collect(),
        ];
        let up = dense(&mut rng, LOW_CHANNELS, TOP_CHANNELS);
        let head = dense(&mut rng, TOP_CHANNELS, s.channels);

        let (h, w) = (s.height, s.width);
        let (hh, hw2) = (h / 2, w / 2);
        let pool = Tensor::from_fn([hh * hw2, h * w], |i| {
            let (oy, ox) = (i[0] / hw2, i[0] % hw2);
            let (iy, ix) = (i[1] / w, i[1] % w);
            if iy / 2 == oy && ix / 2 == ox {
                0.25
            } else {
                0.0
            }
        });
        let upsample = bilinear_matrix((hh, hw2), (h, w));

        let pixels = h * w;
        let mut im2col = Vec::with_capacity(s.frames * pixels * 9 * cin);
        for n in 0..s.frames {
            for p in 0..pixels {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                        for c in 0..cin {
                            im2col.push(inside.then(|| {
                                let q = yy as usize * w + xx as usize;
                                (0, ((n * pixels + q) * cin + c) as u32)
                            }));
                        }
                    }
                }
            }
        }
        let mut input_index = Vec::with_capacity(s.frames * pixels * cin);
        for n in 0..s.frames {
            for p in 0..pixels {
                for c in 0..cin {
                    input_index.push(Some(if c < s.channels {
                        (0, ((n * s.channels + c) * pixels + p) as u32)
                    } else if c < 2 * s.channels {
                        (1, ((c - s.channels) * pixels + p) as u32)
                    } else {
                        (2, 0)
                    }));
                }
            }
        }
        let output_index = (0..s.frames * s.channels * pixels)
            .map(|i| {
                let (n, c, p) = (i / (s.channels * pixels), (i / pixels) % s.channels, i % pixels);
                Some((0, ((n * pixels + p) * s.channels + c) as u32))
            })
            .collect();

        Ok(Self {
            conv_in,
            down,
            up,
            head,
            stages,
            pool: Arc::new(pool),
            upsample: Arc::new(upsample),
            im2col: Arc::new(im2col),
            input_index: Arc::new(input_index),
            output_index: Arc::new(output_index),
            full: Level::new(s.frames, TOP_CHANNELS, (h, w), (h, w)),
            half: Level::new(s.frames, LOW_CHANNELS, (hh, hw2), (h, w)),
            config,
        })
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.config
    }

    fn apply(&self, tape: &mut Tape, x: Var, d: &Dense) -> Var {
        let y = tape.linear(x, d.weight.clone());
        let shape = tape.shape(y).to_vec();
        let n = d.bias.len();
        let bias = Tensor::from_fn(shape, |i| d.bias[i[i.len() - 1] % n]);
        tape.add_const(y, &bias)
    }

    fn rms_norm(&self, tape: &mut Tape, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let sq = tape.square(x);
        let ss = tape.sum_last(sq);
        let ms = tape.scale(ss, 1.0 / c as f64);
        let ms = tape.add_scalar(ms, RMS_EPS);
        let rms = tape.sqrt(ms);
        let inv = tape.recip(rms);
        let rows = tape.value(x).len() / c;
        let index: Vec<GatherIndex> = (0..rows * c).map(|i| Some((0, (i / c) as u32))).collect();
        let inv_b = tape.gather(&[inv], shape, Arc::new(index));
        tape.mul(x, inv_b)
    }

    fn residual(&self, tape: &mut Tape, x: Var, branch: Var) -> Var {
        let b = tape.scale(branch, BRANCH_SCALE);
        tape.add(x, b)
    }

    /// Resizes a `[N, P, C]` stage feature to `[N, h, w, C]` on the latent grid.
    fn to_latent(&self, tape: &mut Tape, x: Var, level: &Level) -> Var {
        let s = self.config.shape;
        let y = match &level.to_latent {
            Some(m) => tape.spatial_mix(x, m.clone()),
            None => x,
        };
        tape.reshape(y, [s.frames, s.height, s.width, level.channels])
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        tape: &mut Tape,
        mut x: Var,
        b: &Block,
        level: &Level,
        key_of: impl Fn(LayerKind) -> LayerKey,
        capture: &[LayerKey],
        aligned: bool,
        pass: &mut RecordedPass,
    ) -> Var {
        let frames = self.config.shape.frames;
        let wants = |kind| capture.contains(&key_of(kind));

        let h = self.rms_norm(tape, x);
        let h = self.apply(tape, h, &b.res_in);
        let h = tape.silu(h);
        let h = self.apply(tape, h, &b.res_out);
        x = self.residual(tape, x, h);

        let h = self.rms_norm(tape, x);
        let q = self.apply(tape, h, &b.spatial[0]);
        let k = self.apply(tape, h, &b.spatial[1]);
        let v = self.apply(tape, h, &b.spatial[2]);
        let capture_spatial = wants(LayerKind::SpatialAttn);
        let att = spatial_self_attention(tape, q, k, v, 1, aligned && capture_spatial);
        if capture_spatial {
            let f = self.to_latent(tape, att.out, level);
            pass.features.push(FeatureVar {
                source: key_of(LayerKind::SpatialAttn),
                aligned,
                var: f,
            });
            pass.anchors.extend(att.anchor);
        }
        let o = self.apply(tape, att.out, &b.spatial[3]);
        x = self.residual(tape, x, o);

        let h = self.rms_norm(tape, x);
        let c = level.channels;
        let ht = tape.gather(&[h], [level.pixels, frames, c], level.temporal_perm.clone());
        let q = self.apply(tape, ht, &b.temporal[0]);
        let k = self.apply(tape, ht, &b.temporal[1]);
        let v = self.apply(tape, ht, &b.temporal[2]);
        let t = tape.attention(q, k, v, 1.0 / (c as f64).sqrt());
        let t = tape.gather(&[t], [frames, level.pixels, c], level.temporal_unperm.clone());
        if wants(LayerKind::TemporalAttn) {
            let f = self.to_latent(tape, t, level);
            pass.features.push(FeatureVar {
                source: key_of(LayerKind::TemporalAttn),
                aligned: false,
                var: f,
            });
        }
        let o = self.apply(tape, t, &b.temporal[3]);
        x = self.residual(tape, x, o);

        if wants(LayerKind::UpsampleBlock) {
            let f = self.to_latent(tape, x, level);
            pass.features.push(FeatureVar {
                source: key_of(LayerKind::UpsampleBlock),
                aligned: false,
                var: f,
            });
        }
        x
    }

    /// Full forward pass. Returns the raw network output `[N, C, h, w]`
    /// (before preconditioning) and whatever was captured.
    fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        latent: &LatentVideo,
        capture: &[LayerKey],
        aligned: bool,
    ) -> (Var, RecordedPass) {
        let s = self.config.shape;
        let sigma = latent.sigma;
        let c_in = 1.0 / (sigma * sigma + 1.0).sqrt();
        let pixels = s.height * s.width;
        let cin = 2 * s.channels + 1;
        let mut pass = RecordedPass::default();

        let zs = tape.scale(z, c_in);
        let cond = tape.constant(latent.conditioning.clone());
        let noise_level = tape.constant(Tensor::new([1], vec![sigma.max(1e-20).ln() / 4.0]));
        let x = tape.gather(&[zs, cond, noise_level], [s.frames, pixels, cin], self.input_index.clone());
        let cols = tape.gather(&[x], [s.frames, pixels, 9 * cin], self.im2col.clone());
        let x = self.apply(tape, cols, &self.conv_in);
        let skip = tape.silu(x);

        let low = tape.spatial_mix(skip, self.pool.clone());
        let mut x = self.apply(tape, low, &self.down);
        for (stage, level_stage) in [(Stage::Bottom, 0), (Stage::Mid, 1)] {
            for (i, b) in self.stages[level_stage].iter().enumerate() {
                let key_of = |kind| LayerKey::new(stage, kind, i as u8 + 1);
                x = self.run_block(tape, x, b, &self.half, key_of, capture, aligned, &mut pass);
            }
        }
        let up = tape.spatial_mix(x, self.upsample.clone());
        let up = self.apply(tape, up, &self.up);
        let mut x = tape.add(up, skip);
        for (i, b) in self.stages[2].iter().enumerate() {
            let key_of = |kind| LayerKey::new(Stage::Top, kind, i as u8 + 1);
            x = self.run_block(tape, x, b, &self.full, key_of, capture, aligned, &mut pass);
        }
        let x = self.rms_norm(tape, x);
        let out = self.apply(tape, x, &self.head);
        let out = tape.gather(&[out], s.dims(), self.output_index.clone());
        (out, pass)
    }
}

impl DenoiserBackend for ToyUNetDenoiser {
    fn name(&self) -> &str {
        "toy_unet"
    }

    fn latent_shape(&self) -> LatentShape {
        self.config.shape
    }

    fn layers(&self) -> Vec<LayerKey> {
        LayerKey::all()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_alignment_mode: true,
            supports_analytic_gradient: true,
        }
    }

    fn predict_clean(&self, latent: &LatentVideo) -> Result<Tensor> {
        check_latent(self, latent)?;
        let mut tape = Tape::new();
        let z = tape.constant(latent.data.clone());
        let (out, _) = self.forward(&mut tape, z, latent, &[], false);
        let sigma = latent.sigma;
        let c_skip = 1.0 / (sigma * sigma + 1.0);
        let c_out = sigma / (sigma * sigma + 1.0).sqrt();
        Ok(latent
            .data
            .zip_map(tape.value(out), |z, f| c_skip * z + c_out * f))
    }

    fn record_features(
        &self,
        tape: &mut Tape,
        z: Var,
        latent: &LatentVideo,
        layers: &[LayerKey],
        aligned: bool,
    ) -> Result<RecordedPass> {
        let (_, mut pass) = self.forward(tape, z, latent, layers, aligned);
        // return features in the requested order
        pass.features.sort_by_key(|f| layers.iter().position(|k| *k == f.source));
        Ok(pass)
    }
}
