//! Frequency-domain blending of an optimized latent with the original one.
//!
//! Each `h × w` plane is transformed with a 2-D FFT; the low band (weighted by
//! a radial low-pass response `H`) is taken from the optimized latent and the
//! complementary band from the original. Radial frequency is normalized so
//! the Nyquist corner of the grid sits at `r = 1`.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Butterworth,
    Ideal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Cutoff radius `γ` in normalized frequency, `0 ≤ γ ≤ 1`.
    pub cutoff: f64,
    /// Butterworth order `n`.
    pub order: u32,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            kind: FilterKind::Butterworth,
            cutoff: 0.5,
            order: 4,
        }
    }
}

impl FilterSpec {
    pub fn butterworth(cutoff: f64, order: u32) -> Self {
        Self {
            kind: FilterKind::Butterworth,
            cutoff,
            order,
        }
    }

    pub fn ideal(cutoff: f64) -> Self {
        Self {
            kind: FilterKind::Ideal,
            cutoff,
            order: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::Config(format!("cutoff {} outside [0, 1]", self.cutoff)));
        }
        if self.kind == FilterKind::Butterworth {
            if self.cutoff == 0.0 {
                return Err(Error::Config("a Butterworth filter needs a positive cutoff".into()));
            }
            if self.order == 0 {
                return Err(Error::Config("Butterworth order must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Response at normalized radius `r`.
    pub fn response(&self, r: f64) -> f64 {
        match self.kind {
            FilterKind::Butterworth => 1.0 / (1.0 + (r / self.cutoff).powi(2 * self.order as i32)),
            FilterKind::Ideal => {
                if r <= self.cutoff {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Signed frequency of FFT bin `k` on an `n`-point axis, divided by the
/// largest representable frequency on that axis.
fn normalized_frequency(k: usize, n: usize) -> f64 {
    let half = n / 2;
    if half == 0 {
        return 0.0;
    }
    let f = if k <= half { k as f64 } else { k as f64 - n as f64 };
    f / half as f64
}

/// Normalized radius of FFT bin `(ky, kx)` (standard, unshifted layout).
pub fn bin_radius(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let fy = normalized_frequency(ky, h);
    let fx = normalized_frequency(kx, w);
    (fy * fy + fx * fx).sqrt() / std::f64::consts::SQRT_2
}

/// Response on the unshifted FFT layout used by [`mix_latents`].
pub fn filter_response_unshifted(spec: &FilterSpec, h: usize, w: usize) -> Result<Tensor> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("filter grid must be non-empty".into()));
    }
    Ok(Tensor::from_fn([h, w], |i| spec.response(bin_radius(i[0], i[1], h, w))))
}

/// Response with zero frequency at the grid center (`fftshift` layout).
pub fn filter_response(spec: &FilterSpec, h: usize, w: usize) -> Result<Tensor> {
    let raw = filter_response_unshifted(spec, h, w)?;
    Ok(Tensor::from_fn([h, w], |i| {
        let ky = (i[0] + h.div_ceil(2)) % h;
        let kx = (i[1] + w.div_ceil(2)) % w;
        raw.at(&[ky, kx])
    }))
}

/// Cached forward and inverse plans for one plane size.
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn run(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        row.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
    }

    /// Unnormalized forward transform of a real row-major plane.
    pub fn forward(&self, plane: &[f64]) -> Vec<Complex64> {
        assert_eq!(plane.len(), self.h * self.w);
        let mut data: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.run(&mut data, &self.row_fwd, &self.col_fwd);
        data
    }

    /// Inverse transform including the `1/(h·w)` normalization.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut data = spectrum.to_vec();
        self.run(&mut data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.h * self.w) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
        data
    }
}

/// Largest imaginary part tolerated when returning to the real domain.
const IMAG_TOLERANCE: f64 = 1e-6;

/// `IFFT2(FFT2(z_opt)·H + FFT2(z_orig)·(1 − H))` per frame and channel.
pub fn mix_latents(z_opt: &LatentVideo, z_orig: &LatentVideo, spec: &FilterSpec) -> Result<LatentVideo> {
    z_opt.validate()?;
    z_orig.validate()?;
    if z_opt.data.shape() != z_orig.data.shape() {
        return Err(Error::Shape(format!(
            "cannot mix latents of shapes {:?} and {:?}",
            z_opt.data.shape(),
            z_orig.data.shape()
        )));
    }
    if z_opt.sigma != z_orig.sigma {
        return Err(Error::Invalid(format!(
            "cannot mix latents at noise levels {} and {}",
            z_opt.sigma, z_orig.sigma
        )));
    }
    let s = z_opt.shape();
    let (h, w) = (s.height, s.width);
    let response = filter_response_unshifted(spec, h, w)?;
    let fft = Fft2::new(h, w);
    let mut out = Vec::with_capacity(z_opt.data.len());
    let scale = z_opt
        .data
        .data()
        .iter()
        .chain(z_orig.data.data())
        .fold(1.0f64, |m, x| m.max(x.abs()));
    for (a, b) in z_opt
        .data
        .data()
        .chunks_exact(h * w)
        .zip(z_orig.data.data().chunks_exact(h * w))
    {
        let fa = fft.forward(a);
        let fb = fft.forward(b);
        let blended: Vec<Complex64> = fa
            .iter()
            .zip(&fb)
            .zip(response.data())
            .map(|((x, y), &hh)| x * hh + y * (1.0 - hh))
            .collect();
        for c in fft.inverse(&blended) {
            if c.im.abs() > IMAG_TOLERANCE * scale {
                return Err(Error::NonFinite(format!(
                    "mixed latent has imaginary residue {:.3e}",
                    c.im
                )));
            }
            out.push(c.re);
        }
    }
    Ok(z_orig.with_data(Tensor::new(z_orig.data.shape().to_vec(), out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;
    use proptest::prelude::*;

    /// O(n²) reference DFT of a real plane.
    fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        acc += Complex64::from_polar(plane[y * w + x], phase);
                    }
                }
                out[ky * w + kx] = acc;
            }
        }
        out
    }

    fn latent(seed: u64, shape: LatentShape) -> LatentVideo {
        LatentVideo::noise(shape, 1.0, Tensor::zeros([shape.channels, shape.height, shape.width]), seed).unwrap()
    }

    fn shape(h: usize, w: usize) -> LatentShape {
        LatentShape {
            frames: 2,
            channels: 2,
            height: h,
            width: w,
        }
    }

    #[test]
    fn butterworth_hand_values() {
        let b = FilterSpec::butterworth(0.5, 4);
        assert_eq!(b.response(0.0), 1.0);
        assert!((b.response(0.5) - 0.5).abs() < 1e-15);
        assert!((b.response(1.0) - 1.0 / 257.0).abs() < 1e-15);
        assert!((b.response(1.0) - 0.0038911).abs() < 1e-7);
        assert_eq!(FilterSpec::ideal(0.3).response(0.0), 1.0);
        assert_eq!(FilterSpec::ideal(0.0).response(0.0), 1.0);
        assert!(FilterSpec::butterworth(0.0, 4).validate().is_err());
        assert!(FilterSpec::ideal(0.0).validate().is_ok());
        assert!(FilterSpec::butterworth(1.5, 4).validate().is_err());
    }

    #[test]
    fn centered_response_peaks_at_the_center() {
        for (h, w) in [(8, 8), (5, 7), (1, 4)] {
            let r = filter_response(&FilterSpec::default(), h, w).unwrap();
            assert_eq!(r.at(&[h / 2, w / 2]), 1.0);
        }
        let r = filter_response(&FilterSpec::default(), 8, 8).unwrap();
        assert!((r.at(&[0, 0]) - 1.0 / 257.0).abs() < 1e-15);
    }

    #[test]
    fn fft_matches_naive_dft() {
        let x: Vec<f64> = (0..6 * 5).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let fast = Fft2::new(6, 5).forward(&x);
        let slow = naive_dft(&x, 6, 5);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn ideal_filter_blocks_a_high_frequency_sinusoid() {
        // a real sinusoid on bins ±(8, 5) of a 16×16 grid, radius ≈ 0.83
        let (h, w) = (16usize, 16usize);
        let (ky, kx) = (8usize, 5usize);
        let r = bin_radius(ky, kx, h, w);
        assert!(r > 0.5);
        let plane: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                (2.0 * std::f64::consts::PI * (ky as f64 * y / h as f64 + kx as f64 * x / w as f64)).cos()
            })
            .collect();
        let s = LatentShape {
            frames: 1,
            channels: 1,
            height: h,
            width: w,
        };
        let opt = LatentVideo::new(Tensor::new(s.dims(), plane), 1.0, Tensor::zeros([1, h, w])).unwrap();
        let orig = opt.with_data(Tensor::zeros(s.dims()));
        let mixed = mix_latents(&opt, &orig, &FilterSpec::ideal(0.5)).unwrap();
        assert!(mixed.data.data().iter().all(|v| v.abs() < 1e-5));
        let kept = mix_latents(&opt, &orig, &FilterSpec::ideal(1.0)).unwrap();
        assert!(kept.data.max_abs_diff(&opt.data) < 1e-6);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = latent(1, shape(4, 4));
        let b = latent(2, shape(4, 6));
        assert!(mix_latents(&a, &b, &FilterSpec::default()).is_err());
        let mut c = latent(2, shape(4, 4));
        c.sigma = 2.0;
        assert!(mix_latents(&a, &c, &FilterSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn mixing_a_latent_with_itself_is_the_identity(seed in 0u64..64, h in 1usize..9, w in 1usize..9, g in 0.05f64..1.0) {
            let a = latent(seed, shape(h, w));
            let m = mix_latents(&a, &a, &FilterSpec::butterworth(g, 4)).unwrap();
            prop_assert!(m.data.max_abs_diff(&a.data) < 1e-6);
        }

        #[test]
        fn mixing_is_linear(seed in 0u64..64, k in -5.0f64..5.0) {
            let a = latent(seed, shape(6, 8));
            let b = latent(seed + 1000, shape(6, 8));
            let spec = FilterSpec::default();
            let m = mix_latents(&a, &b, &spec).unwrap();
            let ka = a.with_data(a.data.map(|x| k * x));
            let kb = b.with_data(b.data.map(|x| k * x));
            let km = mix_latents(&ka, &kb, &spec).unwrap();
            prop_assert!(km.data.max_abs_diff(&m.data.map(|x| k * x)) < 1e-6);
        }

        #[test]
        fn fft_round_trip(seed in 0u64..64, h in 1usize..12, w in 1usize..12) {
            let a = latent(seed, shape(h, w));
            let fft = Fft2::new(h, w);
            for plane in a.data.data().chunks(h * w) {
                let back = fft.inverse(&fft.forward(plane));
                for (x, y) in plane.iter().zip(&back) {
                    prop_assert!((x - y.re).abs() < 1e-6 && y.im.abs() < 1e-6);
                }
            }
        }

        #[test]
        fn ideal_bands_come_from_the_right_input(seed in 0u64..64, g in 0.0f64..1.0) {
            let (h, w) = (8, 6);
            let a = latent(seed, shape(h, w));
            let b = latent(seed + 500, shape(h, w));
            let m = mix_latents(&a, &b, &FilterSpec::ideal(g)).unwrap();
            let fft = Fft2::new(h, w);
            for ((pa, pb), pm) in a.data.data().chunks(h * w).zip(b.data.data().chunks(h * w)).zip(m.data.data().chunks(h * w)) {
                let (fa, fb, fm) = (fft.forward(pa), fft.forward(pb), fft.forward(pm));
                for ky in 0..h {
                    for kx in 0..w {
                        let i = ky * w + kx;
                        let src = if bin_radius(ky, kx, h, w) <= g { fa[i] } else { fb[i] };
                        prop_assert!((fm[i] - src).norm() < 1e-5);
                    }
                }
            }
        }

        #[test]
        fn bin_magnitude_is_a_convex_blend(seed in 0u64..32) {
            let (h, w) = (6, 6);
            let a = latent(seed, shape(h, w));
            let b = latent(seed + 77, shape(h, w));
            let spec = FilterSpec::default();
            let m = mix_latents(&a, &b, &spec).unwrap();
            let resp = filter_response_unshifted(&spec, h, w).unwrap();
            let fft = Fft2::new(h, w);
            let (fa, fb, fm) = (fft.forward(&a.data.data()[..36]), fft.forward(&b.data.data()[..36]), fft.forward(&m.data.data()[..36]));
            for i in 0..36 {
                let hh = resp.data()[i];
                prop_assert!(fm[i].norm() <= hh * fa[i].norm() + (1.0 - hh) * fb[i].norm() + 1e-9);
            }
        }
    }
}
