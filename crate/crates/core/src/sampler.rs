//! Deterministic Euler sampling over a Karras σ schedule, with latent
//! optimization and frequency mixing interleaved at selected timesteps.
//!
//! Sampler step `i` (1-based) is timestep `t = T − i + 1`, so `t = T` is the
//! first, noisiest step.

use serde::{Deserialize, Serialize};

use crate::backend::DenoiserBackend;
use crate::baselines::freetraj_noise_init;
use crate::error::{Error, Result};
use crate::guidance::{optimize_latent, GuidanceConfig, GuidanceLossReport, GuidanceTarget};
use crate::latent::{LatentShape, LatentVideo};
use crate::spectral::{mix_latents, FilterSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    /// 50 steps over the toy-backend noise range.
    fn default() -> Self {
        Self {
            steps: 50,
            sigma_min: 0.02,
            sigma_max: 10.0,
            rho: 7.0,
        }
    }
}

/// Noise levels `σ_1 > … > σ_T` followed by a terminal 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub sigmas: Vec<f64>,
    pub rho: f64,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// Timestep label of 0-based step `i`.
    pub fn timestep(&self, i: usize) -> usize {
        self.steps() - i
    }
}

pub fn make_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::Config(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut sigmas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                sigma_max
            } else {
                (a + i as f64 / (steps - 1) as f64 * (b - a)).powf(rho)
            }
        })
        .collect();
    sigmas.push(0.0);
    Ok(Schedule { sigmas, rho })
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

/// `z + (σ_next − σ)·(z − x̂)/σ`.
pub fn euler_step(latent: &LatentVideo, denoised: &Tensor, sigma_next: f64) -> Result<LatentVideo> {
    let sigma = latent.sigma;
    if sigma <= 0.0 {
        return Err(Error::Invalid("Euler step from noise level 0".into()));
    }
    if denoised.shape() != latent.data.shape() {
        return Err(Error::Shape("denoised estimate does not match latent".into()));
    }
    let k = (sigma_next - sigma) / sigma;
    let data = latent.data.zip_map(denoised, |z, x| z + k * (z - x));
    let mut next = latent.with_data(data);
    next.sigma = sigma_next;
    Ok(next)
}

/// How the initial latent is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInit {
    #[default]
    Gaussian,
    /// Copy frame-1 noise along each trajectory.
    Freetraj,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateOptions {
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub filter: FilterSpec,
    pub noise_init: NoiseInit,
    /// Keep the latent after every step.
    pub keep_latents: bool,
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// The final sample, `N × C × h × w`.
    pub video: Tensor,
    /// One report per optimized timestep, in sampling order.
    pub reports: Vec<GuidanceLossReport>,
    /// Latent after each step when requested.
    pub latents: Vec<Tensor>,
    pub schedule: Schedule,
    /// Notes from noise initialization (such as box overlaps).
    pub diagnostics: Vec<String>,
}

fn initial_noise(
    shape: LatentShape,
    conditioning: &Tensor,
    sigma_max: f64,
    seed: u64,
) -> Result<LatentVideo> {
    LatentVideo::noise(shape, sigma_max, conditioning.clone(), seed)
}

fn check_finite(latent: &LatentVideo, step: usize, t: usize, what: &str) -> Result<()> {
    if latent.data.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} at step {} (t = {t}, sigma = {})",
            step + 1,
            latent.sigma
        )))
    }
}

/// The plain Euler sampler with no guidance of any kind.
pub fn euler_sample(
    backend: &dyn DenoiserBackend,
    conditioning: &Tensor,
    schedule: &Schedule,
    seed: u64,
) -> Result<Tensor> {
    let mut z = initial_noise(backend.latent_shape(), conditioning, schedule.sigmas[0], seed)?;
    for i in 0..schedule.steps() {
        let x = backend.predict_clean(&z)?;
        z = euler_step(&z, &x, schedule.sigmas[i + 1])?;
    }
    Ok(z.data)
}

/// The unguided latent entering the step labeled `timestep`.
pub fn latent_at_timestep(
    backend: &dyn DenoiserBackend,
    conditioning: &Tensor,
    schedule: &Schedule,
    seed: u64,
    timestep: usize,
) -> Result<LatentVideo> {
    if timestep == 0 || timestep > schedule.steps() {
        return Err(Error::Config(format!("timestep {timestep} outside 1..={}", schedule.steps())));
    }
    let mut z = initial_noise(backend.latent_shape(), conditioning, schedule.sigmas[0], seed)?;
    for i in 0..schedule.steps() - timestep {
        let x = backend.predict_clean(&z)?;
        z = euler_step(&z, &x, schedule.sigmas[i + 1])?;
    }
    Ok(z)
}

/// Samples a video, optimizing the latent toward `targets` at the configured
/// timesteps and blending each optimized latent with its pre-optimization
/// version before the denoising step.
pub fn generate(
    backend: &dyn DenoiserBackend,
    conditioning: &Tensor,
    targets: &[GuidanceTarget],
    options: &GenerateOptions,
    seed: u64,
) -> Result<Generation> {
    let schedule = options.schedule.build()?;
    let guided = !targets.is_empty() && !options.guidance.timesteps.is_empty();
    if guided {
        options.guidance.validate(schedule.steps())?;
        options.filter.validate()?;
    }
    let mut z = initial_noise(backend.latent_shape(), conditioning, schedule.sigmas[0], seed)?;
    let mut diagnostics = Vec::new();
    if options.noise_init == NoiseInit::Freetraj && !targets.is_empty() {
        let boxes: Vec<_> = targets.iter().map(|t| t.boxes.clone()).collect();
        let (init, notes) = freetraj_noise_init(&z, &boxes)?;
        z = init;
        diagnostics = notes;
    }
    let mut reports = Vec::new();
    let mut latents = Vec::new();
    for i in 0..schedule.steps() {
        let t = schedule.timestep(i);
        if guided && options.guidance.timesteps.contains(&t) {
            let (optimized, mut report) = optimize_latent(backend, &z, targets, &options.guidance)
                .map_err(|e| Error::Invalid(format!("guidance at step {} (t = {t}): {e}", i + 1)))?;
            report.timestep = Some(t);
            reports.push(report);
            z = mix_latents(&optimized, &z, &options.filter)?;
            check_finite(&z, i, t, "mixed latent")?;
        }
        let x = backend.predict_clean(&z)?;
        z = euler_step(&z, &x, schedule.sigmas[i + 1])?;
        check_finite(&z, i, t, "latent")?;
        if options.keep_latents {
            latents.push(z.data.clone());
        }
    }
    Ok(Generation {
        video: z.data,
        reports,
        latents,
        schedule,
        diagnostics,
    })
}
