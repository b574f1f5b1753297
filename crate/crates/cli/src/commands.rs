//! The four verbs and the artifacts each one writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use trajguide_core::backend::run_guidance_pass;
use trajguide_core::grid_io::{read_tensor, write_tensor};
use trajguide_core::guidance::GuidanceLossReport;
use trajguide_core::metrics::{blob_center, cross_frame_cosine, objmc, patch_track, pca_diagnostic, TrackedTrajectory};
use trajguide_core::sampler::latent_at_timestep;
use trajguide_core::{
    generate, FeatureSource, FilterSpec, Generation, LatentBox, LayerKey, LayerKind, Stage, Tensor, Weighting,
};

use crate::render;
use crate::spec::{prepare, BackendSpec, LayerSet, Prepared, RunSpec, SchemaError, Tracker};

const OVERLAY_SCALE: usize = 4;

/// A finished sampling run and its motion measurements.
pub struct RunOutcome {
    pub generation: Generation,
    pub tracked: Vec<TrackedTrajectory>,
    pub target: Vec<TrackedTrajectory>,
    pub objmc: Option<f64>,
}

impl RunOutcome {
    fn mean_loss(&self, pick: impl Fn(&GuidanceLossReport) -> f64) -> Option<f64> {
        let r = &self.generation.reports;
        (!r.is_empty()).then(|| r.iter().map(pick).sum::<f64>() / r.len() as f64)
    }

    /// Share of optimized timesteps whose loss at least halved.
    pub fn halved_fraction(&self) -> Option<f64> {
        let r = &self.generation.reports;
        (!r.is_empty()).then(|| r.iter().filter(|r| r.last() <= 0.5 * r.initial()).count() as f64 / r.len() as f64)
    }
}

/// Channel 0 of every frame, as `[N, h, w]`.
fn channel0(video: &Tensor) -> Tensor {
    let s = video.shape();
    let hw = s[2] * s[3];
    let data = (0..s[0])
        .flat_map(|n| video.data()[n * s[1] * hw..n * s[1] * hw + hw].iter().copied())
        .collect();
    Tensor::new([s[0], s[2], s[3]], data)
}

/// Tracks the subject in `video` for every trajectory and scores it.
pub fn evaluate(prepared: &Prepared, video: &Tensor) -> Result<(Vec<TrackedTrajectory>, Vec<TrackedTrajectory>, Option<f64>)> {
    let spec = &prepared.spec;
    let [h, w] = spec.latent_hw;
    let frames = channel0(video);
    let tracker = match (spec.eval.tracker, &spec.backend) {
        (Tracker::Auto, BackendSpec::Blob) => Tracker::BlobCenter,
        (Tracker::Auto, _) => Tracker::Patch,
        (t, _) => t,
    };
    let mut tracked = Vec::new();
    let mut target = Vec::new();
    for boxes in &prepared.boxes {
        target.push(TrackedTrajectory::all_valid(boxes.iter().map(LatentBox::center).collect()));
        tracked.push(match tracker {
            Tracker::BlobCenter => TrackedTrajectory::all_valid(
                (0..spec.num_frames)
                    .map(|n| blob_center(&frames.data()[n * h * w..(n + 1) * h * w], h, w))
                    .collect::<Result<_, _>>()?,
            ),
            _ => patch_track(&frames, boxes[0].center(), spec.eval.patch_radius, spec.eval.search_radius)?,
        });
    }
    let (mut tracked, mut target, hw) = (tracked, target, (h, w));
    let hw = match spec.eval.pre_resize {
        Some([rh, rw]) => {
            tracked = tracked.iter().map(|t| t.resized(hw, (rh, rw))).collect();
            target = target.iter().map(|t| t.resized(hw, (rh, rw))).collect();
            (rh, rw)
        }
        None => hw,
    };
    let score = if target.is_empty() {
        None
    } else {
        Some(objmc(&tracked, &target, Some(hw))?)
    };
    Ok((tracked, target, score))
}

pub fn run(prepared: &Prepared) -> Result<RunOutcome> {
    let generation = generate(
        prepared.backend.as_ref(),
        &prepared.conditioning,
        &prepared.targets,
        &prepared.options,
        prepared.spec.seed,
    )?;
    let (tracked, target, objmc) = evaluate(prepared, &generation.video)?;
    Ok(RunOutcome {
        generation,
        tracked,
        target,
        objmc,
    })
}

/// The spec as echoed into metadata: every effective value, no output path.
fn echoed(spec: &RunSpec) -> RunSpec {
    RunSpec {
        outputs: None,
        ..spec.clone()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn points(t: &TrackedTrajectory) -> Vec<[f64; 2]> {
    t.points.iter().map(|p| [p.x, p.y]).collect()
}

/// Writes frames, overlays, the final latent, the loss table and metadata.
pub fn write_run(dir: &Path, prepared: &Prepared, outcome: &RunOutcome) -> Result<()> {
    let g = &outcome.generation;
    let spec = &prepared.spec;
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("overlays"))?;
    let range = render::channel0_range(&g.video);
    for n in 0..spec.num_frames {
        render::write_frame(&dir.join(format!("frames/frame_{n:03}.png")), &g.video, n, range)?;
        render::write_overlay(
            &dir.join(format!("overlays/frame_{n:03}.png")),
            &g.video,
            n,
            range,
            &prepared.boxes,
            &outcome.tracked,
            OVERLAY_SCALE,
        )?;
    }
    write_tensor(&dir.join("video.bin"), &g.video, spec.seed)?;
    if !g.latents.is_empty() {
        fs::create_dir_all(dir.join("latents"))?;
        for (i, z) in g.latents.iter().enumerate() {
            write_tensor(&dir.join(format!("latents/step_{:03}.bin", i + 1)), z, spec.seed)?;
        }
    }

    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    w.write_record(["timestep", "iteration", "loss"])?;
    for r in &g.reports {
        for (i, l) in r.losses.iter().enumerate() {
            w.write_record([r.timestep.unwrap_or(0).to_string(), i.to_string(), format!("{l:.12e}")])?;
        }
    }
    w.flush()?;

    let backend = prepared.backend.as_ref();
    let reports: Vec<_> = g
        .reports
        .iter()
        .map(|r| json!({"timestep": r.timestep, "initial": r.initial(), "final": r.last(), "ratio": r.reduction_ratio()}))
        .collect();
    let meta = json!({
        "verb": "generate",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "resolved_spec": echoed(spec),
        "guidance": if spec.guided() { "enabled" } else { "disabled" },
        "backend": {
            "name": backend.name(),
            "capabilities": backend.capabilities(),
            "layers": backend.layers(),
            "resolved_guidance_layers": spec.guidance.resolved_layers(),
        },
        "schedule_sigmas": g.schedule.sigmas,
        "latent_boxes": prepared.boxes,
        "png_range": [range.0, range.1],
        "objmc_latent_px": outcome.objmc,
        "tracked": outcome.tracked.iter().map(|t| json!({"points": points(t), "valid": t.valid})).collect::<Vec<_>>(),
        "target": outcome.target.iter().map(points).collect::<Vec<_>>(),
        "loss_per_timestep": reports,
        "halved_fraction": outcome.halved_fraction(),
        "diagnostics": g.diagnostics,
    });
    write_json(&dir.join("metadata.json"), &meta)
}

fn out_dir(spec: &RunSpec, flag: Option<&Path>) -> Result<PathBuf, SchemaError> {
    flag.map(Path::to_path_buf)
        .or_else(|| spec.outputs.clone())
        .ok_or_else(|| SchemaError("no output directory: pass --out or set `outputs`".into()))
}

/// Loads the spec, applies overrides and validates it.
pub fn load(spec_path: &Path, seed: Option<u64>, debug_latents: bool) -> Result<Prepared, SchemaError> {
    let mut spec = RunSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.debug.latents |= debug_latents;
    prepare(spec)
}

pub fn cmd_generate(prepared: &Prepared, out: Option<&Path>) -> Result<RunOutcome> {
    let dir = out_dir(&prepared.spec, out)?;
    let outcome = run(prepared)?;
    write_run(&dir, prepared, &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    FeatureSource,
    Layers,
    Gamma,
    Lr,
    Timesteps,
    Weighting,
}

impl Axis {
    fn as_str(self) -> &'static str {
        match self {
            Axis::FeatureSource => "feature_source",
            Axis::Layers => "layers",
            Axis::Gamma => "gamma",
            Axis::Lr => "lr",
            Axis::Timesteps => "timesteps",
            Axis::Weighting => "weighting",
        }
    }
}

/// Filter used for a swept cutoff: the ideal low-pass at the endpoints (all
/// optimized frequencies discarded except DC, or all kept) and the
/// configured Butterworth in between.
pub fn gamma_filter(gamma: f64, base: &FilterSpec) -> FilterSpec {
    if gamma <= 0.0 || gamma >= 1.0 {
        FilterSpec::ideal(gamma.clamp(0.0, 1.0))
    } else {
        FilterSpec { cutoff: gamma, ..*base }
    }
}

fn layer_set(name: &str, stage: Stage, indices: &[u8]) -> LayerSet {
    LayerSet {
        name: name.into(),
        layers: indices.iter().map(|&i| LayerKey::new(stage, LayerKind::SpatialAttn, i)).collect(),
    }
}

fn default_layer_sets() -> Vec<LayerSet> {
    vec![
        layer_set("M1", Stage::Mid, &[1]),
        layer_set("M2", Stage::Mid, &[2]),
        layer_set("M3", Stage::Mid, &[3]),
        layer_set("M2-3", Stage::Mid, &[2, 3]),
        layer_set("M1-3", Stage::Mid, &[1, 2, 3]),
        layer_set("B2-3", Stage::Bottom, &[2, 3]),
        layer_set("T2-3", Stage::Top, &[2, 3]),
    ]
}

/// Single timesteps and windows drawn from the configured window.
fn default_timestep_sets(window: &[usize]) -> Vec<Vec<usize>> {
    let mut w = window.to_vec();
    w.sort_unstable_by(|a, b| b.cmp(a));
    w.dedup();
    if w.is_empty() {
        return Vec::new();
    }
    let half = w.len().div_ceil(2);
    let candidates = [
        vec![w[0]],
        vec![w[w.len() / 2]],
        vec![w[w.len() - 1]],
        w.clone(),
        w[..half].to_vec(),
        w[half..].to_vec(),
    ];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for c in candidates {
        if !c.is_empty() && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn label_timesteps(ts: &[usize]) -> String {
    match ts {
        [t] => t.to_string(),
        [first, .., last] if ts.windows(2).all(|p| p[0] == p[1] + 1) => format!("{first}..{last}"),
        _ => ts.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    }
}

/// `(label, spec)` for every configuration on `axis`.
pub fn sweep_variants(base: &RunSpec, axis: Axis) -> Vec<(String, RunSpec)> {
    let with = |f: &dyn Fn(&mut RunSpec)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };
    let sw = &base.sweep;
    match axis {
        Axis::Gamma => sw
            .gamma
            .clone()
            .unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75, 1.0])
            .into_iter()
            .map(|g| (format!("{g}"), with(&|s| s.filter = gamma_filter(g, &base.filter))))
            .collect(),
        Axis::Lr => sw
            .lr
            .clone()
            .unwrap_or_else(|| vec![0.05, 0.21, 0.5, 1.0, 2.0])
            .into_iter()
            .map(|lr| (format!("{lr}"), with(&|s| s.guidance.learning_rate = lr)))
            .collect(),
        Axis::FeatureSource => sw
            .feature_source
            .clone()
            .unwrap_or_else(|| FeatureSource::ALL.to_vec())
            .into_iter()
            .map(|f| (f.as_str().to_string(), with(&|s| s.guidance.feature_source = f)))
            .collect(),
        Axis::Weighting => sw
            .weighting
            .clone()
            .unwrap_or_else(|| vec![Weighting::Gaussian, Weighting::Identity])
            .into_iter()
            .map(|wt| {
                let name = match wt {
                    Weighting::Gaussian => "gaussian",
                    Weighting::Identity => "identity",
                };
                (name.to_string(), with(&|s| s.guidance.weighting = wt))
            })
            .collect(),
        Axis::Layers => sw
            .layers
            .clone()
            .unwrap_or_else(default_layer_sets)
            .into_iter()
            .map(|set| (set.name.clone(), with(&|s| s.guidance.layers = set.layers.clone())))
            .collect(),
        Axis::Timesteps => sw
            .timesteps
            .clone()
            .unwrap_or_else(|| default_timestep_sets(&base.guidance.timesteps))
            .into_iter()
            .map(|ts| (label_timesteps(&ts), with(&|s| s.guidance.timesteps = ts.clone())))
            .collect(),
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub axis: String,
    pub value: String,
    pub status: String,
    pub objmc: Option<f64>,
    pub unguided_objmc: Option<f64>,
    pub loss_initial_mean: Option<f64>,
    pub loss_final_mean: Option<f64>,
    pub halved_fraction: Option<f64>,
    pub message: String,
    pub config: String,
}

fn run_variant(dir: &Path, spec: RunSpec) -> Result<RunOutcome> {
    let prepared = prepare(spec).map_err(|e| anyhow!(e))?;
    let outcome = run(&prepared)?;
    write_run(dir, &prepared, &outcome)?;
    Ok(outcome)
}

fn config_json(spec: &RunSpec) -> String {
    json!({
        "seed": spec.seed,
        "schedule": spec.schedule,
        "guidance": spec.guidance,
        "filter": spec.filter,
        "noise_init": spec.noise_init,
    })
    .to_string()
}

/// Runs the unguided reference and every configuration on `axis`, writing
/// `sweep.csv` and one artifact directory per run. Individual failures are
/// recorded and the sweep continues.
pub fn cmd_ablate(prepared: &Prepared, axis: Axis, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let dir = out_dir(&prepared.spec, out)?;
    let base = echoed(&prepared.spec);
    let mut configs = vec![("unguided".to_string(), {
        let mut s = base.clone();
        s.guidance.timesteps.clear();
        s
    })];
    configs.extend(sweep_variants(&base, axis));
    let jobs: Vec<(String, String, RunSpec)> = configs
        .into_iter()
        .enumerate()
        .map(|(i, (label, spec))| {
            let safe: String = label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            (format!("{i:02}_{}_{safe}", axis.as_str()), label, spec)
        })
        .collect();
    fs::create_dir_all(dir.join("runs"))?;
    let execute = |(id, _, spec): &(String, String, RunSpec)| run_variant(&dir.join("runs").join(id), spec.clone());
    let results: Vec<Result<RunOutcome>> = if prepared.spec.sweep.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|j| scope.spawn(move || execute(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("run panicked"))))
                .collect()
        })
    } else {
        jobs.iter().map(execute).collect()
    };

    let unguided = results[0].as_ref().ok().and_then(|o| o.objmc);
    let rows: Vec<SweepRow> = jobs
        .iter()
        .zip(&results)
        .map(|((id, label, spec), result)| {
            let base_row = SweepRow {
                run_id: id.clone(),
                axis: if label == "unguided" { "reference".into() } else { axis.as_str().into() },
                value: label.clone(),
                status: "ok".into(),
                objmc: None,
                unguided_objmc: unguided,
                loss_initial_mean: None,
                loss_final_mean: None,
                halved_fraction: None,
                message: String::new(),
                config: config_json(spec),
            };
            match result {
                Ok(o) => SweepRow {
                    objmc: o.objmc,
                    loss_initial_mean: o.mean_loss(GuidanceLossReport::initial),
                    loss_final_mean: o.mean_loss(GuidanceLossReport::last),
                    halved_fraction: o.halved_fraction(),
                    ..base_row
                },
                Err(e) => SweepRow {
                    status: "error".into(),
                    message: format!("{e:#}"),
                    ..base_row
                },
            }
        })
        .collect();
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct SimilarityRow {
    pub mode: String,
    pub layer: String,
    pub mean_cosine: f64,
}

/// Feature passes at one timestep in aligned and raw modes: PCA images per
/// frame, mode and layer, and the cross-frame similarity table.
pub fn cmd_diagnose(prepared: &Prepared, out: Option<&Path>) -> Result<Vec<SimilarityRow>> {
    let dir = out_dir(&prepared.spec, out)?;
    let spec = &prepared.spec;
    let backend = prepared.backend.as_ref();
    let schedule = spec.schedule.build()?;
    let t = spec
        .diagnose
        .timestep
        .or_else(|| spec.guidance.timesteps.iter().copied().min())
        .unwrap_or(schedule.steps().div_ceil(2));
    if t == 0 || t > schedule.steps() {
        bail!(SchemaError(format!("diagnose timestep {t} outside 1..={}", schedule.steps())));
    }
    let latent = latent_at_timestep(backend, &prepared.conditioning, &schedule, spec.seed, t)?;

    let registry = backend.layers();
    let keys_of = |kind: LayerKind| -> Vec<LayerKey> {
        let mut out = Vec::new();
        for k in &spec.guidance.layers {
            let key = LayerKey::new(k.stage, kind, k.index);
            if registry.contains(&key) && !out.contains(&key) {
                out.push(key);
            }
        }
        out
    };
    let spatial = keys_of(LayerKind::SpatialAttn);
    if spatial.is_empty() {
        bail!("none of the configured layers has a spatial-attention site on {}", backend.name());
    }
    let upsample = keys_of(LayerKind::UpsampleBlock);
    let [h, w] = spec.latent_hw;
    let boxes = prepared.boxes.first().cloned().unwrap_or_else(|| {
        (0..spec.num_frames)
            .map(|frame| LatentBox {
                frame,
                top: 0,
                left: 0,
                height: h,
                width: w,
            })
            .collect()
    });

    let mut passes = vec![
        ("aligned", run_guidance_pass(backend, &latent, &spatial, true)?),
        ("raw", run_guidance_pass(backend, &latent, &spatial, false)?),
    ];
    if !upsample.is_empty() {
        passes.push(("upsample", run_guidance_pass(backend, &latent, &upsample, false)?));
    }

    let mut rows = Vec::new();
    let mut pca_meta = Vec::new();
    for (mode, feats) in &passes {
        let mut sum = 0.0;
        for f in feats {
            let c = cross_frame_cosine(f, &boxes)?;
            sum += c;
            rows.push(SimilarityRow {
                mode: mode.to_string(),
                layer: f.source.to_string(),
                mean_cosine: c,
            });
            if *mode == "upsample" {
                continue;
            }
            let pca = pca_diagnostic(f)?;
            let sub = dir.join("pca").join(mode).join(f.source.to_string());
            fs::create_dir_all(&sub)?;
            for n in 0..spec.num_frames {
                render::write_projection(&sub.join(format!("frame_{n:03}.png")), &pca.projections, n)?;
            }
            pca_meta.push(json!({
                "mode": mode,
                "layer": f.source,
                "rank": pca.rank,
                "explained_variance_ratio": pca.explained_variance_ratio,
            }));
        }
        rows.push(SimilarityRow {
            mode: mode.to_string(),
            layer: "mean".into(),
            mean_cosine: sum / feats.len() as f64,
        });
    }

    let mut wtr = csv::Writer::from_path(dir.join("similarity.csv"))?;
    for r in &rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    write_json(
        &dir.join("metadata.json"),
        &json!({
            "verb": "diagnose",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "resolved_spec": echoed(spec),
            "timestep": t,
            "sigma": latent.sigma,
            "boxes": boxes,
            "pca": pca_meta,
            "similarity": rows,
        }),
    )?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct ObjmcRow {
    pub trajectory: usize,
    pub objmc: f64,
}

/// Scores a dumped video against the spec's trajectories.
pub fn cmd_eval_objmc(prepared: &Prepared, video: &Path, out: Option<&Path>) -> Result<f64> {
    let (tensor, _) = read_tensor(video).with_context(|| format!("reading {}", video.display()))?;
    let want = prepared.spec.latent_shape().dims();
    if tensor.shape() != want {
        bail!("video has shape {:?}, spec expects {:?}", tensor.shape(), want);
    }
    if prepared.boxes.is_empty() {
        bail!(SchemaError("eval-objmc needs at least one trajectory".into()));
    }
    let (tracked, target, score) = evaluate(prepared, &tensor)?;
    let score = score.expect("trajectories are present");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let hw = prepared.spec.eval.pre_resize.map(|[a, b]| (a, b)).unwrap_or((prepared.spec.latent_hw[0], prepared.spec.latent_hw[1]));
        let mut w = csv::Writer::from_path(dir.join("objmc.csv"))?;
        for (i, (g, t)) in tracked.iter().zip(&target).enumerate() {
            let m = objmc(std::slice::from_ref(g), std::slice::from_ref(t), Some(hw)).unwrap_or(f64::NAN);
            w.serialize(ObjmcRow { trajectory: i, objmc: m })?;
        }
        w.flush()?;
    }
    Ok(score)
}

/// One-line motion summary for the terminal.
pub fn describe(outcome: &RunOutcome) -> String {
    match outcome.objmc {
        Some(m) => format!("objmc {m:.4} latent px"),
        None => "objmc n/a (no trajectories)".into(),
    }
}
