//! Command driver behind the `objcomp` binary.
//!
//! Each command loads a [`SceneConfig`](crate::config::SceneConfig), runs one
//! pipeline and writes its artifacts plus a JSON manifest (see
//! [`manifest_name`]). Exit codes: 0 on success, 1 for configuration problems
//! (bad schema, missing files), 2 when the pipeline itself fails.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attnmask::{make_object_masks, MaskProvenance, ObjectMask};
use crate::compose::{generate, DenoiserRegistry, Init, SceneRequest, StepChecksum};
use crate::config::LoadedConfig;
use crate::denoise::Conditioning;
use crate::error::Error;
use crate::grid::LatentGrid;
use crate::invert::{ddim_invert, null_text_optimize, reconstruct, InversionTrajectory, StepLoss};
use crate::io;
use crate::schedule::NoiseSchedule;

/// Arguments shared by every command.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
}

impl Invocation {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        Self {
            config: config.into(),
            output_dir: None,
        }
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = Some(dir.into());
        self
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Pipeline { stage: &'static str, message: String },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Pipeline { .. } => 2,
        }
    }

    fn config(e: Error) -> Self {
        Failure::Config(e.to_string())
    }

    /// File and config errors stay exit-1 even when raised mid-pipeline.
    fn stage(stage: &'static str) -> impl Fn(Error) -> Failure {
        move |e| match e {
            Error::Config(_) | Error::File { .. } => Failure::Config(e.to_string()),
            _ => Failure::Pipeline {
                stage,
                message: e.to_string(),
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Pipeline { stage, message } => write!(f, "{stage} stage failed: {message}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskEntry {
    pub object: usize,
    pub class: String,
    pub provenance: MaskProvenance,
    pub threshold: Option<f64>,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRecord {
    pub sampling: u64,
    /// Seed behind each object's embedding, `null` for explicit arrays.
    pub embeddings: Vec<Option<u64>>,
}

/// The run manifest, written once at the end of a successful run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_hash: String,
    pub seeds: SeedRecord,
    pub init: String,
    pub initial_checksum: Option<String>,
    pub steps: Vec<StepChecksum>,
    pub final_checksum: Option<String>,
    /// SHA-256 of every other file written by the run.
    pub outputs: BTreeMap<String, String>,
    pub masks: Vec<MaskEntry>,
    pub null_losses: Vec<StepLoss>,
    pub reconstruction_mse: Option<f64>,
    pub timings_ms: BTreeMap<String, f64>,
}

struct Run {
    loaded: LoadedConfig,
    out_dir: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl Run {
    fn start(command: &'static str, inv: &Invocation) -> Result<Self, Failure> {
        let loaded = LoadedConfig::load(&inv.config).map_err(Failure::config)?;
        let out_dir = inv.output_dir.clone().unwrap_or_else(|| loaded.output_dir());
        let cfg = &loaded.config;
        let seeds = SeedRecord {
            sampling: cfg.seed,
            embeddings: cfg
                .objects
                .iter()
                .map(|o| o.embedding.seed())
                .collect::<Result<_, _>>()
                .map_err(Failure::config)?,
        };
        let manifest = RunManifest {
            command,
            config_hash: cfg.hash(),
            seeds,
            init: cfg.init.to_string(),
            initial_checksum: None,
            steps: Vec::new(),
            final_checksum: None,
            outputs: BTreeMap::new(),
            masks: Vec::new(),
            null_losses: Vec::new(),
            reconstruction_mse: None,
            timings_ms: BTreeMap::new(),
        };
        Ok(Self {
            loaded,
            out_dir,
            manifest,
            clock: Instant::now(),
        })
    }

    fn lap(&mut self, name: &str) {
        let ms = self.clock.elapsed().as_secs_f64() * 1e3;
        self.manifest.timings_ms.insert(name.to_string(), ms);
        self.clock = Instant::now();
    }

    fn schedule(&self) -> Result<NoiseSchedule, Failure> {
        self.loaded.config.schedule.build().map_err(Failure::config)
    }

    fn record_output(&mut self, name: &str) -> Result<(), Failure> {
        let path = self.out_dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Failure::config(Error::file(&path, e)))?;
        self.manifest
            .outputs
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    fn finish(mut self) -> Result<RunManifest, Failure> {
        self.lap("write");
        log::info!("{} finished; outputs in {}", self.manifest.command, self.out_dir.display());
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        io::write_atomic(&self.out_dir.join(manifest_name(self.manifest.command)), &json)
            .map_err(Failure::stage("write"))?;
        Ok(self.manifest)
    }
}

/// `manifest.json` for compose, `<command>_manifest.json` otherwise, so all
/// three commands can share one output directory.
pub fn manifest_name(command: &str) -> String {
    if command == "compose" {
        "manifest.json".to_string()
    } else {
        format!("{command}_manifest.json")
    }
}

fn image_latent(loaded: &LoadedConfig) -> Result<Option<LatentGrid>, Failure> {
    loaded
        .init_image()
        .map(|p| io::load_image_latent(&p).map_err(Failure::config))
        .transpose()
}

fn latent_shape(
    loaded: &LoadedConfig,
    image: Option<&LatentGrid>,
) -> Result<(usize, usize, usize), Failure> {
    match (loaded.config.latent, image) {
        (Some(l), Some(z)) if l.dims() != z.shape() => Err(Failure::Config(format!(
            "latent {:?} does not match the init image {:?}",
            l.dims(),
            z.shape()
        ))),
        (Some(l), _) => Ok(l.dims()),
        (None, Some(z)) => Ok(z.shape()),
        (None, None) => Err(Failure::Config(
            "latent shape missing: set \"latent\" or use an \"invert:\" init".into(),
        )),
    }
}

/// Pivotal inversion of `z0` with the background denoiser, then null-text
/// optimization when enabled and guidance is at least 1.
fn invert_latent(
    loaded: &LoadedConfig,
    registry: &DenoiserRegistry,
    schedule: &NoiseSchedule,
    z0: &LatentGrid,
) -> Result<InversionTrajectory, Failure> {
    let cfg = &loaded.config;
    let den = registry.get(&cfg.background).map_err(Failure::stage("invert"))?;
    let cond = Conditioning::background(cfg.prompt.clone());
    log::info!("inverting over {} steps", schedule.num_inference_steps());
    let traj = ddim_invert(z0, den.as_ref(), &cond, schedule, &cfg.inversion.solver)
        .map_err(Failure::stage("invert"))?;
    if cfg.inversion.null_text && cfg.guidance >= 1.0 {
        log::info!("null-text optimization at guidance {}", cfg.guidance);
        null_text_optimize(
            &traj,
            den.as_ref(),
            &cond,
            schedule,
            cfg.guidance,
            &cfg.inversion.optimizer,
        )
        .map_err(Failure::stage("null-text"))
    } else {
        Ok(traj)
    }
}

fn mask_entries(masks: &[ObjectMask], loaded: &LoadedConfig) -> Vec<MaskEntry> {
    masks
        .iter()
        .zip(&loaded.config.objects)
        .enumerate()
        .map(|(i, (m, o))| MaskEntry {
            object: i,
            class: o.class.clone(),
            provenance: m.provenance,
            threshold: m.threshold,
            pixels: m.mask.count(),
        })
        .collect()
}

fn mask_stage(e: Error) -> Failure {
    let stage = match &e {
        Error::MissingMask { .. }
        | Error::Object { .. }
        | Error::PhraseAbsent(_)
        | Error::DegenerateHistogram
        | Error::EmptyRecord => "masks",
        _ => "compose",
    };
    Failure::stage(stage)(e)
}

/// Samples the scene and writes `final.npy`, `preview.pgm` and `manifest.json`.
pub fn run_compose(inv: &Invocation) -> Result<RunManifest, Failure> {
    let mut run = Run::start("compose", inv)?;
    let image = image_latent(&run.loaded)?;
    let shape = latent_shape(&run.loaded, image.as_ref())?;
    let schedule = run.schedule()?;
    let registry = run.loaded.build_registry(shape).map_err(Failure::config)?;
    let objects = run.loaded.build_objects().map_err(Failure::config)?;
    run.lap("setup");

    let cfg = run.loaded.config.clone();
    let init = match &image {
        Some(z0) => {
            let traj = invert_latent(&run.loaded, &registry, &schedule, z0)?;
            run.manifest.null_losses = traj.null_losses.clone();
            Init::InvertedLatent(Arc::new(traj))
        }
        None => Init::GaussianNoise,
    };
    if image.is_some() {
        run.lap("invert");
    }

    let mut req = SceneRequest::new(cfg.prompt.clone(), cfg.background.clone(), shape);
    req.objects = objects;
    req.guidance_scale = cfg.guidance;
    req.seed = cfg.seed;
    req.init = init;
    req.mask_bins = cfg.masks.bins;
    log::info!(
        "composing {} object(s) over {} steps",
        req.objects.len(),
        schedule.num_inference_steps()
    );
    let gen = generate(&req, &schedule, &registry).map_err(mask_stage)?;
    run.lap("compose");

    if let Some(z0) = &image {
        run.manifest.reconstruction_mse = Some(gen.latent.mse(z0).map_err(Failure::stage("compose"))?);
    }
    run.manifest.masks = mask_entries(&gen.masks, &run.loaded);
    run.manifest.initial_checksum = Some(gen.trace.initial_checksum.clone());
    run.manifest.steps = gen.trace.steps.clone();
    run.manifest.final_checksum = Some(gen.trace.final_checksum.clone());

    let write = Failure::stage("write");
    io::save_latent(&run.out_dir.join("final.npy"), &gen.latent).map_err(&write)?;
    io::save_preview(&run.out_dir.join("preview.pgm"), &gen.latent).map_err(&write)?;
    run.record_output("final.npy")?;
    run.record_output("preview.pgm")?;
    run.finish()
}

/// Inverts the `invert:` image and writes the trajectory and `invert_manifest.json`.
pub fn run_invert(inv: &Invocation) -> Result<RunManifest, Failure> {
    let mut run = Run::start("invert", inv)?;
    let image = image_latent(&run.loaded)?.ok_or_else(|| {
        Failure::Config("invert needs \"init\": \"invert:<image path>\"".into())
    })?;
    let shape = latent_shape(&run.loaded, Some(&image))?;
    let schedule = run.schedule()?;
    let registry = run.loaded.build_registry(shape).map_err(Failure::config)?;
    run.lap("setup");

    let traj = invert_latent(&run.loaded, &registry, &schedule, &image)?;
    run.lap("invert");

    let cfg = run.loaded.config.clone();
    let den = registry.get(&cfg.background).map_err(Failure::stage("reconstruct"))?;
    let cond = Conditioning::background(cfg.prompt.clone());
    let recon = reconstruct(&traj, den.as_ref(), &cond, &schedule, cfg.guidance, true)
        .map_err(Failure::stage("reconstruct"))?;
    run.manifest.reconstruction_mse = Some(recon.mse(&image).map_err(Failure::stage("reconstruct"))?);
    run.lap("reconstruct");

    run.manifest.initial_checksum = Some(image.checksum());
    run.manifest.steps = traj
        .timesteps
        .windows(2)
        .zip(&traj.pivots[1..])
        .map(|(ts, p)| StepChecksum {
            t: ts[1],
            t_prev: ts[0],
            checksum: p.checksum(),
        })
        .collect();
    run.manifest.final_checksum = Some(traj.noised_latent().checksum());
    run.manifest.null_losses = traj.null_losses.clone();

    let index = io::save_trajectory(&run.out_dir, &traj, &cfg.prompt).map_err(Failure::stage("write"))?;
    run.record_output(io::TRAJECTORY_INDEX)?;
    run.record_output(&index.pivots)?;
    run.record_output(&index.null_embeddings)?;
    for f in &index.attention {
        run.record_output(&f.file)?;
    }
    run.finish()
}

/// Produces `mask_<i>.pgm` per object and `heatmap_<i>.npy` per
/// attention-derived mask from a saved inversion.
pub fn run_masks(inv: &Invocation) -> Result<RunManifest, Failure> {
    let mut run = Run::start("masks", inv)?;
    let objects = run.loaded.build_objects().map_err(Failure::config)?;
    let cfg = run.loaded.config.clone();
    let inv_dir = cfg
        .masks
        .inversion_dir
        .as_ref()
        .map(|d| run.loaded.resolve(d))
        .unwrap_or_else(|| run.out_dir.clone());

    let needs_attention = objects.iter().any(|o| o.mask.is_none());
    let (record, index_shape) = if needs_attention {
        let index = io::load_trajectory_index(&inv_dir).map_err(Failure::config)?;
        let rec = io::load_attention(&inv_dir, &index).map_err(Failure::config)?;
        let shape = (index.latent_shape[0], index.latent_shape[1], index.latent_shape[2]);
        (Some(rec), Some(shape))
    } else {
        (None, None)
    };
    let (_, h, w) = match (cfg.latent, index_shape) {
        (Some(l), _) => l.dims(),
        (None, Some(s)) => s,
        (None, None) => {
            return Err(Failure::Config(
                "latent shape missing: set \"latent\" or derive masks from an inversion".into(),
            ))
        }
    };
    run.lap("setup");

    let masks = make_object_masks(record.as_ref(), &objects, &cfg.prompt, h, w, cfg.masks.bins)
        .map_err(mask_stage)?;
    run.lap("masks");

    let write = Failure::stage("write");
    for (i, m) in masks.iter().enumerate() {
        let name = format!("mask_{i}.pgm");
        io::save_mask(&run.out_dir.join(&name), &m.mask).map_err(&write)?;
        run.record_output(&name)?;
        if let Some(hm) = &m.heatmap {
            let name = format!("heatmap_{i}.npy");
            io::save_heatmap(&run.out_dir.join(&name), hm).map_err(&write)?;
            run.record_output(&name)?;
        }
    }
    run.manifest.masks = mask_entries(&masks, &run.loaded);
    run.finish()
}

fn exit_with(result: Result<RunManifest, Failure>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn cmd_compose(inv: &Invocation) -> i32 {
    exit_with(run_compose(inv))
}

pub fn cmd_invert(inv: &Invocation) -> i32 {
    exit_with(run_invert(inv))
}

pub fn cmd_masks(inv: &Invocation) -> i32 {
    exit_with(run_masks(inv))
}
