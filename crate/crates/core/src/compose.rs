//! Mask-blended composition of several denoising trajectories.
//!
//! Every timestep, each object runs its own guided DDIM update from the shared
//! latent, the background model runs one as well, and the results are merged
//! pixel by pixel: where one or more object masks are set, the equal-weight
//! average of those objects' latents; elsewhere, the background latent.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attnmask::{make_object_masks, BinaryMask, MaskProvenance, ObjectMask, DEFAULT_BINS};
use crate::denoise::{guided_predict, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::invert::InversionTrajectory;
use crate::schedule::{ddim_step, NoiseSchedule};

/// One object to place: a subject embedding, its class phrase, an optional
/// location mask, and the denoiser that renders it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub subject_embedding: Vec<f64>,
    pub class_phrase: String,
    pub mask: Option<BinaryMask>,
    pub denoiser_id: String,
}

impl ObjectSpec {
    pub fn new(
        class_phrase: impl Into<String>,
        subject_embedding: Vec<f64>,
        denoiser_id: impl Into<String>,
    ) -> Self {
        Self {
            subject_embedding,
            class_phrase: class_phrase.into(),
            mask: None,
            denoiser_id: denoiser_id.into(),
        }
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning::object(self.subject_embedding.clone(), self.class_phrase.clone())
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    GaussianNoise,
    /// Start from `z*_T` of an inversion; its attention and null embeddings are reused.
    InvertedLatent(Arc<InversionTrajectory>),
}

#[derive(Clone, Debug)]
pub struct SceneRequest {
    pub prompt: String,
    pub objects: Vec<ObjectSpec>,
    pub background: String,
    pub guidance_scale: f64,
    pub seed: u64,
    pub init: Init,
    pub latent_shape: (usize, usize, usize),
    pub mask_bins: usize,
}

impl SceneRequest {
    pub fn new(
        prompt: impl Into<String>,
        background: impl Into<String>,
        latent_shape: (usize, usize, usize),
    ) -> Self {
        Self {
            prompt: prompt.into(),
            objects: Vec::new(),
            background: background.into(),
            guidance_scale: 1.0,
            seed: 0,
            init: Init::GaussianNoise,
            latent_shape,
            mask_bins: DEFAULT_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class_phrase.trim().is_empty() {
                return Err(Error::Invalid("class phrase must be non-empty".into())
                    .for_object(i, &obj.class_phrase));
            }
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Invalid(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        let (c, h, w) = self.latent_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("latent shape {c}x{h}x{w}")));
        }
        Ok(())
    }
}

/// Named denoisers available to a scene.
#[derive(Clone, Default)]
pub struct DenoiserRegistry {
    entries: BTreeMap<String, Arc<dyn Denoiser>>,
}

impl DenoiserRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, denoiser: Arc<dyn Denoiser>) {
        self.entries.insert(id.into(), denoiser);
    }

    pub fn with(mut self, id: impl Into<String>, denoiser: impl Denoiser + 'static) -> Self {
        self.insert(id, Arc::new(denoiser));
        self
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Denoiser>> {
        self.entries
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnboundDenoiser(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn resolve(&self, req: &SceneRequest) -> Result<SceneDenoisers> {
        Ok(SceneDenoisers {
            background: self.get(&req.background)?,
            objects: req
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    self.get(&o.denoiser_id)
                        .map_err(|e| e.for_object(i, &o.class_phrase))
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Denoisers bound to one request: background plus one per object.
#[derive(Clone)]
pub struct SceneDenoisers {
    pub background: Arc<dyn Denoiser>,
    pub objects: Vec<Arc<dyn Denoiser>>,
}

/// Pixelwise merge of object latents under binary masks over a background.
pub fn blend(
    object_latents: &[LatentGrid],
    masks: &[BinaryMask],
    background: &LatentGrid,
) -> Result<LatentGrid> {
    if object_latents.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} object latents but {} masks",
            object_latents.len(),
            masks.len()
        )));
    }
    let (c, h, w) = background.shape();
    for (i, (z, m)) in object_latents.iter().zip(masks).enumerate() {
        z.ensure_same_shape(background, &format!("object {i} latent"))?;
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "object {i} mask is {:?}, latent is {h}x{w}",
                m.dim()
            )));
        }
    }
    let bg = background.as_array();
    let mut out = Array3::zeros((c, h, w));
    let mut vals = Vec::with_capacity(object_latents.len());
    for y in 0..h {
        for x in 0..w {
            let claiming: Vec<&LatentGrid> = object_latents
                .iter()
                .zip(masks)
                .filter(|(_, m)| m.get(y, x))
                .map(|(z, _)| z)
                .collect();
            for ch in 0..c {
                out[[ch, y, x]] = if claiming.is_empty() {
                    bg[[ch, y, x]]
                } else {
                    vals.clear();
                    vals.extend(claiming.iter().map(|z| z.as_array()[[ch, y, x]]));
                    mean_sorted(&mut vals)
                };
            }
        }
    }
    LatentGrid::new(out)
}

/// Running mean over the sorted values: independent of input order, and
/// exactly `v` when every value is `v`.
fn mean_sorted(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let mut mean = vals[0];
    for (k, v) in vals.iter().enumerate().skip(1) {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

#[allow(clippy::too_many_arguments)]
fn branch_update(
    denoiser: &dyn Denoiser,
    z_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    cond: &Conditioning,
    null: &[f64],
    w: f64,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let eps = guided_predict(denoiser, z_t, schedule.timestep(t)?, cond, null, w)?.eps;
    ddim_step(z_t, &eps, t, t_prev, schedule)
}

/// One composed timestep: `n` object updates and one background update, all
/// from the same `z_t`, then [`blend`]. Branches run in parallel.
///
/// `null_embedding` overrides the background model's unconditional embedding;
/// object branches always use their own reference embedding.
#[allow(clippy::too_many_arguments)]
pub fn compose_step(
    z_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    req: &SceneRequest,
    masks: &[BinaryMask],
    denoisers: &SceneDenoisers,
    schedule: &NoiseSchedule,
    null_embedding: Option<&[f64]>,
) -> Result<LatentGrid> {
    let n = req.objects.len();
    if denoisers.objects.len() != n || masks.len() != n {
        return Err(Error::Shape(format!(
            "{n} objects, {} denoisers, {} masks",
            denoisers.objects.len(),
            masks.len()
        )));
    }
    let w = req.guidance_scale;
    let mut updates = (0..=n)
        .into_par_iter()
        .map(|i| {
            if i < n {
                let obj = &req.objects[i];
                let den = denoisers.objects[i].as_ref();
                let null = den.null_embedding();
                branch_update(den, z_t, t, t_prev, &obj.conditioning(), &null, w, schedule)
                    .map_err(|e| e.for_object(i, &obj.class_phrase))
            } else {
                let den = denoisers.background.as_ref();
                let reference;
                let null = match null_embedding {
                    Some(e) => e,
                    None => {
                        reference = den.null_embedding();
                        &reference
                    }
                };
                let cond = Conditioning::background(req.prompt.clone());
                branch_update(den, z_t, t, t_prev, &cond, null, w, schedule)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let background = updates.pop().expect("background update");
    blend(&updates, masks, &background)
}

/// Plain guided DDIM sampling with a single model.
pub fn sample_ddim(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    null_embedding: &[f64],
    guidance_scale: f64,
    schedule: &NoiseSchedule,
    z_start: &LatentGrid,
) -> Result<LatentGrid> {
    let mut z = z_start.clone();
    for (t, t_prev) in schedule.step_pairs() {
        z = branch_update(denoiser, &z, t, t_prev, cond, null_embedding, guidance_scale, schedule)?;
    }
    Ok(z)
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize)) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::standard_normal(shape.0, shape.1, shape.2, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepChecksum {
    pub t: usize,
    pub t_prev: usize,
    pub checksum: String,
}

/// Reproducibility record of one [`generate`] run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationTrace {
    pub seed: u64,
    pub init: &'static str,
    pub initial_checksum: String,
    pub steps: Vec<StepChecksum>,
    pub final_checksum: String,
    pub mask_provenance: Vec<MaskProvenance>,
    pub used_null_embeddings: bool,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: LatentGrid,
    pub masks: Vec<ObjectMask>,
    pub trace: GenerationTrace,
}

/// Full composed sampling run.
pub fn generate(
    req: &SceneRequest,
    schedule: &NoiseSchedule,
    registry: &DenoiserRegistry,
) -> Result<Generation> {
    req.validate()?;
    let denoisers = registry.resolve(req)?;
    let (_, h, w) = req.latent_shape;

    let (z_start, trajectory, init_name) = match &req.init {
        Init::GaussianNoise => (initial_noise(req.seed, req.latent_shape), None, "noise"),
        Init::InvertedLatent(traj) => {
            let z = traj.noised_latent().clone();
            if z.shape() != req.latent_shape {
                return Err(Error::Shape(format!(
                    "inverted latent {:?} vs requested {:?}",
                    z.shape(),
                    req.latent_shape
                )));
            }
            (z, Some(traj.as_ref()), "inverted")
        }
    };

    let object_masks = make_object_masks(
        trajectory.map(|t| &t.attention),
        &req.objects,
        &req.prompt,
        h,
        w,
        req.mask_bins,
    )?;
    let masks: Vec<BinaryMask> = object_masks.iter().map(|m| m.mask.clone()).collect();

    let pairs = schedule.step_pairs();
    let nulls = trajectory
        .filter(|t| !t.null_losses.is_empty() && t.num_steps() == pairs.len())
        .map(|t| &t.null_embeddings);

    let mut z = z_start;
    let initial_checksum = z.checksum();
    let mut steps = Vec::with_capacity(pairs.len());
    for (i, &(t, t_prev)) in pairs.iter().enumerate() {
        let null = nulls.map(|n| n[i].as_slice());
        z = compose_step(&z, t, t_prev, req, &masks, &denoisers, schedule, null)?;
        steps.push(StepChecksum {
            t,
            t_prev,
            checksum: z.checksum(),
        });
    }

    let trace = GenerationTrace {
        seed: req.seed,
        init: init_name,
        initial_checksum,
        final_checksum: z.checksum(),
        steps,
        mask_provenance: object_masks.iter().map(|m| m.provenance).collect(),
        used_null_embeddings: nulls.is_some(),
    };
    Ok(Generation {
        latent: z,
        masks: object_masks,
        trace,
    })
}
