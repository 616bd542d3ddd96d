//! Scene configuration files.
//!
//! A scene is a JSON document. Unknown keys are rejected, relative paths are
//! resolved against the directory holding the config, and everything is
//! validated before any sampling starts.
//!
//! ```json
//! {
//!   "prompt": "a dog with a teapot on the beach",
//!   "latent": { "channels": 1, "height": 16, "width": 16 },
//!   "objects": [
//!     { "class": "a dog", "embedding": "seed:1", "denoiser": "dog", "mask_path": "masks/left.pgm" }
//!   ],
//!   "background": "scene",
//!   "schedule": { "T": 1000, "beta_start": 0.0001, "beta_end": 0.02, "steps": 50 },
//!   "guidance": 7.5,
//!   "seed": 42,
//!   "init": "noise",
//!   "denoisers": {
//!     "scene": { "kind": "pattern", "target": 0.0, "variance": 0.04 },
//!     "dog":   { "kind": "pattern", "target": 1.0, "variance": 0.04 }
//!   },
//!   "output_dir": "out"
//! }
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnmask::DEFAULT_BINS;
use crate::compose::{DenoiserRegistry, ObjectSpec};
use crate::denoise::{
    AttentionCenter, Denoiser, GmmComponent, GmmDenoiser, NullReadout, PatternDenoiser,
    SyntheticAttentionDenoiser,
};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::invert::{InversionOptions, NullTextConfig};
use crate::io;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentShape>,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    /// Denoiser id used for the background branch.
    #[serde(default = "default_background")]
    pub background: String,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Length of embeddings given as `"seed:<n>"`.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    pub denoisers: BTreeMap<String, DenoiserConfig>,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub masks: MaskSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_background() -> String {
    "background".into()
}
fn default_guidance() -> f64 {
    7.5
}
fn default_embedding_dim() -> usize {
    8
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub class: String,
    pub embedding: EmbeddingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub denoiser: String,
}

/// Explicit values, or `"seed:<n>"` for a seeded standard-normal vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingSpec {
    Values(Vec<f64>),
    Seeded(String),
}

impl EmbeddingSpec {
    pub fn seed(&self) -> Result<Option<u64>> {
        match self {
            EmbeddingSpec::Values(_) => Ok(None),
            EmbeddingSpec::Seeded(s) => s
                .strip_prefix("seed:")
                .and_then(|n| n.trim().parse().ok())
                .map(Some)
                .ok_or_else(|| Error::Config(format!("embedding {s:?} is not \"seed:<int>\""))),
        }
    }

    pub fn resolve(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            EmbeddingSpec::Values(v) => Ok(v.clone()),
            EmbeddingSpec::Seeded(_) => {
                let seed = self.seed()?.expect("seeded");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..dim).map(|_| rng.sample(StandardNormal)).collect())
            }
        }
    }
}

/// `"noise"` or `"invert:<image path>"`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitSpec {
    #[default]
    Noise,
    Invert(PathBuf),
}

impl FromStr for InitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "noise" {
            return Ok(InitSpec::Noise);
        }
        match s.strip_prefix("invert:") {
            Some(p) if !p.is_empty() => Ok(InitSpec::Invert(PathBuf::from(p))),
            _ => Err(Error::Config(format!(
                "init must be \"noise\" or \"invert:<path>\", got {s:?}"
            ))),
        }
    }
}

impl TryFrom<String> for InitSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitSpec> for String {
    fn from(i: InitSpec) -> String {
        i.to_string()
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Noise => f.write_str("noise"),
            InitSpec::Invert(p) => write!(f, "invert:{}", p.display()),
        }
    }
}

/// A constant, one constant per channel, or an NPY file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Constant(f64),
    PerChannel(Vec<f64>),
    File { path: PathBuf },
}

impl TargetSpec {
    pub fn resolve(&self, shape: (usize, usize, usize), base: &Path) -> Result<LatentGrid> {
        let (c, h, w) = shape;
        let grid = match self {
            TargetSpec::Constant(v) => LatentGrid::filled(c, h, w, *v),
            TargetSpec::PerChannel(vals) => {
                if vals.len() != c {
                    return Err(Error::Config(format!(
                        "per-channel target has {} values for {c} channels",
                        vals.len()
                    )));
                }
                LatentGrid::new(Array3::from_shape_fn(shape, |(ch, _, _)| vals[ch]))?
            }
            TargetSpec::File { path } => io::load_latent(&base.join(path))?,
        };
        if grid.shape() != shape {
            return Err(Error::Config(format!(
                "target shape {:?} does not match latent {shape:?}",
                grid.shape()
            )));
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub target: TargetSpec,
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    pub dim: usize,
    #[serde(default = "default_readout_scale")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_readout_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    pub centers: Vec<AttentionCenter>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserConfig {
    Pattern(PatternConfig),
    Gmm(GmmConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub target: TargetSpec,
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_readout: Option<ReadoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub components: Vec<ComponentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_readout: Option<ReadoutConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionConfig>,
}

impl DenoiserConfig {
    pub fn build(&self, shape: (usize, usize, usize), base: &Path) -> Result<Box<dyn Denoiser>> {
        let (mut den, readout, attention): (Box<dyn Denoiser>, _, _) = match self {
            DenoiserConfig::Pattern(p) => (
                Box::new(PatternDenoiser::new(p.target.resolve(shape, base)?, p.variance)?),
                &p.null_readout,
                &p.attention,
            ),
            DenoiserConfig::Gmm(g) => {
                let comps = g
                    .components
                    .iter()
                    .map(|c| {
                        Ok(GmmComponent {
                            weight: c.weight,
                            mean: c.target.resolve(shape, base)?,
                            var: c.variance,
                            label: c.label.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Box::new(GmmDenoiser::new(comps)?), &g.null_readout, &g.attention)
            }
        };
        if let Some(r) = readout {
            den = Box::new(NullReadout::new(den, shape, r.dim, r.scale, r.seed)?);
        }
        if let Some(a) = attention {
            den = Box::new(SyntheticAttentionDenoiser::new(
                den,
                a.height,
                a.width,
                a.centers.clone(),
                a.noise,
                a.seed,
            )?);
        }
        Ok(den)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    #[serde(default = "default_true")]
    pub null_text: bool,
    #[serde(default)]
    pub optimizer: NullTextConfig,
    #[serde(default)]
    pub solver: InversionOptions,
}

fn default_true() -> bool {
    true
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            null_text: true,
            optimizer: NullTextConfig::default(),
            solver: InversionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Where `masks` reads the inversion index; defaults to `output_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion_dir: Option<PathBuf>,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            inversion_dir: None,
        }
    }
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SceneConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        if !self.denoisers.contains_key(&self.background) {
            return Err(Error::Config(format!(
                "background denoiser {:?} is not defined",
                self.background
            )));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class.trim().is_empty() {
                return Err(Error::Config(format!("object {i}: class must be non-empty")));
            }
            if !self.denoisers.contains_key(&obj.denoiser) {
                return Err(Error::Config(format!(
                    "object {i}: denoiser {:?} is not defined",
                    obj.denoiser
                )));
            }
            obj.embedding.seed()?;
        }
        if let Some(l) = &self.latent {
            if l.channels == 0 || l.height == 0 || l.width == 0 {
                return Err(Error::Config("latent dimensions must be positive".into()));
            }
        }
        if self.masks.bins < 2 {
            return Err(Error::Config("masks.bins must be at least 2".into()));
        }
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Ok(())
    }
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: SceneConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let config = SceneConfig::from_json(&text)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn init_image(&self) -> Option<PathBuf> {
        match &self.config.init {
            InitSpec::Invert(p) => Some(self.resolve(p)),
            InitSpec::Noise => None,
        }
    }

    pub fn build_registry(&self, shape: (usize, usize, usize)) -> Result<DenoiserRegistry> {
        let mut reg = DenoiserRegistry::new();
        for (id, d) in &self.config.denoisers {
            let den = d
                .build(shape, &self.base_dir)
                .map_err(|e| Error::Config(format!("denoiser {id:?}: {e}")))?;
            reg.insert(id.clone(), Arc::from(den));
        }
        Ok(reg)
    }

    /// Objects with embeddings expanded and user masks loaded.
    pub fn build_objects(&self) -> Result<Vec<ObjectSpec>> {
        self.config
            .objects
            .iter()
            .map(|o| {
                let emb = o.embedding.resolve(self.config.embedding_dim)?;
                let mut spec = ObjectSpec::new(o.class.clone(), emb, o.denoiser.clone());
                if let Some(p) = &o.mask_path {
                    spec.mask = Some(io::load_mask(&self.resolve(p))?);
                }
                Ok(spec)
            })
            .collect()
    }
}
