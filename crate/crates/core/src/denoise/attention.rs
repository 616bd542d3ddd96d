use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::attnmask::Heatmap;
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::Timestep;

/// Where one prompt token attends: a Gaussian bump on the attention grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionCenter {
    pub token: usize,
    pub cy: f64,
    pub cx: f64,
    pub sigma: f64,
}

/// Wraps a denoiser and emits cross-attention maps with a known answer.
///
/// For prompt conditioning, every prompt token gets an `height × width` map:
/// configured tokens a unit-peak Gaussian bump, the rest zeros, plus uniform
/// noise in `[0, noise)` drawn from a stream keyed by `(seed, t, token)`.
pub struct SyntheticAttentionDenoiser {
    inner: Box<dyn Denoiser>,
    height: usize,
    width: usize,
    centers: Vec<AttentionCenter>,
    noise: f64,
    seed: u64,
}

impl SyntheticAttentionDenoiser {
    pub fn new(
        inner: Box<dyn Denoiser>,
        height: usize,
        width: usize,
        centers: Vec<AttentionCenter>,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("attention grid must be non-empty".into()));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Invalid(format!("attention noise must be >= 0, got {noise}")));
        }
        for c in &centers {
            let inside = (0.0..=(height - 1) as f64).contains(&c.cy)
                && (0.0..=(width - 1) as f64).contains(&c.cx);
            if !inside {
                return Err(Error::Invalid(format!(
                    "attention center ({}, {}) for token {} is outside the {height}x{width} grid",
                    c.cy, c.cx, c.token
                )));
            }
            if !(c.sigma > 0.0) {
                return Err(Error::Invalid(format!(
                    "attention sigma must be positive, got {}",
                    c.sigma
                )));
            }
        }
        Ok(Self {
            inner,
            height,
            width,
            centers,
            noise,
            seed,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn centers(&self) -> &[AttentionCenter] {
        &self.centers
    }

    /// Noise-free map for `token`: max-normalized bump, or zeros.
    pub fn clean_map(&self, token: usize) -> Array2<f64> {
        let mut map = Array2::zeros((self.height, self.width));
        for c in self.centers.iter().filter(|c| c.token == token) {
            let two_var = 2.0 * c.sigma * c.sigma;
            for ((y, x), v) in map.indexed_iter_mut() {
                let d2 = (y as f64 - c.cy).powi(2) + (x as f64 - c.cx).powi(2);
                *v += (-d2 / two_var).exp();
            }
        }
        let max = map.iter().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            map.mapv_inplace(|v| v / max);
        }
        map
    }

    fn noisy_map(&self, t: usize, token: usize) -> Result<Heatmap> {
        let mut map = self.clean_map(token);
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, t as u64, token as u64));
            map.mapv_inplace(|v| v + self.noise * rng.random::<f64>());
        }
        Heatmap::new(map)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_seed(seed: u64, t: u64, token: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ t) ^ token)
}

impl Denoiser for SyntheticAttentionDenoiser {
    fn predict(&self, z_t: &LatentGrid, t: Timestep, cond: &Conditioning) -> Result<DenoiserOutput> {
        let mut out = self.inner.predict(z_t, t, cond)?;
        if let Conditioning::Background { .. } = cond {
            let maps = (0..cond.tokens().len())
                .map(|tok| self.noisy_map(t.index, tok))
                .collect::<Result<Vec<_>>>()?;
            out.attention = Some(maps);
        }
        Ok(out)
    }

    fn null_embedding(&self) -> Vec<f64> {
        self.inner.null_embedding()
    }
}
