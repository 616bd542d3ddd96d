use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::Timestep;

/// Gives the null embedding a linear effect on an analytic denoiser.
///
/// Unconditional calls return `eps + B·(embedding − reference)` where `B` is a
/// seeded Gaussian matrix scaled by `scale/√dim`; at the reference embedding
/// the wrapped prediction is returned unchanged. Conditional calls pass through.
pub struct NullReadout {
    inner: Box<dyn Denoiser>,
    basis: Array2<f64>,
    reference: Vec<f64>,
    shape: (usize, usize, usize),
}

impl NullReadout {
    pub fn new(
        inner: Box<dyn Denoiser>,
        shape: (usize, usize, usize),
        dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("null read-out dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = shape.0 * shape.1 * shape.2;
        let norm = scale / (dim as f64).sqrt();
        let basis = Array2::from_shape_simple_fn((len, dim), || {
            norm * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            inner,
            basis,
            reference,
            shape,
        })
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    fn offset(&self, embedding: &[f64]) -> Result<LatentGrid> {
        if embedding.len() != self.dim() {
            return Err(Error::Shape(format!(
                "null embedding has {} entries, read-out expects {}",
                embedding.len(),
                self.dim()
            )));
        }
        let delta: Array1<f64> = embedding
            .iter()
            .zip(&self.reference)
            .map(|(e, r)| e - r)
            .collect();
        let flat = self.basis.dot(&delta);
        let arr = Array3::from_shape_vec(self.shape, flat.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        LatentGrid::new(arr)
    }
}

impl Denoiser for NullReadout {
    fn predict(&self, z_t: &LatentGrid, t: Timestep, cond: &Conditioning) -> Result<DenoiserOutput> {
        let mut out = self.inner.predict(z_t, t, cond)?;
        if let Conditioning::Null { embedding } = cond {
            if embedding.as_slice() != self.reference.as_slice() {
                out.eps = out.eps.affine(1.0, &self.offset(embedding)?, 1.0)?;
            }
        }
        Ok(out)
    }

    fn null_embedding(&self) -> Vec<f64> {
        self.reference.clone()
    }
}
