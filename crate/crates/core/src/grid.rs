//! The latent state a diffusion sampler evolves: a `C×H×W` grid of reals.

use ndarray::{Array3, ArrayView3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Array3<f64>,
}

impl LatentGrid {
    /// Wraps an array, rejecting empty dimensions and non-finite values.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        Self::checked_dims(values)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let arr = Array3::from_shape_vec((channels, height, width), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            values: Array3::zeros((channels, height, width)),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            values: Array3::from_elem((channels, height, width), value),
        }
    }

    /// Standard-normal grid drawn from `rng` in C-order.
    pub fn standard_normal<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let n = channels * height * width;
        let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            values: Array3::from_shape_vec((channels, height, width), values)
                .expect("length matches shape"),
        }
    }

    fn checked_dims(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty latent grid {c}x{h}x{w}")));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.values.view()
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_array(self) -> Array3<f64> {
        self.values
    }

    /// Values in C-order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `a·self + b·other`.
    pub fn affine(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "affine combination")?;
        let values = Zip::from(&self.values)
            .and(&other.values)
            .map_collect(|&x, &y| a * x + b * y);
        Ok(Self { values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        Self {
            values: self.values.mapv(f),
        }
    }

    /// Mean squared difference.
    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "mse")?;
        let sum: f64 = Zip::from(&self.values)
            .and(&other.values)
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        Ok(sum / self.len() as f64)
    }

    /// Root-mean-square distance, i.e. L2 distance over `√dim`.
    pub fn rms_distance(&self, other: &LatentGrid) -> Result<f64> {
        Ok(self.mse(other)?.sqrt())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(Zip::from(&self.values)
            .and(&other.values)
            .fold(0.0f64, |acc, &x, &y| acc.max((x - y).abs())))
    }

    /// SHA-256 over the shape and the little-endian C-order values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let (c, h, w) = self.shape();
        for d in [c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in self.values.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

impl TryFrom<Array3<f64>> for LatentGrid {
    type Error = Error;

    fn try_from(values: Array3<f64>) -> Result<Self> {
        LatentGrid::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(LatentGrid::from_vec(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(LatentGrid::new(Array3::zeros((0, 2, 2))).is_err());
    }

    #[test]
    fn checksum_depends_on_shape_and_values() {
        let a = LatentGrid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = LatentGrid::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = LatentGrid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }

    #[test]
    fn mse_of_shifted_grid() {
        let a = LatentGrid::filled(2, 3, 3, 1.0);
        let b = LatentGrid::filled(2, 3, 3, 3.0);
        assert_eq!(a.mse(&b).unwrap(), 4.0);
        assert_eq!(a.rms_distance(&b).unwrap(), 2.0);
    }
}
