//! Noise-prediction models.
//!
//! [`Denoiser`] is the seam between the sampling machinery and whatever
//! produces `eps`. The implementations here are closed-form: the data prior
//! is Gaussian (or a Gaussian mixture), so the exact noise prediction of the
//! diffused marginal is available and every downstream property can be
//! checked against it.

mod attention;
mod gmm;
mod pattern;
mod readout;

pub use attention::{AttentionCenter, SyntheticAttentionDenoiser};
pub use gmm::{GmmComponent, GmmDenoiser};
pub use pattern::{pattern_eps, PatternDenoiser};
pub use readout::NullReadout;

use crate::attnmask::{phrase_tokens, tokenize, Heatmap};
use crate::error::Result;
use crate::grid::LatentGrid;
use crate::schedule::Timestep;

/// What a denoiser call is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    /// Global text prompt.
    Background { prompt: String },
    /// One subject: an opaque reference embedding plus its class phrase.
    Object {
        subject_embedding: Vec<f64>,
        class_phrase: String,
    },
    /// The unconditional branch of classifier-free guidance.
    Null { embedding: Vec<f64> },
}

impl Conditioning {
    pub fn background(prompt: impl Into<String>) -> Self {
        Conditioning::Background {
            prompt: prompt.into(),
        }
    }

    pub fn object(subject_embedding: Vec<f64>, class_phrase: impl Into<String>) -> Self {
        Conditioning::Object {
            subject_embedding,
            class_phrase: class_phrase.into(),
        }
    }

    pub fn null(embedding: Vec<f64>) -> Self {
        Conditioning::Null { embedding }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Conditioning::Background { .. } => 0,
            Conditioning::Object {
                subject_embedding, ..
            } => subject_embedding.len(),
            Conditioning::Null { embedding } => embedding.len(),
        }
    }

    /// Text tokens the conditioning exposes to cross-attention.
    pub fn tokens(&self) -> Vec<String> {
        match self {
            Conditioning::Background { prompt } => tokenize(prompt),
            Conditioning::Object { class_phrase, .. } => phrase_tokens(class_phrase),
            Conditioning::Null { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps: LatentGrid,
    /// One heatmap per conditioning token, when the model exposes attention.
    pub attention: Option<Vec<Heatmap>>,
}

impl DenoiserOutput {
    pub fn eps_only(eps: LatentGrid) -> Self {
        Self {
            eps,
            attention: None,
        }
    }
}

/// `eps(z_t, t, cond)`. Implementations must be deterministic.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &LatentGrid, t: Timestep, cond: &Conditioning)
        -> Result<DenoiserOutput>;

    /// Reference embedding for the unconditional branch.
    fn null_embedding(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: &Conditioning) -> Result<DenoiserOutput> {
        (**self).predict(z, t, cond)
    }

    fn null_embedding(&self) -> Vec<f64> {
        (**self).null_embedding()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: &Conditioning) -> Result<DenoiserOutput> {
        (**self).predict(z, t, cond)
    }

    fn null_embedding(&self) -> Vec<f64> {
        (**self).null_embedding()
    }
}

/// Classifier-free guidance `eps_uncond + w·(eps_cond − eps_uncond)`.
///
/// Evaluated as `(1 − w)·eps_uncond + w·eps_cond`, which returns either input
/// bit-for-bit at `w = 0` and `w = 1`.
pub fn cfg_combine(eps_uncond: &LatentGrid, eps_cond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    eps_uncond.affine(1.0 - w, eps_cond, w)
}

/// Guided prediction with an explicit null embedding.
///
/// At `w = 1` the unconditional branch is not evaluated; the result is the
/// conditional prediction exactly. Attention comes from the conditional call.
pub fn guided_predict(
    denoiser: &dyn Denoiser,
    z: &LatentGrid,
    t: Timestep,
    cond: &Conditioning,
    null_embedding: &[f64],
    w: f64,
) -> Result<DenoiserOutput> {
    let cond_out = denoiser.predict(z, t, cond)?;
    if w == 1.0 {
        return Ok(cond_out);
    }
    let uncond = denoiser.predict(z, t, &Conditioning::null(null_embedding.to_vec()))?;
    Ok(DenoiserOutput {
        eps: cfg_combine(&uncond.eps, &cond_out.eps, w)?,
        attention: cond_out.attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfg_endpoints_and_extrapolation() {
        let u = LatentGrid::from_vec(1, 1, 3, vec![0.1, -0.3, 2.0]).unwrap();
        let c = LatentGrid::from_vec(1, 1, 3, vec![0.7, 0.2, -1.0]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let out = cfg_combine(
            &LatentGrid::filled(1, 1, 1, 0.0),
            &LatentGrid::filled(1, 1, 1, 1.0),
            7.5,
        )
        .unwrap();
        assert_eq!(out.to_vec(), vec![7.5]);
        assert!(cfg_combine(&u, &LatentGrid::zeros(1, 1, 2), 2.0).is_err());
    }

    #[test]
    fn conditioning_tokens() {
        assert_eq!(
            Conditioning::background("A dog, with a teapot").tokens(),
            vec!["a", "dog", "with", "a", "teapot"]
        );
        assert_eq!(Conditioning::object(vec![1.0], "the teapot").tokens(), vec!["teapot"]);
        assert_eq!(Conditioning::null(vec![0.0; 4]).embedding_dim(), 4);
    }
}
