use super::pattern::pattern_eps;
use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::attnmask::{phrase_tokens, tokenize};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::Timestep;

#[derive(Clone, Debug)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: LatentGrid,
    pub var: f64,
    /// Class phrase this component belongs to; unlabeled components are always active.
    pub label: Option<String>,
}

impl GmmComponent {
    pub fn new(weight: f64, mean: LatentGrid, var: f64) -> Self {
        Self {
            weight,
            mean,
            var,
            label: None,
        }
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Exact `eps` for a Gaussian-mixture prior.
///
/// The conditioning selects a subset of components: an object picks the
/// components labeled with its class phrase, a prompt picks every component
/// whose label occurs in it, and the null conditioning uses the whole mixture.
/// The result is `Σ r_k·eps_k`, with `r_k` the posterior responsibilities of
/// the diffused mixture at `z_t` and `eps_k` the single-Gaussian rule.
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    components: Vec<GmmComponent>,
    label_tokens: Vec<Option<Vec<String>>>,
}

impl GmmDenoiser {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Invalid("gmm needs at least one component".into()))?;
        for (k, c) in components.iter().enumerate() {
            c.mean.ensure_same_shape(&first.mean, &format!("gmm component {k}"))?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Invalid(format!(
                    "gmm component {k} weight must be positive, got {}",
                    c.weight
                )));
            }
            if !(c.var >= 0.0 && c.var.is_finite()) {
                return Err(Error::Invalid(format!(
                    "gmm component {k} variance must be non-negative, got {}",
                    c.var
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "gmm weights must sum to 1, got {total}"
            )));
        }
        let label_tokens = components
            .iter()
            .map(|c| c.label.as_deref().map(phrase_tokens))
            .collect();
        Ok(Self {
            components,
            label_tokens,
        })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Indices of the components active under `cond`.
    pub fn active_components(&self, cond: &Conditioning) -> Vec<usize> {
        let matches = |k: usize| -> bool {
            let Some(label) = &self.label_tokens[k] else {
                return true;
            };
            match cond {
                Conditioning::Null { .. } => true,
                Conditioning::Object { class_phrase, .. } => *label == phrase_tokens(class_phrase),
                Conditioning::Background { prompt } => {
                    let p = tokenize(prompt);
                    !label.is_empty() && p.windows(label.len()).any(|w| w == label.as_slice())
                }
            }
        };
        let any_labeled_match = (0..self.components.len())
            .any(|k| self.label_tokens[k].is_some() && matches(k));
        if !any_labeled_match {
            return (0..self.components.len()).collect();
        }
        (0..self.components.len()).filter(|&k| matches(k)).collect()
    }

    /// Posterior responsibilities of the active components at `z`.
    pub fn responsibilities(&self, z: &LatentGrid, alpha_bar: f64, active: &[usize]) -> Result<Vec<f64>> {
        let dim = z.len() as f64;
        let sa = alpha_bar.sqrt();
        let mut logits = Vec::with_capacity(active.len());
        for &k in active {
            let c = &self.components[k];
            z.ensure_same_shape(&c.mean, "gmm mean")?;
            let v = alpha_bar * c.var + 1.0 - alpha_bar;
            let dist2: f64 = z
                .as_array()
                .iter()
                .zip(c.mean.as_array().iter())
                .map(|(zi, mi)| (zi - sa * mi).powi(2))
                .sum();
            logits.push(c.weight.ln() - 0.5 * dim * v.ln() - dist2 / (2.0 * v));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / norm).collect())
    }
}

impl Denoiser for GmmDenoiser {
    fn predict(&self, z_t: &LatentGrid, t: Timestep, cond: &Conditioning) -> Result<DenoiserOutput> {
        let active = self.active_components(cond);
        if let [only] = active.as_slice() {
            let c = &self.components[*only];
            return Ok(DenoiserOutput::eps_only(pattern_eps(
                z_t,
                &c.mean,
                c.var,
                t.alpha_bar,
            )?));
        }
        let resp = self.responsibilities(z_t, t.alpha_bar, &active)?;
        let (ch, h, w) = z_t.shape();
        let mut eps = LatentGrid::zeros(ch, h, w);
        for (&k, r) in active.iter().zip(resp) {
            let c = &self.components[k];
            let e = pattern_eps(z_t, &c.mean, c.var, t.alpha_bar)?;
            eps = eps.affine(1.0, &e, r)?;
        }
        Ok(DenoiserOutput::eps_only(eps))
    }
}
