use super::{Conditioning, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::Timestep;

/// Exact `eps` for a prior `z_0 ~ N(target, prior_var·I)`.
///
/// The diffused marginal at retention `a` is `N(√a·target, (a·s² + 1 − a)·I)`,
/// giving `eps = √(1−a)·(z − √a·target) / (a·s² + 1 − a)`.
pub fn pattern_eps(
    z: &LatentGrid,
    target: &LatentGrid,
    prior_var: f64,
    alpha_bar: f64,
) -> Result<LatentGrid> {
    z.ensure_same_shape(target, "pattern target")?;
    let var = alpha_bar * prior_var + 1.0 - alpha_bar;
    let gain = (1.0 - alpha_bar).sqrt() / var;
    z.affine(gain, target, -gain * alpha_bar.sqrt())
}

#[derive(Clone, Debug)]
pub struct PatternDenoiser {
    target: LatentGrid,
    prior_var: f64,
}

impl PatternDenoiser {
    pub fn new(target: LatentGrid, prior_var: f64) -> Result<Self> {
        if !(prior_var >= 0.0 && prior_var.is_finite()) {
            return Err(Error::Invalid(format!(
                "prior variance must be finite and non-negative, got {prior_var}"
            )));
        }
        Ok(Self { target, prior_var })
    }

    pub fn target(&self) -> &LatentGrid {
        &self.target
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }
}

impl Denoiser for PatternDenoiser {
    fn predict(&self, z_t: &LatentGrid, t: Timestep, _cond: &Conditioning) -> Result<DenoiserOutput> {
        Ok(DenoiserOutput::eps_only(pattern_eps(
            z_t,
            &self.target,
            self.prior_var,
            t.alpha_bar,
        )?))
    }
}
