//! Noise schedules and the deterministic DDIM update in both directions.
//!
//! A schedule stores the cumulative signal retention `alpha_bar[t]` for
//! `t = 0..=T` (with `alpha_bar[0] = 1`) together with the decreasing
//! subsequence of timesteps visited at inference. The DDIM rule moves a
//! latent between any two timesteps for a fixed noise prediction `eps`:
//!
//! ```text
//! z_to = sqrt(a_to) * (z_from - sqrt(1 - a_from) * eps) / sqrt(a_from) + sqrt(1 - a_to) * eps
//! ```
//!
//! Denoising (`t -> t_prev`) and inversion (`t_prev -> t`) are the same
//! map with the two retention values swapped, so for a fixed `eps` they are
//! exact inverses of each other.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// One point on the schedule as seen by a denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub alpha_bar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    inference_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear-beta DDPM schedule with `n_inference` evenly spaced steps.
    pub fn linear(
        total_steps: usize,
        beta_start: f64,
        beta_end: f64,
        n_inference: usize,
    ) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Schedule("total_steps must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::BetaOutOfRange {
                beta_start,
                beta_end,
            });
        }
        if n_inference == 0 {
            return Err(Error::NoInferenceSteps);
        }
        if n_inference > total_steps {
            return Err(Error::Schedule(format!(
                "n_inference={n_inference} exceeds total_steps={total_steps}"
            )));
        }

        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=total_steps {
            acc *= 1.0 - linear_beta(s, total_steps, beta_start, beta_end);
            alpha_bar.push(acc);
        }
        Self::from_parts(alpha_bar, even_spacing(total_steps, n_inference))
    }

    /// Builds a schedule from explicit retention values and inference steps.
    pub fn from_parts(alpha_bar: Vec<f64>, inference_steps: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("alpha_bar needs at least two entries".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Schedule("alpha_bar[0] must equal 1".into()));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] < pair[0] && pair[1] > 0.0) {
                return Err(Error::Schedule(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]; violated at t={}",
                    t + 1
                )));
            }
        }
        if inference_steps.is_empty() {
            return Err(Error::NoInferenceSteps);
        }
        let last = alpha_bar.len() - 1;
        if inference_steps.iter().any(|&t| t == 0 || t > last) {
            return Err(Error::Schedule(format!(
                "inference steps must lie in 1..={last}"
            )));
        }
        if inference_steps.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Schedule(
                "inference steps must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            alpha_bar,
            inference_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("timestep {t} out of range")))
    }

    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        Ok(Timestep {
            index: t,
            alpha_bar: self.alpha_bar(t)?,
        })
    }

    /// Inference timesteps, largest first.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn num_inference_steps(&self) -> usize {
        self.inference_steps.len()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair ends at `t_prev = 0`.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        self.inference_steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.inference_steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }
}

fn linear_beta(s: usize, total: usize, beta_start: f64, beta_end: f64) -> f64 {
    if total == 1 {
        return beta_start;
    }
    beta_start + (beta_end - beta_start) * (s - 1) as f64 / (total - 1) as f64
}

/// `T - floor(k·T/n)` for `k = 0..n`: starts at `T`, strictly decreasing, never below 1.
fn even_spacing(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| total - (k * total) / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(rename = "T", default = "default_total")]
    pub total_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_kind() -> String {
    "linear".into()
}
fn default_total() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    1e-4
}
fn default_beta_end() -> f64 {
    0.02
}
fn default_steps() -> usize {
    50
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            total_steps: default_total(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            steps: default_steps(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind.as_str() {
            "linear" => NoiseSchedule::linear(
                self.total_steps,
                self.beta_start,
                self.beta_end,
                self.steps,
            ),
            other => Err(Error::Schedule(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Moves `z` from retention `alpha_from` to `alpha_to` holding `eps` fixed.
pub fn ddim_transfer(
    z: &LatentGrid,
    eps: &LatentGrid,
    alpha_from: f64,
    alpha_to: f64,
) -> Result<LatentGrid> {
    z.ensure_same_shape(eps, "ddim latent vs eps")?;
    let (sa_from, sn_from) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (sa_to, sn_to) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let values = Zip::from(z.as_array())
        .and(eps.as_array())
        .map_collect(|&z, &e| sa_to * ((z - sn_from * e) / sa_from) + sn_to * e);
    LatentGrid::new(values)
}

/// Deterministic DDIM denoising step `z_t -> z_{t_prev}`.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::Timestep { t, t_prev });
    }
    ddim_transfer(z_t, eps, schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?)
}

/// Algebraic inverse of [`ddim_step`]: `z_{t_prev} -> z_t` for the same `eps`.
pub fn ddim_invert_step(
    z_t_prev: &LatentGrid,
    eps: &LatentGrid,
    t_prev: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t_prev >= t {
        return Err(Error::Timestep { t, t_prev });
    }
    ddim_transfer(
        z_t_prev,
        eps,
        schedule.alpha_bar(t_prev)?,
        schedule.alpha_bar(t)?,
    )
}
