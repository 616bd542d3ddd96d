//! DDIM inversion, null-text optimization and attention capture.
//!
//! [`ddim_invert`] walks an image latent up the inference timesteps with the
//! conditional prediction only, producing the pivotal trajectory and storing
//! every cross-attention map the denoiser emits on the way.
//! [`null_text_optimize`] then retraces that trajectory downwards under
//! classifier-free guidance, tuning one null embedding per step so the guided
//! DDIM step lands as close as possible to the next pivot.

use std::collections::VecDeque;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attnmask::Heatmap;
use crate::denoise::{cfg_combine, guided_predict, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::schedule::{ddim_invert_step, ddim_step, NoiseSchedule};

/// Per-step, per-token cross-attention maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    tokens: Vec<String>,
    timesteps: Vec<usize>,
    maps: Vec<Vec<Heatmap>>,
}

impl AttentionRecord {
    pub fn new(tokens: Vec<String>) -> Self {
        Self {
            tokens,
            timesteps: Vec::new(),
            maps: Vec::new(),
        }
    }

    /// Appends one step; `maps` holds one heatmap per token, all the same size.
    pub fn push(&mut self, t: usize, maps: Vec<Heatmap>) -> Result<()> {
        if maps.len() != self.tokens.len() {
            return Err(Error::Shape(format!(
                "attention step has {} maps for {} tokens",
                maps.len(),
                self.tokens.len()
            )));
        }
        let dim = self.maps.first().and_then(|m| m.first()).map(Heatmap::dim);
        let expected = dim.or_else(|| maps.first().map(Heatmap::dim));
        if maps.iter().any(|m| Some(m.dim()) != expected) {
            return Err(Error::Shape("attention maps differ in size".into()));
        }
        self.timesteps.push(t);
        self.maps.push(maps);
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn num_steps(&self) -> usize {
        self.maps.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty() || self.tokens.is_empty()
    }

    /// Number of stored `(step, token)` heatmaps.
    pub fn entry_count(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }

    /// Attention grid size; `(0, 0)` when nothing has been stored.
    pub fn map_dim(&self) -> (usize, usize) {
        self.maps
            .first()
            .and_then(|m| m.first())
            .map(Heatmap::dim)
            .unwrap_or((0, 0))
    }

    pub fn map(&self, step: usize, token: usize) -> &Heatmap {
        &self.maps[step][token]
    }

    /// `steps × H × W` stack of one token's maps.
    pub fn token_stack(&self, token: usize) -> Array3<f64> {
        let (h, w) = self.map_dim();
        Array3::from_shape_fn((self.num_steps(), h, w), |(s, y, x)| {
            self.maps[s][token].get(y, x)
        })
    }

    /// Rebuilds a record from per-token stacks (inverse of [`Self::token_stack`]).
    pub fn from_token_stacks(
        tokens: Vec<String>,
        timesteps: Vec<usize>,
        stacks: &[Array3<f64>],
    ) -> Result<Self> {
        if stacks.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} attention stacks for {} tokens",
                stacks.len(),
                tokens.len()
            )));
        }
        let mut rec = AttentionRecord::new(tokens);
        for (s, &t) in timesteps.iter().enumerate() {
            let maps = stacks
                .iter()
                .map(|stack| {
                    if stack.dim().0 != timesteps.len() {
                        return Err(Error::Shape("attention stack length mismatch".into()));
                    }
                    Heatmap::new(stack.index_axis(ndarray::Axis(0), s).to_owned())
                })
                .collect::<Result<Vec<_>>>()?;
            rec.push(t, maps)?;
        }
        Ok(rec)
    }
}

/// Loss bookkeeping for one null-text step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub t: usize,
    pub t_prev: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct InversionTrajectory {
    /// Ascending timesteps starting at 0; `pivots[i]` sits at `timesteps[i]`.
    pub timesteps: Vec<usize>,
    pub pivots: Vec<LatentGrid>,
    pub guidance_scale: f64,
    /// One embedding per sampling step, in sampling (descending-t) order.
    pub null_embeddings: Vec<Vec<f64>>,
    /// Empty until [`null_text_optimize`] has run.
    pub null_losses: Vec<StepLoss>,
    pub attention: AttentionRecord,
}

impl InversionTrajectory {
    pub fn num_steps(&self) -> usize {
        self.null_embeddings.len()
    }

    pub fn input_latent(&self) -> &LatentGrid {
        &self.pivots[0]
    }

    /// Fully noised pivot `z*_T`, the starting point for sampling.
    pub fn noised_latent(&self) -> &LatentGrid {
        self.pivots.last().expect("trajectory has pivots")
    }

    pub fn pivot_at(&self, t: usize) -> Option<&LatentGrid> {
        self.timesteps
            .iter()
            .position(|&s| s == t)
            .map(|i| &self.pivots[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionOptions {
    /// Evaluations of `eps` per step; 1 is plain DDIM inversion.
    #[serde(default = "default_fixed_point_iters")]
    pub fixed_point_iters: usize,
    #[serde(default = "default_fixed_point_tol")]
    pub fixed_point_tol: f64,
}

fn default_fixed_point_iters() -> usize {
    200
}
fn default_fixed_point_tol() -> f64 {
    1e-12
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            fixed_point_iters: default_fixed_point_iters(),
            fixed_point_tol: default_fixed_point_tol(),
        }
    }
}

/// Pivotal DDIM inversion of `z0` at guidance 1.
///
/// Each step first evaluates `eps` at the current latent; with
/// `fixed_point_iters > 1` it then solves `z_t = invert_step(z_prev, eps(z_t))`
/// with Anderson-accelerated fixed-point iteration. At the solution the
/// forward DDIM step is an exact inverse of the inversion step.
pub fn ddim_invert(
    z0: &LatentGrid,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    opts: &InversionOptions,
) -> Result<InversionTrajectory> {
    if !z0.is_finite() {
        return Err(Error::NonFinite("input latent"));
    }
    let steps = schedule.inference_steps();
    if steps.is_empty() {
        return Err(Error::NoInferenceSteps);
    }
    let mut attention = AttentionRecord::new(cond.tokens());
    let mut timesteps = vec![0];
    let mut pivots = vec![z0.clone()];
    let mut prev = 0;

    for &t in steps.iter().rev() {
        let ts = schedule.timestep(t)?;
        let current = pivots.last().expect("non-empty");
        let first = denoiser.predict(current, ts, cond)?;
        let guess = ddim_invert_step(current, &first.eps, prev, t, schedule)?;
        let (next, out) = if opts.fixed_point_iters > 1 {
            let (c, h, w) = current.shape();
            let (x, out) = anderson(
                guess.to_vec(),
                |x| {
                    let z = LatentGrid::from_vec(c, h, w, x.to_vec())?;
                    let out = denoiser.predict(&z, ts, cond)?;
                    Ok((ddim_invert_step(current, &out.eps, prev, t, schedule)?.to_vec(), out))
                },
                opts.fixed_point_iters - 1,
                opts.fixed_point_tol,
            )?;
            (LatentGrid::from_vec(c, h, w, x)?, out)
        } else {
            (guess, first)
        };
        if let Some(maps) = out.attention {
            attention.push(t, maps)?;
        }
        timesteps.push(t);
        pivots.push(next);
        prev = t;
    }

    let null = denoiser.null_embedding();
    Ok(InversionTrajectory {
        timesteps,
        pivots,
        guidance_scale: 1.0,
        null_embeddings: vec![null; steps.len()],
        null_losses: Vec::new(),
        attention,
    })
}

const ANDERSON_MEMORY: usize = 5;

/// Solves `x = map(x)` from `x0` with Anderson acceleration, using at most
/// `max_evals` evaluations of `map`. Returns the iterate with the smallest
/// residual together with the side output `map` produced there.
fn anderson<T>(
    x0: Vec<f64>,
    mut map: impl FnMut(&[f64]) -> Result<(Vec<f64>, T)>,
    max_evals: usize,
    tol: f64,
) -> Result<(Vec<f64>, T)> {
    let residual = |x: &[f64], fx: &[f64]| -> Vec<f64> { fx.iter().zip(x).map(|(f, v)| f - v).collect() };
    let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let (fx, side) = map(&x0)?;
    let mut x = x0;
    let mut g = residual(&x, &fx);
    let mut best = (norm(&g), x.clone(), g.clone(), side);
    let mut dx: VecDeque<Vec<f64>> = VecDeque::new();
    let mut dg: VecDeque<Vec<f64>> = VecDeque::new();

    for _ in 1..max_evals {
        if !(best.0 > tol) {
            break;
        }
        let mut step = g.clone();
        if let Some(gamma) = mixing_weights(&dg, &g) {
            for ((gm, dxi), dgi) in gamma.iter().zip(&dx).zip(&dg) {
                for ((s, a), b) in step.iter_mut().zip(dxi).zip(dgi) {
                    *s -= gm * (a + b);
                }
            }
        }
        let x_new: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
        let (fx_new, side_new) = map(&x_new)?;
        let g_new = residual(&x_new, &fx_new);
        let r_new = norm(&g_new);

        if !r_new.is_finite() || r_new > 1e3 * best.0 {
            // diverging: restart from the best point without history
            dx.clear();
            dg.clear();
            x = best.1.clone();
            g = best.2.clone();
            continue;
        }
        dx.push_back(x_new.iter().zip(&x).map(|(a, b)| a - b).collect());
        dg.push_back(g_new.iter().zip(&g).map(|(a, b)| a - b).collect());
        if dx.len() > ANDERSON_MEMORY {
            dx.pop_front();
            dg.pop_front();
        }
        x = x_new;
        g = g_new;
        if r_new < best.0 {
            best = (r_new, x.clone(), g.clone(), side_new);
        }
    }
    Ok((best.1, best.3))
}

/// Least-squares `gamma` minimizing `|g - sum gamma_i dg_i|`, by regularized
/// normal equations; `None` without history or for a singular system.
fn mixing_weights(dg: &VecDeque<Vec<f64>>, g: &[f64]) -> Option<Vec<f64>> {
    let m = dg.len();
    if m == 0 {
        return None;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row: Vec<f64> = (0..m).map(|j| dot(&dg[i], &dg[j])).collect();
            row.push(dot(&dg[i], g));
            row
        })
        .collect();
    let trace: f64 = (0..m).map(|i| a[i][i]).sum();
    if !(trace > 0.0) {
        return None;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-12 * trace;
    }
    // Gaussian elimination with partial pivoting
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        a.swap(col, piv);
        if a[col][col].abs() < f64::MIN_POSITIVE {
            return None;
        }
        for row in col + 1..m {
            let f = a[row][col] / a[col][col];
            for k in col..=m {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut gamma = vec![0.0; m];
    for i in (0..m).rev() {
        let tail: f64 = (i + 1..m).map(|k| a[i][k] * gamma[k]).sum();
        gamma[i] = (a[i][m] - tail) / a[i][i];
    }
    gamma.iter().all(|v| v.is_finite()).then_some(gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullTextConfig {
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_stop_eps")]
    pub stop_eps: f64,
    /// Central-difference step for the embedding gradient.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_inner_steps() -> usize {
    10
}
fn default_lr() -> f64 {
    0.1
}
fn default_stop_eps() -> f64 {
    1e-5
}
fn default_fd_step() -> f64 {
    1e-4
}

impl Default for NullTextConfig {
    fn default() -> Self {
        Self {
            inner_steps: default_inner_steps(),
            lr: default_lr(),
            stop_eps: default_stop_eps(),
            fd_step: default_fd_step(),
        }
    }
}

fn sum_sq_diff(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    Ok(a.mse(b)? * a.len() as f64)
}

/// Per-step null-embedding optimization along a pivotal trajectory.
///
/// From `z*_T` downwards, step `i` minimizes
/// `‖ddim_step(ẑ_t, cfg(eps(ẑ_t, ∅), eps(ẑ_t, cond), w)) − z*_{t_prev}‖²`
/// over `∅` by gradient descent with central-difference gradients, keeps the
/// best iterate seen (so the final loss never exceeds the initial one), and
/// continues from the latent that embedding produces. Each step starts from
/// the previous step's result.
pub fn null_text_optimize(
    traj: &InversionTrajectory,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    guidance_scale: f64,
    cfg: &NullTextConfig,
) -> Result<InversionTrajectory> {
    if !(guidance_scale >= 1.0) {
        return Err(Error::Invalid(format!(
            "null-text optimization needs guidance >= 1, got {guidance_scale}"
        )));
    }
    let pairs = schedule.step_pairs();
    if pairs.len() != traj.num_steps() || traj.pivots.len() != pairs.len() + 1 {
        return Err(Error::Shape(format!(
            "trajectory has {} steps, schedule has {}",
            traj.num_steps(),
            pairs.len()
        )));
    }

    let mut z_hat = traj.noised_latent().clone();
    let mut embedding = traj.null_embeddings[0].clone();
    let mut null_embeddings = Vec::with_capacity(pairs.len());
    let mut null_losses = Vec::with_capacity(pairs.len());

    for (step, &(t, t_prev)) in pairs.iter().enumerate() {
        let target = traj
            .pivot_at(t_prev)
            .ok_or_else(|| Error::Shape(format!("no pivot at t={t_prev}")))?;
        let ts = schedule.timestep(t)?;
        let cond_eps = denoiser.predict(&z_hat, ts, cond)?.eps;

        let evaluate = |emb: &[f64]| -> Result<(f64, LatentGrid)> {
            let eps = if guidance_scale == 1.0 {
                cond_eps.clone()
            } else {
                let uncond = denoiser
                    .predict(&z_hat, ts, &Conditioning::null(emb.to_vec()))?
                    .eps;
                cfg_combine(&uncond, &cond_eps, guidance_scale)?
            };
            let landed = ddim_step(&z_hat, &eps, t, t_prev, schedule)?;
            let loss = sum_sq_diff(&landed, target)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, t });
            }
            Ok((loss, landed))
        };
        let with_step = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step, t },
            other => other,
        };

        let (initial, landed) = evaluate(&embedding).map_err(with_step)?;
        let mut best = (initial, embedding.clone(), landed);
        let mut current = embedding.clone();
        let mut iterations = 0;
        // at w = 1 the loss does not depend on the embedding
        let budget = if guidance_scale == 1.0 { 0 } else { cfg.inner_steps };
        for _ in 0..budget {
            if best.0 < cfg.stop_eps {
                break;
            }
            let h = cfg.fd_step;
            let mut grad = vec![0.0; current.len()];
            for (j, g) in grad.iter_mut().enumerate() {
                let mut plus = current.clone();
                plus[j] += h;
                let mut minus = current.clone();
                minus[j] -= h;
                let lp = evaluate(&plus).map_err(with_step)?.0;
                let lm = evaluate(&minus).map_err(with_step)?.0;
                *g = (lp - lm) / (2.0 * h);
            }
            for (c, g) in current.iter_mut().zip(&grad) {
                *c -= cfg.lr * g;
            }
            let (loss, landed) = evaluate(&current).map_err(with_step)?;
            iterations += 1;
            if loss < best.0 {
                best = (loss, current.clone(), landed);
            }
        }

        let (final_loss, best_embedding, landed) = best;
        null_losses.push(StepLoss {
            t,
            t_prev,
            initial,
            final_loss,
            iterations,
        });
        null_embeddings.push(best_embedding.clone());
        embedding = best_embedding;
        z_hat = landed;
    }

    Ok(InversionTrajectory {
        timesteps: traj.timesteps.clone(),
        pivots: traj.pivots.clone(),
        guidance_scale,
        null_embeddings,
        null_losses,
        attention: traj.attention.clone(),
    })
}

/// Guided DDIM sampling from `z*_T` using the trajectory's null embeddings
/// (or the denoiser's reference embedding when `use_nulls` is false).
pub fn reconstruct(
    traj: &InversionTrajectory,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    guidance_scale: f64,
    use_nulls: bool,
) -> Result<LatentGrid> {
    let reference = denoiser.null_embedding();
    let mut z = traj.noised_latent().clone();
    for (i, (t, t_prev)) in schedule.step_pairs().into_iter().enumerate() {
        let null = if use_nulls {
            traj.null_embeddings.get(i).unwrap_or(&reference)
        } else {
            &reference
        };
        let eps = guided_predict(denoiser, &z, schedule.timestep(t)?, cond, null, guidance_scale)?.eps;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
    }
    Ok(z)
}
