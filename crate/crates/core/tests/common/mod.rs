//! Oracles and fixtures shared by the integration and acceptance tests.
//!
//! Nothing here calls into the library's numerics: densities, schedules and
//! the DDIM update are re-derived on plain `Vec<f64>`s.
#![allow(dead_code)]

use objcomp::denoise::PatternDenoiser;
use objcomp::{BinaryMask, DenoiserRegistry, LatentGrid, ObjectSpec, SceneRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn grid(c: usize, h: usize, w: usize, v: Vec<f64>) -> LatentGrid {
    LatentGrid::from_vec(c, h, w, v).unwrap()
}

/// `log p_t(z)` for a Gaussian mixture prior pushed through the forward
/// process: component k becomes `N(sqrt(a)·mean_k, (a·var_k + 1 − a)·I)`.
pub fn log_marginal(comps: &[(f64, &[f64], f64)], z: &[f64], a: f64) -> f64 {
    let n = z.len() as f64;
    let terms: Vec<f64> = comps
        .iter()
        .map(|&(w, mean, var)| {
            let v = a * var + 1.0 - a;
            let d2: f64 = z
                .iter()
                .zip(mean)
                .map(|(x, m)| (x - a.sqrt() * m).powi(2))
                .sum();
            w.ln() - 0.5 * d2 / v - 0.5 * n * (2.0 * std::f64::consts::PI * v).ln()
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `z`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut p = z.to_vec();
            let mut m = z.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Linear-beta `alpha_bar[0..=T]` by running product, `alpha_bar[0] = 1`.
pub fn alpha_bars(total: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut prod = 1.0;
    for i in 0..total {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / (total - 1) as f64;
        prod *= 1.0 - beta;
        out.push(prod);
    }
    out
}

/// Deterministic DDIM sampling of a single pattern prior from `z`, written
/// from the update rule directly.
pub fn ddim_pattern_oracle(z: &[f64], target: &[f64], var: f64, total: usize, steps: usize) -> Vec<f64> {
    let ab = alpha_bars(total, 1e-4, 0.02);
    let ts: Vec<usize> = (0..steps).map(|k| total - k * total / steps).chain([0]).collect();
    let mut x = z.to_vec();
    for pair in ts.windows(2) {
        let (a, ap) = (ab[pair[0]], ab[pair[1]]);
        x = x
            .iter()
            .zip(target)
            .map(|(&xi, &u)| {
                let eps = (1.0 - a).sqrt() * (xi - a.sqrt() * u) / (a * var + 1.0 - a);
                let x0 = (xi - (1.0 - a).sqrt() * eps) / a.sqrt();
                ap.sqrt() * x0 + (1.0 - ap).sqrt() * eps
            })
            .collect();
    }
    x
}

pub const HALF_PLANE_VAR: f64 = 0.04;
pub const HALF_PLANE_A: f64 = 1.0;
pub const HALF_PLANE_B: f64 = -1.0;

/// Two pattern objects on the left and right halves of a `16×16` canvas.
pub fn half_plane_scene(seed: u64) -> (SceneRequest, DenoiserRegistry, BinaryMask) {
    let (h, w) = (16, 16);
    let reg = DenoiserRegistry::new()
        .with("bg", PatternDenoiser::new(LatentGrid::zeros(1, h, w), HALF_PLANE_VAR).unwrap())
        .with("a", PatternDenoiser::new(LatentGrid::filled(1, h, w, HALF_PLANE_A), HALF_PLANE_VAR).unwrap())
        .with("b", PatternDenoiser::new(LatentGrid::filled(1, h, w, HALF_PLANE_B), HALF_PLANE_VAR).unwrap());
    let mask_a = BinaryMask::from_fn(h, w, |_, x| x < w / 2);
    let mask_b = BinaryMask::from_fn(h, w, |_, x| x >= w / 2);
    let mut req = SceneRequest::new("a dog next to a cat", "bg", (1, h, w));
    req.objects = vec![
        ObjectSpec::new("a dog", vec![0.3; 8], "a").with_mask(mask_a.clone()),
        ObjectSpec::new("a cat", vec![-0.3; 8], "b").with_mask(mask_b),
    ];
    req.guidance_scale = 7.5;
    req.seed = seed;
    (req, reg, mask_a)
}

/// Mean absolute deviation from `u_a` inside `mask_a` and from `u_b` outside.
pub fn region_deviation(z: &LatentGrid, mask_a: &BinaryMask, u_a: f64, u_b: f64) -> (f64, f64) {
    let a = z.as_array();
    let (mut da, mut na, mut db, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for ((_, y, x), &v) in a.indexed_iter() {
        if mask_a.get(y, x) {
            da += (v - u_a).abs();
            na += 1;
        } else {
            db += (v - u_b).abs();
            nb += 1;
        }
    }
    (da / na as f64, db / nb as f64)
}

/// Pixels within distance `r` of `(cy, cx)`.
pub fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| {
        (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    })
}
