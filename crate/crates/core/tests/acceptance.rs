//! Acceptance gate: eight end-to-end criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --test acceptance`. Exits non-zero if any criterion
//! fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use objcomp::app::{run_compose, Invocation};
use objcomp::attnmask::{make_object_masks, otsu_threshold};
use objcomp::compose::{compose_step, initial_noise, sample_ddim, SceneDenoisers};
use objcomp::denoise::{
    AttentionCenter, GmmComponent, GmmDenoiser, NullReadout, PatternDenoiser, SyntheticAttentionDenoiser,
};
use objcomp::invert::{ddim_invert, null_text_optimize, reconstruct, InversionOptions, NullTextConfig};
use objcomp::schedule::{ddim_invert_step, ddim_step};
use objcomp::{
    generate, BinaryMask, Conditioning, Denoiser, Heatmap, LatentGrid, NoiseSchedule, ObjectSpec, SceneRequest,
    Timestep,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ddim_round_trip() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 50).map_err(|e| e.to_string())?;
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = r.random_range(1..=1000usize);
        let t_prev = r.random_range(0..t);
        let z = grid(4, 8, 8, random_vec(&mut r, 256, -3.0, 3.0));
        let eps = grid(4, 8, 8, random_vec(&mut r, 256, -3.0, 3.0));
        let up = ddim_invert_step(&z, &eps, t_prev, t, &s).unwrap();
        let back = ddim_step(&up, &eps, t, t_prev, &s).unwrap();
        worst = worst.max(back.max_abs_diff(&z).unwrap());
    }
    check(worst <= 1e-10, format!("max elementwise error {worst:.2e} (bound 1e-10)"))
}

fn denoiser_correctness() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut bitwise = true;
    let fd_error = |den: &dyn Denoiser, comps: &[(f64, &[f64], f64)], z: &[f64], a: f64| -> f64 {
        let t = Timestep { index: 1, alpha_bar: a };
        let eps = den.predict(&grid(1, 2, 4, z.to_vec()), t, &Conditioning::background("x")).unwrap().eps;
        let fd = fd_gradient(|p| log_marginal(comps, p, a), z, 1e-4);
        eps.to_vec()
            .iter()
            .zip(&fd)
            .map(|(e, g)| (-e / (1.0 - a).sqrt() - g).abs())
            .fold(0.0, f64::max)
    };
    for probe in 0..100 {
        let u = random_vec(&mut r, 8, -2.0, 2.0);
        let v = random_vec(&mut r, 8, -2.0, 2.0);
        let z = random_vec(&mut r, 8, -3.0, 3.0);
        let var = r.random_range(0.02..1.0);
        let a = r.random_range(0.01..0.99);
        let pattern = PatternDenoiser::new(grid(1, 2, 4, u.clone()), var).unwrap();
        if probe % 2 == 0 {
            worst = worst.max(fd_error(&pattern, &[(1.0, &u, var)], &z, a));
        } else {
            let w = r.random_range(0.1..0.9);
            let gmm = GmmDenoiser::new(vec![
                GmmComponent::new(w, grid(1, 2, 4, u.clone()), var),
                GmmComponent::new(1.0 - w, grid(1, 2, 4, v.clone()), 2.0 * var),
            ])
            .unwrap();
            worst = worst.max(fd_error(&gmm, &[(w, &u, var), (1.0 - w, &v, 2.0 * var)], &z, a));
        }
        let single = GmmDenoiser::new(vec![GmmComponent::new(1.0, grid(1, 2, 4, u.clone()), var)]).unwrap();
        let zt = grid(1, 2, 4, z.clone());
        let t = Timestep { index: 1, alpha_bar: a };
        let c = Conditioning::background("x");
        bitwise &= single.predict(&zt, t, &c).unwrap().eps == pattern.predict(&zt, t, &c).unwrap().eps;
    }
    check(
        worst <= 1e-5 && bitwise,
        format!("max score error {worst:.2e} (bound 1e-5), single-component bitwise: {bitwise}"),
    )
}

/// Best bin edge by brute force: every edge, every pixel, exact rationals.
fn exhaustive_otsu(h: &Heatmap, bins: usize) -> Option<f64> {
    let vals: Vec<f64> = h.as_array().iter().copied().collect();
    let (min, max) = (h.min(), h.max());
    let width = (max - min) / bins as f64;
    let bin = |v: f64| (((v - min) / width).floor() as usize).min(bins - 1) as i128;
    let mut best: Option<(i128, i128, usize)> = None;
    for k in 1..bins {
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for &v in &vals {
            let b = bin(v);
            if b < k as i128 {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // between-class variance up to a constant: (n1 s0 - n0 s1)^2 / (n0 n1)
        let num = (n1 * s0 - n0 * s1).pow(2);
        let den = n0 * n1;
        if best.is_none_or(|(bn, bd, _)| num * bd > bn * den) {
            best = Some((num, den, k));
        }
    }
    best.map(|(_, _, k)| min + k as f64 * width)
}

fn otsu_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut cases = 0;
    for i in 0..50 {
        let (h, w) = (r.random_range(2..24), r.random_range(2..24));
        let bins = [2, 7, 64, 256][i % 4];
        let map = if i % 3 == 0 {
            // few distinct levels make ties likely
            (0..h * w).map(|_| r.random_range(0..4) as f64 * 0.25).collect()
        } else {
            let hi = r.random_range(0.1..10.0);
            random_vec(&mut r, h * w, 0.0, hi)
        };
        let hm = Heatmap::from_vec(h, w, map).unwrap();
        cases += 1;
        match (otsu_threshold(&hm, bins).ok(), exhaustive_otsu(&hm, bins)) {
            (Some(a), Some(b)) if a.to_bits() == b.to_bits() => {}
            (None, None) => {}
            _ => mismatches += 1,
        }
    }
    let fixtures = [
        (Heatmap::from_vec(1, 6, vec![1.0, 1.0, 1.0, 9.0, 9.0, 9.0]).unwrap(), 8, 2.0),
        (Heatmap::from_vec(1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap(), 2, 0.5),
    ];
    for (hm, bins, expected) in fixtures {
        cases += 1;
        let engine = otsu_threshold(&hm, bins).ok();
        if engine != Some(expected) || exhaustive_otsu(&hm, bins) != Some(expected) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over {cases} maps"))
}

fn mask_iou() -> Outcome {
    let (n, sigma) = (32usize, 3.0);
    let centers = [(8.0, 8.0), (23.0, 23.0)];
    let prompt = "a dog and a cat";
    let inner = PatternDenoiser::new(LatentGrid::zeros(1, n, n), 0.25).unwrap();
    let model = SyntheticAttentionDenoiser::new(
        Box::new(inner),
        n,
        n,
        vec![
            AttentionCenter { token: 1, cy: centers[0].0, cx: centers[0].1, sigma },
            AttentionCenter { token: 4, cy: centers[1].0, cx: centers[1].1, sigma },
        ],
        0.1,
        2024,
    )
    .unwrap();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 10).unwrap();
    let image = initial_noise(5, (1, n, n));
    let traj = ddim_invert(&image, &model, &Conditioning::background(prompt), &s, &InversionOptions::default())
        .map_err(|e| e.to_string())?;
    let objects = [ObjectSpec::new("a dog", vec![], "d"), ObjectSpec::new("a cat", vec![], "c")];
    let masks = make_object_masks(Some(&traj.attention), &objects, prompt, n, n, 256).map_err(|e| e.to_string())?;
    let ious: Vec<f64> = masks
        .iter()
        .zip(centers)
        .map(|(m, (cy, cx))| m.mask.iou(&disk(n, n, cy, cx, 2.0 * sigma)))
        .collect();
    let overlap = masks[0].mask.intersection_count(&masks[1].mask);
    check(
        ious.iter().all(|&v| v >= 0.9) && overlap == 0,
        format!(
            "IoU vs 2-sigma disks {:.3} / {:.3} (bound 0.9), thresholds {:.3} / {:.3}, overlap {overlap} px",
            ious[0],
            ious[1],
            masks[0].threshold.unwrap_or(f64::NAN),
            masks[1].threshold.unwrap_or(f64::NAN)
        ),
    )
}

fn null_text_efficacy() -> Outcome {
    let mut r = rng(12);
    let dog = grid(1, 2, 4, random_vec(&mut r, 8, -1.5, 1.5));
    let cat = grid(1, 2, 4, random_vec(&mut r, 8, -1.5, 1.5));
    let image = grid(1, 2, 4, random_vec(&mut r, 8, -1.5, 1.5));
    let gmm = GmmDenoiser::new(vec![
        GmmComponent::new(0.5, dog, 0.3).labeled("dog"),
        GmmComponent::new(0.5, cat, 0.3).labeled("cat"),
    ])
    .unwrap();
    let model = NullReadout::new(Box::new(gmm), (1, 2, 4), 8, 0.2, 3).unwrap();
    let cond = Conditioning::background("a dog");
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 10).unwrap();
    let cfg = NullTextConfig::default();
    let traj = ddim_invert(&image, &model, &cond, &s, &InversionOptions::default()).unwrap();

    let plain = reconstruct(&traj, &model, &cond, &s, 3.0, false).unwrap().mse(&image).unwrap();
    let opt = null_text_optimize(&traj, &model, &cond, &s, 3.0, &cfg).unwrap();
    let tuned = reconstruct(&opt, &model, &cond, &s, 3.0, true).unwrap().mse(&image).unwrap();

    let unit = null_text_optimize(&traj, &model, &cond, &s, 1.0, &cfg).unwrap();
    let no_op = unit.null_embeddings == traj.null_embeddings
        && unit.null_losses.iter().all(|l| l.final_loss == l.initial && l.iterations == 0);
    let residual = reconstruct(&unit, &model, &cond, &s, 1.0, true).unwrap().mse(&image).unwrap();
    check(
        tuned < plain && no_op && residual <= 1e-4,
        format!(
            "w=3 MSE {tuned:.3e} optimized vs {plain:.3e} plain; w=1 no-op: {no_op}, residual {residual:.2e} (bound 1e-4)"
        ),
    )
}

fn region_fidelity() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 50).unwrap();
    let bound = 3.0 * HALF_PLANE_VAR.sqrt();
    let mut good = 0;
    for seed in 0..20 {
        let (req, reg, mask_a) = half_plane_scene(seed);
        let out = generate(&req, &s, &reg).unwrap();
        let (da, db) = region_deviation(&out.latent, &mask_a, HALF_PLANE_A, HALF_PLANE_B);
        if da <= bound && db <= bound {
            good += 1;
        }
    }
    let (mut req, reg, _) = half_plane_scene(77);
    req.objects.clear();
    let composed = generate(&req, &s, &reg).unwrap().latent;
    let bg = reg.get("bg").unwrap();
    let plain = sample_ddim(
        bg.as_ref(),
        &Conditioning::background(req.prompt.clone()),
        &bg.null_embedding(),
        req.guidance_scale,
        &s,
        &initial_noise(77, req.latent_shape),
    )
    .unwrap();
    let identical = composed == plain;
    check(
        good >= 19 && identical,
        format!("{good}/20 runs within 3s = {bound:.2} (need 19); n=0 bit-identical: {identical}"),
    )
}

fn determinism() -> Outcome {
    let config = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/two_objects/scene.json");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let m = run_compose(&Invocation::new(&config).with_output_dir(&out)).map_err(|e| e.to_string())?;
            let npy = std::fs::read(out.join("final.npy")).map_err(|e| e.to_string())?;
            Ok((m, npy))
        })
        .collect::<Result<_, String>>()?;
    let (ma, na) = &runs[0];
    let (mb, nb) = &runs[1];
    let same = na == nb
        && ma.config_hash == mb.config_hash
        && ma.steps == mb.steps
        && ma.final_checksum == mb.final_checksum
        && ma.outputs == mb.outputs;
    check(
        same,
        format!(
            "final.npy identical: {}, {} step checksums identical: {}",
            na == nb,
            ma.steps.len(),
            ma.steps == mb.steps
        ),
    )
}

fn masked_locality() -> Outcome {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 20).unwrap();
    let mut r = rng(8);
    let (h, w) = (6, 7);
    let mut violations = 0;
    let mut trials = 0;
    for _ in 0..40 {
        let owner: Vec<usize> = (0..h * w).map(|_| r.random_range(0..4)).collect();
        let masks: Vec<BinaryMask> = (0..3).map(|k| BinaryMask::from_fn(h, w, |y, x| owner[y * w + x] == k)).collect();
        let mut req = SceneRequest::new("a dog, a cat and a pot", "bg", (2, h, w));
        req.guidance_scale = r.random_range(1.0..8.0);
        req.objects = ["a dog", "a cat", "a pot"]
            .iter()
            .map(|c| ObjectSpec::new(*c, vec![0.0; 4], "unused"))
            .collect();
        let pattern = |v: Vec<f64>| -> Arc<dyn Denoiser> {
            Arc::new(PatternDenoiser::new(grid(2, h, w, v), 0.1).unwrap())
        };
        let base = SceneDenoisers {
            background: pattern(random_vec(&mut r, 2 * h * w, -1.0, 1.0)),
            objects: (0..3).map(|_| pattern(random_vec(&mut r, 2 * h * w, -1.0, 1.0))).collect(),
        };
        let j = r.random_range(0..3);
        let mut moved = base.clone();
        moved.objects[j] = pattern(random_vec(&mut r, 2 * h * w, -1.0, 1.0));
        let (t, t_prev) = s.step_pairs()[r.random_range(0..20)];
        let z = grid(2, h, w, random_vec(&mut r, 2 * h * w, -2.0, 2.0));
        let a = compose_step(&z, t, t_prev, &req, &masks, &base, &s, None).unwrap();
        let b = compose_step(&z, t, t_prev, &req, &masks, &moved, &s, None).unwrap();
        trials += 1;
        let outside_changed = a
            .as_array()
            .indexed_iter()
            .zip(b.as_array().iter())
            .any(|(((_, y, x), va), vb)| !masks[j].get(y, x) && va.to_bits() != vb.to_bits());
        if outside_changed {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} of {trials} perturbations leaked outside m_j"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("DDIM round-trip", ddim_round_trip, Duration::from_secs(1)),
        ("analytic denoiser correctness", denoiser_correctness, Duration::from_secs(5)),
        ("Otsu oracle equivalence", otsu_equivalence, Duration::from_secs(1)),
        ("mask pipeline IoU", mask_iou, Duration::from_secs(5)),
        ("null-text inversion efficacy", null_text_efficacy, Duration::from_secs(30)),
        ("composition region fidelity", region_fidelity, Duration::from_secs(60)),
        ("determinism", determinism, Duration::from_secs(60)),
        ("single-step masked locality", masked_locality, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= *limit, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {detail}; {:.2}s (limit {}s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
