//! One DDIM step and its inverse on random latents.
//!
//! Run with `cargo run --example ddim_roundtrip`.

use objcomp::schedule::{ddim_invert_step, ddim_step, NoiseSchedule};
use objcomp::LatentGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> objcomp::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02, 50)?;
    println!(
        "{} inference steps, first {:?}, alpha_bar(T-1) = {:.6}",
        schedule.num_inference_steps(),
        &schedule.step_pairs()[..3],
        schedule.alpha_bar(999)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for (t, t_prev) in schedule.step_pairs() {
        let z = LatentGrid::standard_normal(4, 8, 8, &mut rng);
        let eps = LatentGrid::standard_normal(4, 8, 8, &mut rng);
        let up = ddim_invert_step(&z, &eps, t_prev, t, &schedule)?;
        let back = ddim_step(&up, &eps, t, t_prev, &schedule)?;
        worst = worst.max(back.max_abs_diff(&z)?);
    }
    println!("worst elementwise error of invert then step: {worst:.3e}");
    Ok(())
}
