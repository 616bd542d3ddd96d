//! Invert a latent, then tune per-step null embeddings so that guided
//! sampling at w = 3 lands back on it.

use objcomp::denoise::{GmmComponent, GmmDenoiser, NullReadout};
use objcomp::invert::{ddim_invert, null_text_optimize, reconstruct, InversionOptions, NullTextConfig};
use objcomp::{Conditioning, LatentGrid, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> objcomp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dog = LatentGrid::standard_normal(1, 2, 4, &mut rng);
    let cat = LatentGrid::standard_normal(1, 2, 4, &mut rng);
    let image = LatentGrid::standard_normal(1, 2, 4, &mut rng);

    // the prompt selects the "dog" component; the null branch sees both
    let gmm = GmmDenoiser::new(vec![
        GmmComponent::new(0.5, dog, 0.3).labeled("dog"),
        GmmComponent::new(0.5, cat, 0.3).labeled("cat"),
    ])?;
    let model = NullReadout::new(Box::new(gmm), (1, 2, 4), 8, 0.2, 3)?;
    let cond = Conditioning::background("a dog");
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02, 10)?;

    let traj = ddim_invert(&image, &model, &cond, &schedule, &InversionOptions::default())?;
    let w1 = reconstruct(&traj, &model, &cond, &schedule, 1.0, false)?;
    println!("w = 1 reconstruction MSE: {:.3e}", w1.mse(&image)?);

    let w = 3.0;
    let plain = reconstruct(&traj, &model, &cond, &schedule, w, false)?;
    let tuned = null_text_optimize(&traj, &model, &cond, &schedule, w, &NullTextConfig::default())?;
    let fixed = reconstruct(&tuned, &model, &cond, &schedule, w, true)?;
    println!("w = {w} without null-text: {:.3e}", plain.mse(&image)?);
    println!("w = {w} with null-text:    {:.3e}", fixed.mse(&image)?);
    for l in &tuned.null_losses {
        println!(
            "  t {:>3} -> {:>3}: loss {:.3e} -> {:.3e} in {} steps",
            l.t, l.t_prev, l.initial, l.final_loss, l.iterations
        );
    }
    Ok(())
}
