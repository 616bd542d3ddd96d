//! Object masks from cross-attention recorded during inversion.
//!
//! A synthetic attention model puts a Gaussian bump under "dog" and another
//! under "cat". The maps are averaged over steps, resampled to the latent
//! grid and split with Otsu's threshold.

use objcomp::attnmask::{make_object_masks, DEFAULT_BINS};
use objcomp::denoise::{AttentionCenter, PatternDenoiser, SyntheticAttentionDenoiser};
use objcomp::invert::{ddim_invert, InversionOptions};
use objcomp::{Conditioning, LatentGrid, NoiseSchedule, ObjectSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> objcomp::Result<()> {
    let prompt = "a dog and a cat";
    let (h, w) = (16, 16);
    let centers = vec![
        AttentionCenter { token: 1, cy: 8.0, cx: 8.0, sigma: 3.0 },
        AttentionCenter { token: 4, cy: 23.0, cx: 23.0, sigma: 3.0 },
    ];
    let inner = PatternDenoiser::new(LatentGrid::zeros(1, h, w), 0.25)?;
    let model = SyntheticAttentionDenoiser::new(Box::new(inner), 32, 32, centers, 0.1, 5)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = LatentGrid::standard_normal(1, h, w, &mut rng);
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02, 10)?;
    let traj = ddim_invert(&image, &model, &Conditioning::background(prompt), &schedule, &InversionOptions::default())?;
    println!(
        "recorded {} steps x {} tokens of {:?} maps",
        traj.attention.num_steps(),
        traj.attention.num_tokens(),
        traj.attention.map_dim()
    );

    let objects = vec![
        ObjectSpec::new("a dog", vec![0.0; 4], "dog"),
        ObjectSpec::new("a cat", vec![0.0; 4], "cat"),
    ];
    let masks = make_object_masks(Some(&traj.attention), &objects, prompt, h, w, DEFAULT_BINS)?;
    for (obj, m) in objects.iter().zip(&masks) {
        println!(
            "\n{} (threshold {:.3}, {} pixels):",
            obj.class_phrase,
            m.threshold.unwrap_or(f64::NAN),
            m.mask.count()
        );
        for y in 0..h {
            let row: String = (0..w).map(|x| if m.mask.get(y, x) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    println!("\noverlap: {} pixels", masks[0].mask.intersection_count(&masks[1].mask));
    Ok(())
}
