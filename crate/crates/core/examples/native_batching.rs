//! Native-resolution batching: sample a patch area per step, size the
//! batch to a fixed patch budget, and fit images of any aspect ratio into
//! that area with padding.
//!
//! cargo run --example native_batching

use aimv2_kit::data::{choose_grid, fit_image_to_area, plan_native_batch};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aimv2_kit::Result<()> {
    let budget = 16384;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hist = [0usize; 13];
    for _ in 0..100_000 {
        let plan = plan_native_batch(budget, &mut rng, (7, 12))?;
        assert_eq!(plan.area * plan.batch_size, budget);
        hist[plan.n as usize] += 1;
    }
    println!("area exponent histogram over 100k draws (budget {budget}):");
    for n in 7..=12 {
        println!("  2^{n:<2} = {:>4} patches x {:>3} images: {}", 1 << n, budget >> n, hist[n]);
    }

    for (h, w) in [(32, 32), (20, 60), (64, 16)] {
        let img = Array3::from_elem((h, w, 3), 0.5);
        let seq = fit_image_to_area(&img, 16, 4)?;
        let valid = seq.valid.iter().filter(|&&v| v).count();
        println!(
            "{h}x{w} image into 16 patches: grid {:?} (choose_grid {:?}), {valid} valid",
            seq.grid,
            choose_grid(h, w, 16, 4)
        );
    }
    Ok(())
}
