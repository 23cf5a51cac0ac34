//! Prefix attention masks and the shifted targets they pair with.
//!
//! cargo run --example prefix_masks

use aimv2_kit::data::{tokenize, EOT_ID, PAD_ID};
use aimv2_kit::masks::{build_prefix_mask, make_targets, sample_prefix_len};
use aimv2_kit::patchify::patchify;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aimv2_kit::Result<()> {
    let num_patches = 4;
    for prefix in 1..=num_patches {
        let mask = build_prefix_mask(num_patches, prefix)?;
        println!("I = {num_patches}, M = {prefix}");
        for (i, row) in mask.allowed_sets().iter().enumerate() {
            let cells: String = (0..num_patches).map(|j| if row.contains(&j) { '#' } else { '.' }).collect();
            println!("  {i}: {cells}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<usize> = (0..12).map(|_| sample_prefix_len(num_patches, &mut rng)).collect::<Result<_, _>>()?;
    println!("sampled prefix lengths: {draws:?}");

    let image = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 8 + x + c) as f64 / 64.0);
    let patches = patchify(&image, 4)?;
    let tokens = tokenize("red", 77);
    let pack = make_targets(&patches, &tokens, 2, PAD_ID, EOT_ID)?;
    println!("M = 2: pixel loss at outputs {:?}", active(&pack.pixel_loss_mask));
    println!("tokens {tokens:?} -> targets {:?} active {:?}", pack.text_targets, active(&pack.text_loss_mask));
    Ok(())
}

fn active(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}
