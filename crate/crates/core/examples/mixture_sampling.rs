//! Samples the five-source data mixture, checks the empirical frequencies
//! and writes a few rendered image/caption pairs.
//!
//! cargo run --release --example mixture_sampling -- [out_dir]

use aimv2_kit::data::{dump_pairs, generate_pair, paper_mixture, sample_source};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aimv2_kit::Result<()> {
    let sources = paper_mixture();
    let draws = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = vec![0usize; sources.len()];
    for _ in 0..draws {
        counts[sample_source(&sources, &mut rng)?] += 1;
    }
    for (s, c) in sources.iter().zip(&counts) {
        let freq = *c as f64 / draws as f64;
        println!("{:<16} p {:.2}  observed {freq:.4}  diff {:+.4}", s.name, s.prob, freq - s.prob);
    }

    let pairs = (0..6).map(|seed| generate_pair(seed, &sources)).collect::<aimv2_kit::Result<Vec<_>>>()?;
    for p in &pairs {
        println!("[{}] {}", sources[p.source_id].name, p.caption);
    }
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("aimv2-kit-mixture"), Into::into);
    dump_pairs(&pairs, &dir)?;
    println!("wrote {} pairs to {}", pairs.len(), dir.display());
    Ok(())
}
