//! Pre-trains the desk_tiny preset on a fixed pool of 64 synthetic
//! image/caption pairs and prints the loss curve.
//!
//! cargo run --release --example pretrain_desk -- [seed] [alpha]

use aimv2_kit::config::{ModelPreset, RunConfig};
use aimv2_kit::data::TOKENIZER_VOCAB;
use aimv2_kit::trainer::{train, TrainOptions};

fn main() -> aimv2_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let alpha = args.next().map_or(0.4, |s| s.parse().expect("alpha"));

    let dir = tempfile_dir("pretrain_desk");
    let mut cfg = RunConfig::desk(ModelPreset::DeskTiny, seed);
    cfg.model.alpha = alpha;
    cfg.data.train_pairs = Some(64);
    cfg.checkpoint_dir = dir.clone();

    let out = train(&cfg, &TrainOptions::default())?;
    println!("seed {seed}  config {:016x}", out.config_hash);
    println!("step\tlr\tpixel\ttext\ttotal");
    for m in out.history.iter().filter(|m| m.step % 20 == 0 || m.step == 1) {
        println!(
            "{}\t{:.2e}\t{:.4}\t{:.4}\t{:.4}",
            m.step, m.lr, m.report.pixel_loss, m.report.text_loss, m.report.total
        );
    }
    let mean = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        out.history[r].iter().map(|m| m.report.total).sum::<f64>() / n
    };
    let (early, late) = (mean(0..10), mean(190..200));
    println!("mean total, steps 1-10: {early:.4}  steps 191-200: {late:.4}  drop {:.1}%", 100.0 * (1.0 - late / early));
    println!("final text loss {:.4} (ln V = {:.4})", out.history[199].report.text_loss, (TOKENIZER_VOCAB as f64).ln());
    println!("metrics: {}", out.metrics_path.display());
    Ok(())
}

fn tempfile_dir(name: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("aimv2-kit-{name}-{}", std::process::id()))
}
