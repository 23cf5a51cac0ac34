//! Pre-trains desk_tiny twice from the same seed, once with the pixel loss
//! (alpha = 0.4) and once captioning only (alpha = 0), then probes both
//! frozen encoders on a two-class shape task. Pre-training streams fresh
//! synthetic pairs every step.
//!
//! cargo run --release --example attentive_probe -- [seed]

use aimv2_kit::config::{ModelPreset, RunConfig};
use aimv2_kit::probe::probe_from_config;
use aimv2_kit::trainer::{train, TrainOptions};

fn main() -> aimv2_kit::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    for alpha in [0.4, 0.0] {
        let mut cfg = RunConfig::desk(ModelPreset::DeskTiny, seed);
        cfg.model.alpha = alpha;
        cfg.checkpoint_dir = std::env::temp_dir().join(format!("aimv2-kit-probe-{}-{alpha}", std::process::id()));
        let out = train(&cfg, &TrainOptions::default())?;
        let (_, report) = probe_from_config(&cfg, &out.state.model.encoder)?;
        println!("alpha {alpha}: least-squares train acc {:.3}", report.least_squares_train_accuracy);
        for e in &report.run {
            println!(
                "  lr {:.0e} wd {:.2}: loss {:.4} train {:.3} eval {:.3}",
                e.lr, e.weight_decay, e.final_loss, e.train_accuracy, e.eval_accuracy
            );
        }
        println!("  best eval accuracy {:.3}", report.best_entry().eval_accuracy);
    }
    Ok(())
}
