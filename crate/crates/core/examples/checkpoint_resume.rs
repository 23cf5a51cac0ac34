//! Trains 100 steps straight through, then 50 + 50 with a checkpoint in
//! between, and shows both runs end in identical parameters.
//!
//! cargo run --release --example checkpoint_resume

use aimv2_kit::config::{ModelPreset, OptimConfig, RunConfig};
use aimv2_kit::nnprim::param_checksum;
use aimv2_kit::trainer::{load_checkpoint, train, TrainOptions};

fn main() -> aimv2_kit::Result<()> {
    let root = std::env::temp_dir().join(format!("aimv2-kit-resume-{}", std::process::id()));
    let config = |name: &str| {
        let mut cfg = RunConfig::desk(ModelPreset::DeskTiny, 11);
        cfg.optim = OptimConfig::desk(3e-3, 10, 100);
        cfg.data.train_pairs = Some(64);
        cfg.checkpoint_dir = root.join(name);
        cfg
    };

    let full = train(&config("full"), &TrainOptions::default())?;
    let cfg = config("split");
    let first = train(
        &cfg,
        &TrainOptions {
            stop_after: Some(50),
            ..Default::default()
        },
    )?;
    let ckpt = first.last_checkpoint.clone().expect("checkpoint at step 50");
    let header = load_checkpoint(&ckpt)?;
    println!(
        "checkpoint {} at step {} ({} arrays, config {:016x})",
        ckpt.display(),
        header.step,
        header.arrays.len(),
        header.config_hash
    );
    let second = train(
        &cfg,
        &TrainOptions {
            resume: Some(ckpt),
            ..Default::default()
        },
    )?;

    let (a, b) = (param_checksum(&full.state.model), param_checksum(&second.state.model));
    println!("uninterrupted: {a:08x}  resumed: {b:08x}  identical: {}", full.state == second.state);
    Ok(())
}
