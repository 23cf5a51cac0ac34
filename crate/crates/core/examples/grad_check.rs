//! Finite-difference check of the full pre-training objective, reported
//! per parameter tensor.
//!
//! cargo run --release --example grad_check -- [seed] [all]
//!
//! Passing `all` checks every entry instead of a per-tensor sample.

use aimv2_kit::config::{preset_model, ModelPreset};
use aimv2_kit::objective::{full_model_check_options, pretrain_grad_check};

fn main() -> aimv2_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let mut opts = full_model_check_options(1e-5, seed);
    if args.next().as_deref() == Some("all") {
        opts.max_entries = None;
    }
    let report = pretrain_grad_check(&preset_model(ModelPreset::DeskTiny), seed, &opts)?;
    for p in &report.params {
        println!("{:<40} {:>6} entries  max rel err {:.2e}", p.name, p.checked, p.max_rel_error);
    }
    println!("max {:.3e} tol {:.0e}: {}", report.max_rel_error, report.tol, if report.passed { "PASS" } else { "FAIL" });
    Ok(())
}
