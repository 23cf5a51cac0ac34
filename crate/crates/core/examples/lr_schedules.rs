//! Learning-rate schedules: cosine, half-cosine, half-cosine with its
//! linear cooldown, and a cooldown branched from an intermediate step.
//!
//! cargo run --example lr_schedules

use aimv2_kit::config::{OptimConfig, ScheduleKind};
use aimv2_kit::trainer::{cooldown_lr, lr_at_step, schedule_len};

fn main() -> aimv2_kit::Result<()> {
    for kind in [ScheduleKind::Cosine, ScheduleKind::HalfCosine, ScheduleKind::HalfCosineCooldown] {
        let optim = OptimConfig {
            schedule: kind,
            ..OptimConfig::desk(1e-3, 100, 1000)
        };
        let len = schedule_len(&optim);
        let marks = [0, 50, 100, 400, 700, 1000, 1100, 1200];
        let row: Vec<String> = marks
            .iter()
            .filter(|&&t| t <= len)
            .map(|&t| Ok(format!("{t}:{:.3e}", lr_at_step(t, &optim)?)))
            .collect::<aimv2_kit::Result<_>>()?;
        println!("{kind:?} ({len} steps)\n  {}", row.join("  "));
    }

    let optim = OptimConfig {
        schedule: ScheduleKind::HalfCosine,
        ..OptimConfig::desk(1e-3, 100, 1000)
    };
    let from = 600;
    let end = from + OptimConfig::cooldown_steps(from);
    println!(
        "cooldown branched at {from}: {:.3e} -> {:.3e} at step {end}",
        cooldown_lr(from, from, &optim)?,
        cooldown_lr(from, end, &optim)?
    );
    Ok(())
}
