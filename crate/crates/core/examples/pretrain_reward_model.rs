//! Trains the frozen token-level recognizer used by DiffRO and reports its
//! held-out teacher-forced accuracy, clean and noisy.
//!
//! cargo run --release --example pretrain_reward_model -- [steps]

use std::time::Instant;

use rlforge::diffro::{pretrain_reward_model, reward_model_pairs, RewardModelConfig};
use rlforge::policy::teacher_forced_accuracy;
use rlforge::world::{build_world, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(600);
    let world = build_world(&WorldSpec::default())?;
    let cfg = RewardModelConfig { steps, ..Default::default() };
    let start = Instant::now();
    let (rm, report) = pretrain_reward_model(&world, &cfg)?;
    let n = report.loss_curve.len();
    println!(
        "{steps} steps in {:.1}s, loss {:.4} -> {:.4}",
        start.elapsed().as_secs_f64(),
        report.loss_curve.first().copied().unwrap_or(f64::NAN),
        report.loss_curve[n.saturating_sub(20)..].iter().sum::<f64>() / 20f64.min(n as f64)
    );
    println!(
        "held-out accuracy {:.4} (target {:.2}: {})",
        report.held_out_accuracy,
        cfg.target_accuracy,
        if report.target_met { "met" } else { "NOT met" }
    );
    let clean = reward_model_pairs(&world, 100, 0.0, 99)?;
    let noisy = reward_model_pairs(&world, 100, 1.0, 99)?;
    println!("clean accuracy {:.4}", teacher_forced_accuracy(&rm.decoder, &clean)?);
    println!("noisy accuracy {:.4}", teacher_forced_accuracy(&rm.decoder, &noisy)?);
    Ok(())
}
