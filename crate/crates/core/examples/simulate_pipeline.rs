//! Step-time breakdown of the alternating rollout/training pipeline for
//! both presets, plus a batch-size sweep.
//!
//! cargo run --release --example simulate_pipeline -- [asr|tts]

use rlforge::pipeline::{sweep, validate_exclusive, PipelineConfig, SweepParam};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "asr".into());
    let cfg = PipelineConfig::preset(&name)?;
    let report = cfg.simulate()?;
    for s in &report.stages {
        println!("{:<14} {:8.3} s  {:5.1}%", s.name.as_str(), s.duration, 100.0 * s.share);
    }
    println!(
        "total {:.2} s/step for {} s of audio: rtf {:.4}; sync+switch {:.1}%; exclusive {}",
        report.total,
        cfg.audio_seconds,
        report.rtf,
        100.0 * report.overhead_share(),
        validate_exclusive(&report, &cfg.order())
    );
    let batches = [8.0, 16.0, 32.0, 64.0, 128.0];
    for (batch, r) in sweep(&cfg, SweepParam::Batch, &batches)? {
        println!("batch {batch:>5}: {:7.2} s/step  rtf {:.4}", r.total, r.rtf);
    }
    Ok(())
}
