//! Supervised pretraining of an ASR policy on the toy world, with held-out WER.
//!
//! cargo run --example pretrain_policy -- [steps]

use std::time::Instant;

use rlforge::policy::{sft_pairs, sft_pretrain, Policy, PolicyConfig, SftConfig};
use rlforge::rewards::{eval_metrics, HallucinationParams, SplitThresholds};
use rlforge::world::{build_world, generate_default, DatasetRequest, Subset, Task, WorldSpec, TEXT_EOS, ACOUSTIC_EOS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let world = build_world(&WorldSpec::default())?;
    let train = generate_default(&world, &DatasetRequest::new(Subset::D0, 400, 1).id_prefix("train-"))?;
    let test = generate_default(&world, &DatasetRequest::new(Subset::D0, 100, 2).id_prefix("test-"))?;

    let mut policy = Policy::init(&world, Task::Asr, &PolicyConfig::default(), 0)?;
    let report = |p: &Policy| {
        eval_metrics(
            &p.transcriber(64),
            &test,
            TEXT_EOS,
            ACOUSTIC_EOS,
            &world.keywords,
            SplitThresholds::default(),
            &HallucinationParams::default(),
        )
    };
    println!("random init WER {:.4}", report(&policy)?.overall.wer());
    let pairs = sft_pairs(&train, Task::Asr, &world)?;
    let start = Instant::now();
    let curve = sft_pretrain(&mut policy, &pairs, &SftConfig { steps, ..Default::default() })?;
    for (i, l) in curve.iter().enumerate().step_by((steps / 10).max(1)) {
        println!("step {i:4} loss {l:.4}");
    }
    let m = report(&policy)?;
    println!(
        "after {steps} steps ({:.1}s): WER {:.4} ins {:.4} del {:.4}",
        start.elapsed().as_secs_f64(),
        m.overall.wer(),
        m.overall.ins(),
        m.overall.del()
    );
    Ok(())
}
