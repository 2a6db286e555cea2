//! TTS fine-tuning against the frozen recognizer: GRPO, DiffRO, and their
//! naive and filtered combinations.
//!
//! cargo run --release --example train_tts -- [method] [rules] [steps] [seed] [sft_steps] [lr]
//! e.g. `-- combined_filtered R1 100 0 150`

use std::time::Instant;

use rlforge::diffro::{pretrain_reward_model, RewardModelConfig};
use rlforge::policy::{sft_pairs, sft_pretrain, Policy, PolicyConfig, SftConfig, TrainConfig};
use rlforge::rewards::RuleSet;
use rlforge::trainer::{train, Method, RunConfig, TrainData, TrainInputs};
use rlforge::world::{build_world, generate_default, DatasetRequest, Subset, Task, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method: Method = args.first().map(|s| s.parse()).transpose()?.unwrap_or(Method::CombinedFiltered);
    let rules: RuleSet = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(RuleSet::R1);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let sft_steps: usize = args.get(4).map(|s| s.parse()).transpose()?.unwrap_or(150);
    let lr: f64 = args.get(5).map(|s| s.parse()).transpose()?.unwrap_or(TrainConfig::default().learning_rate);

    let world = build_world(&WorldSpec::default())?;
    let tts = |n, seed, prefix: &str| {
        generate_default(&world, &DatasetRequest::new(Subset::D0, n, seed).task(Task::Tts).id_prefix(prefix))
    };
    let (sft, rl, test) = (tts(400, 1, "sft-")?, tts(200, 3, "rl-")?, tts(50, 2, "test-")?);

    let t0 = Instant::now();
    let (rm, rm_report) = pretrain_reward_model(&world, &RewardModelConfig::default())?;
    let mut baseline = Policy::init(&world, Task::Tts, &PolicyConfig::default(), seed)?;
    let sft_cfg = SftConfig { steps: sft_steps, seed, ..Default::default() };
    sft_pretrain(&mut baseline, &sft_pairs(&sft, Task::Tts, &world)?, &sft_cfg)?;
    println!(
        "reward model acc {:.3}; policy pretrained; {:.1}s",
        rm_report.held_out_accuracy,
        t0.elapsed().as_secs_f64()
    );

    let config = RunConfig {
        task: Task::Tts,
        method,
        rules,
        train: TrainConfig { seed, learning_rate: lr, ..Default::default() },
        steps,
        eval_every: (steps / 5).max(1),
        ..Default::default()
    };
    let t1 = Instant::now();
    let out = train(TrainInputs {
        world: &world,
        config: &config,
        baseline: &baseline,
        reward_model: Some(&rm),
        data: &TrainData::new(rl),
        testset: &test,
    })?;
    for e in &out.report.evals {
        println!(
            "step {:4}  R_ASR {:8.4}  WER {:.4}  len {:.2}  drift {:.4}  sampled drift {:.4}  diversity {:.4}",
            e.step,
            e.r_asr.unwrap_or(f64::NAN),
            e.wer,
            e.mean_len.unwrap_or(f64::NAN),
            e.length_drift.unwrap_or(f64::NAN),
            e.sampled_length_drift.unwrap_or(f64::NAN),
            e.diversity.unwrap_or(f64::NAN)
        );
    }
    let r = &out.report;
    let window = (steps / 5).max(1);
    for chunk in r.steps.chunks(window) {
        let mean = chunk.iter().map(|s| s.reward_mean).sum::<f64>() / chunk.len() as f64;
        let sel = chunk.iter().map(|s| s.diffro_selected).sum::<usize>() as f64 / chunk.len() as f64;
        println!("steps {:4}..{:4}  train reward {:8.4}  diffro responses/step {:.1}", chunk[0].step, chunk[chunk.len() - 1].step, mean, sel);
    }
    println!(
        "{method} {rules}: {steps} steps in {:.1}s; best step {} R_ASR {:.4}; stability marker {:?}",
        t1.elapsed().as_secs_f64(),
        r.best_step,
        r.best().r_asr.unwrap_or(f64::NAN),
        r.stability_step
    );
    Ok(())
}
