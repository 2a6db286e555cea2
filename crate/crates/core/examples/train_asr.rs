//! GRPO fine-tuning of a pretrained ASR policy on the toy world.
//!
//! cargo run --release --example train_asr -- [rules] [subset] [steps] [seed]
//! e.g. `-- R1,R2 D1 100 0`

use std::time::Instant;

use rlforge::policy::{sft_pairs, sft_pretrain, Policy, PolicyConfig, SftConfig, TrainConfig};
use rlforge::rewards::RuleSet;
use rlforge::trainer::{evaluate, train, MixEntry, Method, RunConfig, TrainData, TrainInputs};
use rlforge::world::{build_world, generate_default, DatasetRequest, Subset, Task, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rules: RuleSet = args.first().map(|s| s.parse()).transpose()?.unwrap_or(RuleSet::R1);
    let subset: Subset = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(Subset::D0);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);

    let world = build_world(&WorldSpec::default())?;
    let sft = generate_default(&world, &DatasetRequest::new(Subset::D0, 400, 1).keyword_weight(0.1).id_prefix("sft-"))?;
    let rl = generate_default(&world, &DatasetRequest::new(subset, 200, 3).keyword_weight(0.1).id_prefix("rl-"))?;
    let test = generate_default(&world, &DatasetRequest::new(Subset::D0, 100, 2).keyword_weight(0.1).id_prefix("test-"))?;
    // same codebook, three times the channel noise
    let mut loud = world.clone();
    loud.spec.p_sub *= 3.0;
    loud.spec.p_ins *= 3.0;
    loud.spec.p_del *= 3.0;
    let noisy_test = generate_default(&loud, &DatasetRequest::new(Subset::D0, 200, 4).id_prefix("noisy-"))?;
    let keyword_test = generate_default(&world, &DatasetRequest::new(Subset::D3, 100, 5).id_prefix("kw-"))?;

    let t0 = Instant::now();
    let mut baseline = Policy::init(&world, Task::Asr, &PolicyConfig::default(), seed)?;
    sft_pretrain(&mut baseline, &sft_pairs(&sft, Task::Asr, &world)?, &SftConfig { seed, ..Default::default() })?;
    println!("pretrained in {:.1}s", t0.elapsed().as_secs_f64());

    let config = RunConfig {
        task: Task::Asr,
        method: Method::Grpo,
        rules,
        mix: vec![MixEntry { subset, weight: 1.0 }],
        train: TrainConfig { seed, ..Default::default() },
        steps,
        eval_every: (steps / 5).max(1),
        ..Default::default()
    };
    let t1 = Instant::now();
    let out = train(TrainInputs {
        world: &world,
        config: &config,
        baseline: &baseline,
        reward_model: None,
        data: &TrainData::new(rl),
        testset: &test,
    })?;
    for e in &out.report.evals {
        println!(
            "step {:4}  WER {:.4}  ins {:.4}  del {:.4}  hall {:.3}  kw-recall {:.3}",
            e.step, e.wer, e.ins, e.del, e.hallucination_rate, e.keyword_recall
        );
    }
    for (name, p) in [("baseline", &baseline), ("final", &out.policy)] {
        let e = evaluate(&world, p, None, &noisy_test, &config, 0)?;
        println!("noisy eval {name}: WER {:.4} hall {:.3}", e.wer, e.hallucination_rate);
        let k = evaluate(&world, p, None, &keyword_test, &config, 0)?;
        println!("keyword eval {name}: WER {:.4} kw-recall {:.3}", k.wer, k.keyword_recall);
    }
    let last = out.report.steps.last().cloned().unwrap_or_default();
    println!(
        "{steps} steps in {:.1}s; last reward {:.3} kl {:.4} clip {:.3}; best step {}",
        t1.elapsed().as_secs_f64(),
        last.reward_mean,
        last.kl,
        last.clip_frac,
        out.report.best_step
    );
    Ok(())
}
