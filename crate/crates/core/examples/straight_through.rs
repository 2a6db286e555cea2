//! Gumbel-softmax straight-through sampling and a DiffRO gradient through
//! a frozen recognizer.
//!
//! cargo run --release --example straight_through

use rlforge::autodiff::Graph;
use rlforge::diffro::{diffro_loss_gumbel, diffro_reward_tokens, gumbel_rollout, gumbel_softmax_st, RewardModel, RewardModelConfig};
use rlforge::policy::{Policy, PolicyConfig};
use rlforge::world::{build_world, Task, WorldSpec, TEXT_EOS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let logits = [0.0, 1.0, 2.0];
    let frame = gumbel_softmax_st(&logits, 0.5, 3);
    println!("hard {}  soft {:.3?}  forward {:?}", frame.hard, frame.soft, frame.forward());
    let n = 20_000;
    let mut counts = [0usize; 3];
    for s in 0..n {
        counts[gumbel_softmax_st(&logits, 1.0, s).hard] += 1;
    }
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    for (i, c) in counts.iter().enumerate() {
        println!("token {i}: sampled {:.3}  softmax {:.3}", *c as f64 / n as f64, logits[i].exp() / z);
    }

    let world = build_world(&WorldSpec::default())?;
    let rm = RewardModel::init(&world, &RewardModelConfig::default())?;
    let policy = Policy::init(&world, Task::Tts, &PolicyConfig::default(), 0)?;
    let text = [5, 9, 12, TEXT_EOS];
    let ro = gumbel_rollout(&policy, &text, 1.0, 24, 0)?;
    let mut g = Graph::new();
    let pl = policy.decoder.leaves(&mut g, "", true);
    let rl = rm.leaves(&mut g);
    let loss = diffro_loss_gumbel(&mut g, &pl, &rl, &policy, &rm, &text, &ro, 1.0)?;
    let mut b = policy.bindings();
    rm.bind(&mut b);
    let eval = g.evaluate(&b)?;
    let grads = g.gradient(&eval, loss)?;
    println!(
        "rollout of {} tokens: reward {:.4} (hard path {:.4}); policy grad norm {:.4}; recognizer parameters with gradients: {}",
        ro.tokens.len(),
        -eval.scalar(loss),
        diffro_reward_tokens(&rm, &ro.tokens, &text)?,
        grads.norm(),
        grads.grads.keys().filter(|k| k.starts_with("rm/")).count()
    );
    Ok(())
}
