//! The pieces of the group-relative objective: advantages, the clipped
//! surrogate, the KL estimator, and one optimizer step on a sampled group.
//!
//! cargo run --release --example grpo_objective

use rlforge::autodiff::Graph;
use rlforge::grpo::{
    advantages, assign_rewards, batch_loss_graph, clipped_surrogate, diagnostics, kl_penalty, step, GrpoParams,
    DEFAULT_EPS_STD,
};
use rlforge::optim::Adam;
use rlforge::policy::{Policy, PolicyConfig, Role};
use rlforge::world::{build_world, Task, WorldSpec, TEXT_EOS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (adv, skippable) = advantages(&[1.0, 0.0, 0.5, 0.5], DEFAULT_EPS_STD)?;
    println!("advantages {adv:.3?} (skippable {skippable})");
    println!("all-equal group: {:?}", advantages(&[0.7; 4], DEFAULT_EPS_STD)?);
    for (r, a) in [(1.5, 1.0), (0.5, 1.0), (1.5, -1.0), (0.5, -1.0), (1.1, 2.0)] {
        println!("surrogate(r={r}, A={a:+}) = {:+.3}", clipped_surrogate(r, a, 0.2));
    }
    println!("KL(0.5 || 0.25) = {:.4}", kl_penalty(&[0.5f64.ln()], &[0.25f64.ln()])[0]);

    let world = build_world(&WorldSpec::default())?;
    let mut policy = Policy::init(&world, Task::Tts, &PolicyConfig::default(), 0)?;
    let mut snapshot = policy.copy_as(Role::Snapshot);
    let reference = policy.copy_as(Role::Reference);
    let mut group = snapshot.sample_group(&[5, 9, 12, TEXT_EOS], 6, 1.0, 12, 1)?;
    // reward shorter responses
    let rewards = group.responses.iter().map(|r| -(r.len() as f64)).collect();
    assign_rewards(&mut group, rewards, DEFAULT_EPS_STD)?;
    let params = GrpoParams::default();
    let mut opt = Adam::new(1e-2);
    for it in 0..5 {
        let mut g = Graph::new();
        let lv = policy.decoder.leaves(&mut g, "", true);
        let Some((loss, parts)) = batch_loss_graph(&mut g, &lv, &policy, &reference, &[group.clone()], &params, false)? else {
            break;
        };
        let d = diagnostics(&g.evaluate(&policy.bindings())?, &parts, &params);
        let (value, ..) = step(&mut opt, &mut policy, &mut snapshot, &g, loss)?;
        println!("update {it}: loss {value:+.4}  kl {:.5}  clipped {:.2}", d.kl_mean, d.clip_fraction);
    }
    Ok(())
}
