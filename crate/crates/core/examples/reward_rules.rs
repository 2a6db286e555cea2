//! Scores hypothesis variants of one reference under every ASR rule set and
//! shows the TTS duration and diversity rules on a small group.
//!
//! cargo run --release --example reward_rules

use rlforge::rewards::{score_asr, tts_diversity_reward, tts_duration_reward, wer, AsrRewardConfig, RuleSet};
use rlforge::world::{build_world, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = build_world(&WorldSpec::default())?;
    let k = world.keywords[0];
    let reference = vec![4, k, 6, 7, 8];
    let variants: [(&str, Vec<usize>); 5] = [
        ("exact", reference.clone()),
        ("substitution", vec![4, k, 6, 9, 8]),
        ("keyword dropped", vec![4, 6, 7, 8]),
        ("repetition loop", vec![4, k, 6, 6, 6, 6, 7, 8]),
        ("length explosion", [reference.clone(), reference.clone(), vec![5]].concat()),
    ];
    for rules in ["R1", "R1,R2", "R1,R3", "all"] {
        let cfg = AsrRewardConfig {
            rules: rules.parse::<RuleSet>()?,
            ..Default::default()
        };
        println!("{}", cfg.rules);
        for (name, hyp) in &variants {
            let w = wer(&reference, hyp)?;
            let (b, flags) = score_asr(&reference, hyp, &world.keywords, &cfg)?;
            println!(
                "  {name:<17} S/I/D {}/{}/{}  R1 {:+.3}  flagged {:<5}  combined {:+.3}",
                w.substitutions,
                w.insertions,
                w.deletions,
                b.r1,
                flags.any(),
                b.combined
            );
        }
    }

    let lengths = [8, 10, 12, 10, 30];
    println!("duration rewards for lengths {lengths:?}: {:?}", tts_duration_reward(&lengths)?);
    let group: Vec<Vec<usize>> = vec![vec![3, 5, 7, 9], vec![3, 5, 7, 9], vec![9, 7, 5, 3, 1]];
    let pitch = group.iter().map(|g| world.f0_of(g)).collect::<Result<Vec<_>, _>>()?;
    println!("diversity rewards: {:?}", tts_diversity_reward(&group, &pitch)?);
    Ok(())
}
