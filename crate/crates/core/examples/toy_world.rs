//! Builds the synthetic world, renders one utterance through the noisy
//! channel, and prints per-subset statistics of generated datasets.
//!
//! cargo run --release --example toy_world -- [n]

use rlforge::rewards::{strip_eos, wer};
use rlforge::seed::rng;
use rlforge::world::{build_world, generate_default, DatasetRequest, Subset, WorldSpec, ACOUSTIC_EOS, TEXT_EOS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let world = build_world(&WorldSpec::default())?;
    println!(
        "text vocab {}, acoustic vocab {}, {} keywords",
        world.text_vocab(),
        world.acoustic_vocab(),
        world.keywords.len()
    );

    let text = world.random_text(&mut rng(7), 1.0);
    let clean = world.render(&text)?;
    let noisy = world.apply_channel(&clean, 7);
    let back = world.invert(&noisy);
    println!("text     {:?}", strip_eos(&text, TEXT_EOS));
    println!("clean    {:?}", strip_eos(&clean, ACOUSTIC_EOS));
    println!("noisy    {:?}", strip_eos(&noisy, ACOUSTIC_EOS));
    println!("inverted {:?}", back);
    let pitch = world.f0_of(strip_eos(&clean, ACOUSTIC_EOS))?;
    println!("pitch std {:.3}", pitch.std());

    for subset in [Subset::D0, Subset::D1, Subset::D2, Subset::D3] {
        let samples = generate_default(&world, &DatasetRequest::new(subset, n, 1))?;
        let (mut len, mut kw, mut errs, mut words) = (0usize, 0usize, 0usize, 0usize);
        for s in &samples {
            let t = strip_eos(&s.text, TEXT_EOS);
            len += t.len();
            kw += s.keywords.len();
            let w = wer(t, &world.invert(&s.condition))?;
            errs += w.errors();
            words += w.ref_len;
        }
        println!(
            "{subset}: {} samples, mean length {:.2}, keywords/utt {:.2}, codebook-inversion WER {:.3}",
            samples.len(),
            len as f64 / samples.len() as f64,
            kw as f64 / samples.len() as f64,
            errs as f64 / words.max(1) as f64
        );
    }
    Ok(())
}
