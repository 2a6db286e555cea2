//! Drives the command-line verbs in-process: a small TTS run under two
//! methods, then the ablation table over both run directories.
//!
//! cargo run --release --example experiment_cli -- [out_dir]

use rlforge::cli::{render_report, run_command};

const CONFIG: &str = r#"
seed = 0

[sft]
steps = 150

[run]
task = "tts"
steps = 20
eval_every = 10

[run.train]
learning_rate = 3e-4

[data]
test_size = 20
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    std::fs::create_dir_all(&out)?;
    let base = format!("{out}/base.toml");
    std::fs::write(&base, CONFIG)?;
    let rm = format!("{out}/reward_model.json");
    if run_command(["rlforge", "pretrain-reward", "--config", &base, "--out", &rm]) != 0 {
        return Err("pretrain-reward failed".into());
    }
    let mut dirs = Vec::new();
    for method in ["grpo", "combined_filtered"] {
        let cfg = format!("{out}/{method}.toml");
        std::fs::write(
            &cfg,
            format!("include = \"base.toml\"\n[run]\nmethod = \"{method}\"\n[paths]\nreward_model = \"reward_model.json\"\n"),
        )?;
        let runs = format!("{out}/runs");
        if run_command(["rlforge", "train", "--config", &cfg, "--out-dir", &runs]) != 0 {
            return Err(format!("train {method} failed").into());
        }
        let newest = std::fs::read_dir(&runs)?
            .filter_map(Result::ok)
            .max_by_key(|e| e.metadata().and_then(|m| m.modified()).ok())
            .ok_or("no run directory")?;
        dirs.push(newest.path());
    }
    print!("{}", render_report(&dirs)?.table);
    Ok(())
}
