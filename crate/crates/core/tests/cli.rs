use std::fs;
use std::path::{Path, PathBuf};

use rlforge::cli::{render_report, run_command, TrainSummary};

const TINY: &str = r#"
seed = 1

[policy]
hidden_dim = 12
pos_features = 8
text_embedding_dim = 8

[sft]
steps = 20
corpus_size = 40

[reward_model]
hidden_dim = 12
pos_features = 8
n_pairs = 60
held_out = 10
steps = 20

[run]
steps = 3
eval_every = 2
diversity_eval_items = 2

[run.train]
batch_size = 2
group_size = 4
t_max = 40

[data]
train_size = 10
test_size = 4
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train_into(cfg: &Path, root: &Path, seed: &str) -> PathBuf {
    assert_eq!(run_command(["rlforge", "train", "--config", s(cfg), "--out-dir", s(root), "--seed", seed]), 0);
    let name = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().ends_with(&format!("-s{seed}")))
        .unwrap();
    name
}

#[test]
fn train_writes_run_directory_and_report_reads_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "asr.toml", TINY);
    let root = tmp.path().join("runs");
    let a = train_into(&cfg, &root, "1");
    let b = train_into(&cfg, &root, "2");
    let prefix = |p: &Path| p.file_name().unwrap().to_string_lossy().split('-').next().unwrap().to_string();
    assert_eq!(prefix(&a), prefix(&b), "seeds of one config share the hash prefix");
    for f in [
        "config.json",
        "metrics.csv",
        "report.json",
        "baseline.json",
        "final.json",
        "best.json",
        "utterances_baseline.jsonl",
        "utterances_final.jsonl",
        "run.log",
    ] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), rlforge::trainer::METRICS_HEADER);
    assert_eq!(csv.lines().count(), 1 + 1 + 3);

    let r = render_report(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows[0].method, "-");
    assert!(r.table.contains("WER") && r.table.contains("Ins") && r.table.contains("Del"));
    let curve = fs::read_to_string(a.join("eval_curve.csv")).unwrap();
    let steps: Vec<usize> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 2, 3]);

    // rows come from the utterance logs; tampering with them is caught
    let summary: TrainSummary = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(summary.seed, 1);
    let logs = fs::read_to_string(a.join("utterances_final.jsonl")).unwrap();
    let first = logs.lines().next().unwrap().to_string();
    fs::write(a.join("utterances_final.jsonl"), logs.replacen(&first, "", 1)).unwrap();
    assert_eq!(run_command(["rlforge", "report", "--run-dir", s(&a)]), 2);

    // incomplete run
    fs::remove_file(b.join("report.json")).unwrap();
    assert_eq!(run_command(["rlforge", "report", "--run-dir", s(&b)]), 2);
}

#[test]
fn tts_report_has_tts_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace("[run]\n", "[run]\ntask = \"tts\"\nmethod = \"combined_filtered\"\n");
    let cfg = write(tmp.path(), "tts.toml", &text);
    let dir = train_into(&cfg, &tmp.path().join("runs"), "1");
    assert!(dir.join("reward_model.json").is_file());
    let r = render_report(&[dir]).unwrap();
    for col in ["R_ASR", "duration", "diversity"] {
        assert!(r.table.contains(col), "{col}");
    }
    assert!(r.rows.iter().all(|row| row.r_asr.is_some()));
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", "[run]\nstepz = 3\n");
    assert_eq!(run_command(["rlforge", "train", "--config", s(&bad)]), 1);
    let tts_grpo_diffro = write(tmp.path(), "x.toml", "[run]\ntask = \"asr\"\nmethod = \"diffro\"\n");
    assert_eq!(run_command(["rlforge", "train", "--config", s(&tts_grpo_diffro)]), 1);
    let weights = write(
        tmp.path(),
        "w.toml",
        "[[run.mix]]\nsubset = \"D0\"\nweight = 0.5\n[[run.mix]]\nsubset = \"D1\"\nweight = 0.4\n",
    );
    assert_eq!(run_command(["rlforge", "train", "--config", s(&weights)]), 1);
    assert_eq!(run_command(["rlforge", "gen-data", "--subset", "D9", "--n", "3", "--out", "x"]), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        &format!("{TINY}\n[paths]\nbaseline = \"missing.json\"\n"),
    );
    assert_eq!(run_command(["rlforge", "train", "--config", s(&cfg), "--out-dir", s(tmp.path())]), 2);
}

#[test]
fn eval_refuses_world_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", TINY);
    let other = write(tmp.path(), "o.toml", "[world]\nseed = 99\n");
    let ckpt = tmp.path().join("p.json");
    assert_eq!(run_command(["rlforge", "pretrain-policy", "--config", s(&cfg), "--out", s(&ckpt)]), 0);
    let same = tmp.path().join("same.jsonl");
    let diff = tmp.path().join("diff.jsonl");
    assert_eq!(run_command(["rlforge", "gen-data", "--subset", "D0", "--n", "5", "--out", s(&same)]), 0);
    assert_eq!(
        run_command(["rlforge", "gen-data", "--config", s(&other), "--subset", "D0", "--n", "5", "--out", s(&diff)]),
        0
    );
    let out = tmp.path().join("eval.json");
    assert_eq!(
        run_command(["rlforge", "eval", "--checkpoint", s(&ckpt), "--testset", s(&same), "--out", s(&out)]),
        0
    );
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["utterances"].as_array().unwrap().len(), 5);
    assert_eq!(run_command(["rlforge", "eval", "--checkpoint", s(&ckpt), "--testset", s(&diff)]), 1);
}

#[test]
fn score_applies_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(
        tmp.path(),
        "pairs.jsonl",
        concat!(
            "{\"id\":\"a\",\"reference\":[4,5,6,7],\"hypothesis\":[4,5,6,7]}\n",
            "{\"id\":\"b\",\"reference\":[4,5,6,7],\"hypothesis\":[4,9,9,9,9,6,7]}\n",
        ),
    );
    let out = tmp.path().join("scores.jsonl");
    assert_eq!(
        run_command(["rlforge", "score", "--input", s(&input), "--rules", "R1,R2", "--out", s(&out)]),
        0
    );
    let rows: Vec<serde_json::Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows[0]["combined"], 1.0);
    assert_eq!(rows[1]["flagged"], true);
    assert_eq!(rows[1]["combined"], -1.0);
    assert_eq!(rows[1]["insertions"], 3);
    let bad = write(tmp.path(), "bad.jsonl", "{\"reference\":[],\"hypothesis\":[1]}\n");
    assert_eq!(run_command(["rlforge", "score", "--input", s(&bad)]), 1);
}

#[test]
fn pipeline_sweep_and_custom_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("asr");
    assert_eq!(
        run_command([
            "rlforge",
            "simulate-pipeline",
            "--preset",
            "asr",
            "--out",
            s(&out),
            "--sweep",
            "rollout.per_item_cost",
            "--values",
            "0.01,0.055,0.1",
        ]),
        0
    );
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let cfg = write(
        tmp.path(),
        "p.toml",
        r#"
batch = 4
audio_seconds = 100.0

[[stages]]
name = "rollout"
fixed_latency = 1.0
per_item_cost = 0.5
items = 4.0

[[stages]]
name = "policy_update"
fixed_latency = 1.0
per_item_cost = 0.0
items = 0.0
"#,
    );
    assert_eq!(run_command(["rlforge", "simulate-pipeline", "--config", s(&cfg), "--out", s(&tmp.path().join("c"))]), 0);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("c/report.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["total"], 4.0);
    let typo = write(tmp.path(), "t.toml", "batch = 4\naudio_secs = 1.0\nstages = []\n");
    assert_eq!(run_command(["rlforge", "simulate-pipeline", "--config", s(&typo)]), 1);
}
