//! Closed-form timing model of one training step when every stage takes
//! turns on a single exclusive device pool.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage}: {field} must be a finite non-negative number, got {value}")]
    NegativeCost { stage: String, field: &'static str, value: f64 },
    #[error("no stages configured")]
    NoStages,
    #[error("audio seconds per step must be positive, got {0}")]
    NoAudio(f64),
    #[error("unknown sweep parameter {0:?}")]
    UnknownParameter(String),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Encode,
    Rollout,
    DecodeVocode,
    Reward,
    PolicyUpdate,
    WeightSync,
    DeviceSwitch,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Encode,
        StageName::Rollout,
        StageName::DecodeVocode,
        StageName::Reward,
        StageName::PolicyUpdate,
        StageName::WeightSync,
        StageName::DeviceSwitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Encode => "encode",
            StageName::Rollout => "rollout",
            StageName::DecodeVocode => "decode_vocode",
            StageName::Reward => "reward",
            StageName::PolicyUpdate => "policy_update",
            StageName::WeightSync => "weight_sync",
            StageName::DeviceSwitch => "device_switch",
        }
    }

    /// Overhead stages that do no model work.
    pub fn is_overhead(self) -> bool {
        matches!(self, StageName::WeightSync | StageName::DeviceSwitch)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    #[serde(default)]
    pub fixed_latency: f64,
    #[serde(default)]
    pub per_item_cost: f64,
    #[serde(default)]
    pub items: f64,
}

impl StageSpec {
    pub fn new(name: StageName, fixed_latency: f64, per_item_cost: f64, items: f64) -> Self {
        Self {
            name,
            fixed_latency,
            per_item_cost,
            items,
        }
    }

    pub fn duration(&self) -> f64 {
        self.fixed_latency + self.per_item_cost * self.items
    }

    fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("fixed_latency", self.fixed_latency),
            ("per_item_cost", self.per_item_cost),
            ("items", self.items),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(PipelineError::NegativeCost {
                    stage: self.name.to_string(),
                    field,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// One exclusive hold of the device pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub stage: StageName,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: StageName,
    pub duration: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageTiming>,
    pub total: f64,
    pub leases: Vec<Lease>,
    pub rtf: f64,
    pub audio_seconds_per_step: f64,
}

impl PipelineReport {
    /// Fraction of the step spent on weight sync and device switches.
    pub fn overhead_share(&self) -> f64 {
        self.stages.iter().filter(|s| s.name.is_overhead()).map(|s| s.share).sum()
    }

    /// Stage with the largest duration (first on ties).
    pub fn dominant_stage(&self) -> Option<StageName> {
        self.stages
            .iter()
            .fold(None::<&StageTiming>, |best, s| match best {
                Some(b) if b.duration >= s.duration => Some(b),
                _ => Some(s),
            })
            .map(|s| s.name)
    }

    pub fn duration_of(&self, name: StageName) -> f64 {
        self.stages.iter().filter(|s| s.name == name).map(|s| s.duration).sum()
    }

    /// `stage,start,end,duration,share` rows in lease order.
    pub fn write_breakdown_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "stage,start,end,duration,share")?;
        for (l, s) in self.leases.iter().zip(&self.stages) {
            writeln!(out, "{},{},{},{},{}", l.stage, l.start, l.end, s.duration, s.share)?;
        }
        Ok(())
    }
}

/// Leases the pool to each stage in order; the next lease starts where the
/// previous one ended.
pub fn simulate_step(stages: &[StageSpec], audio_seconds: f64) -> Result<PipelineReport> {
    if stages.is_empty() {
        return Err(PipelineError::NoStages);
    }
    if !(audio_seconds > 0.0 && audio_seconds.is_finite()) {
        return Err(PipelineError::NoAudio(audio_seconds));
    }
    for s in stages {
        s.validate()?;
    }
    let mut clock = 0.0;
    let mut leases = Vec::with_capacity(stages.len());
    for s in stages {
        let start = clock;
        clock += s.duration();
        leases.push(Lease {
            stage: s.name,
            start,
            end: clock,
        });
    }
    let total = clock;
    let share = |d: f64| if total > 0.0 { d / total } else { 0.0 };
    Ok(PipelineReport {
        stages: stages
            .iter()
            .map(|s| StageTiming {
                name: s.name,
                duration: s.duration(),
                share: share(s.duration()),
            })
            .collect(),
        total,
        leases,
        rtf: total / audio_seconds,
        audio_seconds_per_step: audio_seconds,
    })
}

/// True iff leases are ordered, non-overlapping and follow `order`.
pub fn validate_exclusive(report: &PipelineReport, order: &[StageName]) -> bool {
    if report.leases.len() != order.len() || report.leases.iter().zip(order).any(|(l, &n)| l.stage != n) {
        return false;
    }
    report.leases.iter().all(|l| l.start <= l.end) && report.leases.windows(2).all(|w| w[0].end <= w[1].start)
}

/// A stage list with its workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Sequences per step; `items` of every stage are counts at this batch.
    pub batch: usize,
    pub audio_seconds: f64,
    pub stages: Vec<StageSpec>,
}

impl PipelineConfig {
    pub fn simulate(&self) -> Result<PipelineReport> {
        simulate_step(&self.stages, self.audio_seconds)
    }

    pub fn order(&self) -> Vec<StageName> {
        self.stages.iter().map(|s| s.name).collect()
    }

    /// ASR step: 32 utterances (about an hour of audio) with groups of 12.
    /// Only the 54.6 s total is published; the split is illustrative.
    pub fn asr_preset() -> Self {
        let responses = 32.0 * 12.0;
        Self {
            batch: 32,
            audio_seconds: 3600.0,
            stages: vec![
                StageSpec::new(StageName::Encode, 3.0, 0.1, 32.0),
                StageSpec::new(StageName::Rollout, 2.0, 0.055, responses),
                StageSpec::new(StageName::Reward, 0.5, 0.005, responses),
                StageSpec::new(StageName::PolicyUpdate, 2.0, 0.045, responses),
                StageSpec::new(StageName::WeightSync, 1.8, 0.0, 0.0),
                StageSpec::new(StageName::DeviceSwitch, 0.0, 0.445, 4.0),
            ],
        }
    }

    /// TTS step at batch 128; the flow-matching decoder and vocoder dominate.
    /// Only the 16.73 s total is published; the split and the audio
    /// duration (6 s per utterance) are illustrative.
    pub fn tts_preset() -> Self {
        Self {
            batch: 128,
            audio_seconds: 128.0 * 6.0,
            stages: vec![
                StageSpec::new(StageName::Rollout, 0.5, 0.02, 128.0),
                StageSpec::new(StageName::DecodeVocode, 0.3, 0.05, 128.0),
                StageSpec::new(StageName::Reward, 0.314, 0.012, 128.0),
                StageSpec::new(StageName::PolicyUpdate, 0.6, 0.025, 128.0),
                StageSpec::new(StageName::WeightSync, 0.6, 0.0, 0.0),
                StageSpec::new(StageName::DeviceSwitch, 0.0, 0.18, 4.0),
            ],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "asr" => Ok(Self::asr_preset()),
            "tts" => Ok(Self::tts_preset()),
            other => Err(PipelineError::UnknownPreset(other.to_string())),
        }
    }
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Rescales every stage's items by `value / batch`.
    Batch,
    AudioSeconds,
    FixedLatency(StageName),
    PerItemCost(StageName),
    Items(StageName),
}

impl FromStr for SweepParam {
    type Err = PipelineError;

    /// `batch`, `audio_seconds`, or `<stage>.<fixed_latency|per_item_cost|items>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => return Ok(SweepParam::Batch),
            "audio_seconds" => return Ok(SweepParam::AudioSeconds),
            _ => {}
        }
        let unknown = || PipelineError::UnknownParameter(s.to_string());
        let (stage, field) = s.split_once('.').ok_or_else(unknown)?;
        let stage: StageName = stage.parse().map_err(|_| unknown())?;
        match field {
            "fixed_latency" => Ok(SweepParam::FixedLatency(stage)),
            "per_item_cost" => Ok(SweepParam::PerItemCost(stage)),
            "items" => Ok(SweepParam::Items(stage)),
            _ => Err(unknown()),
        }
    }
}

impl PipelineConfig {
    /// Copy with one parameter replaced.
    pub fn with_param(&self, param: SweepParam, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let mut touched = false;
        match param {
            SweepParam::Batch => {
                let factor = value / self.batch as f64;
                for s in &mut c.stages {
                    s.items *= factor;
                }
                c.batch = value.round() as usize;
                touched = true;
            }
            SweepParam::AudioSeconds => {
                c.audio_seconds = value;
                touched = true;
            }
            SweepParam::FixedLatency(n) | SweepParam::PerItemCost(n) | SweepParam::Items(n) => {
                for s in c.stages.iter_mut().filter(|s| s.name == n) {
                    match param {
                        SweepParam::FixedLatency(_) => s.fixed_latency = value,
                        SweepParam::PerItemCost(_) => s.per_item_cost = value,
                        _ => s.items = value,
                    }
                    touched = true;
                }
            }
        }
        if !touched {
            return Err(PipelineError::UnknownParameter(format!("{param:?}")));
        }
        Ok(c)
    }
}

/// One report per value.
pub fn sweep(config: &PipelineConfig, param: SweepParam, values: &[f64]) -> Result<Vec<(f64, PipelineReport)>> {
    values
        .iter()
        .map(|&v| Ok((v, config.with_param(param, v)?.simulate()?)))
        .collect()
}

/// `value,total,rtf,<stage durations in order>` rows.
pub fn write_sweep_csv(out: &mut impl Write, rows: &[(f64, PipelineReport)]) -> std::io::Result<()> {
    let Some((_, first)) = rows.first() else {
        return writeln!(out, "value,total,rtf");
    };
    let names: Vec<String> = first.stages.iter().map(|s| s.name.to_string()).collect();
    writeln!(out, "value,total,rtf,{}", names.join(","))?;
    for (v, r) in rows {
        let d: Vec<String> = r.stages.iter().map(|s| s.duration.to_string()).collect();
        writeln!(out, "{v},{},{},{}", r.total, r.rtf, d.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_preset_totals() {
        let c = PipelineConfig::asr_preset();
        let r = c.simulate().unwrap();
        assert!((r.total - 54.6).abs() < 1e-9, "{}", r.total);
        assert!((r.rtf - 54.6 / 3600.0).abs() < 1e-15);
        assert_eq!(format!("{:.4}", r.rtf), "0.0152");
        assert!(r.overhead_share() < 0.10);
        assert!(validate_exclusive(&r, &c.order()));
    }

    #[test]
    fn tts_preset_totals() {
        let c = PipelineConfig::tts_preset();
        let r = c.simulate().unwrap();
        assert!((r.total - 16.73).abs() < 1e-9, "{}", r.total);
        assert_eq!(r.dominant_stage(), Some(StageName::DecodeVocode));
        assert!(r.overhead_share() < 0.10);
    }

    #[test]
    fn additivity_is_exact() {
        let r = PipelineConfig::asr_preset().simulate().unwrap();
        let mut sum = 0.0;
        for s in &r.stages {
            sum += s.duration;
        }
        assert_eq!(sum, r.total);
        assert_eq!(r.leases.last().unwrap().end, r.total);
    }

    #[test]
    fn degenerate_and_invalid() {
        let r = simulate_step(&[StageSpec::new(StageName::Encode, 0.0, 0.0, 0.0)], 10.0).unwrap();
        assert_eq!((r.total, r.rtf), (0.0, 0.0));
        assert!(simulate_step(&[StageSpec::new(StageName::Encode, -1.0, 0.0, 0.0)], 1.0).is_err());
        assert!(simulate_step(&[], 1.0).is_err());
        assert!(simulate_step(&[StageSpec::new(StageName::Encode, 1.0, 0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn validator_rejects_overlap_and_reordering() {
        let c = PipelineConfig::tts_preset();
        let mut r = c.simulate().unwrap();
        let mut order = c.order();
        order.swap(0, 1);
        assert!(!validate_exclusive(&r, &order));
        r.leases[1].start -= 0.5;
        assert!(!validate_exclusive(&r, &c.order()));
    }

    #[test]
    fn batch_sweep_is_linear() {
        let c = PipelineConfig::tts_preset();
        let rows = sweep(&c, SweepParam::Batch, &[64.0, 128.0, 256.0]).unwrap();
        for s in &c.stages {
            let d: Vec<f64> = rows.iter().map(|(_, r)| r.duration_of(s.name) - s.fixed_latency).collect();
            assert!((d[1] - 2.0 * d[0]).abs() < 1e-12 && (d[2] - 2.0 * d[1]).abs() < 1e-12);
        }
        let audio = sweep(&c, SweepParam::AudioSeconds, &[100.0, 200.0]).unwrap();
        assert!((audio[0].1.rtf - 2.0 * audio[1].1.rtf).abs() < 1e-15);
    }

    #[test]
    fn params_parse() {
        assert_eq!("batch".parse::<SweepParam>().unwrap(), SweepParam::Batch);
        assert_eq!(
            "reward.per_item_cost".parse::<SweepParam>().unwrap(),
            SweepParam::PerItemCost(StageName::Reward)
        );
        assert!("reward.colour".parse::<SweepParam>().is_err());
    }
}
