//! RL run orchestration: GRPO-only, DiffRO-only, naive combination and the
//! positive-advantage filtered combination, with scheduled evaluation and
//! stability tracking.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Bindings, Graph, NodeId};
use crate::diffro::{
    diffro_loss_gumbel, diffro_reward_tokens, gumbel_rollout, straight_through, GumbelRollout, RewardModel,
    RewardModelTranscriber,
};
use crate::grpo::{self, assign_rewards, batch_loss_graph, GroupLoss, GrpoDiagnostics, GrpoError, GrpoParams};
use crate::optim::Adam;
use crate::policy::{sync_weights, DecoderLeaves, Policy, PolicyError, Role, RolloutGroup, TrainConfig};
use crate::rewards::{
    combine_asr_rewards, detect_hallucination, eval_metrics, keyword_reward, strip_eos, tts_diversity_reward,
    tts_duration_reward, wer, EvalMetrics, HallucinationParams, RewardError, RuleSet, RuleWeights, SplitThresholds,
    UtteranceResult,
};
use crate::seed::{derive_named, derive_seed, rng, Rng};
use crate::world::{Sample, Subset, Task, World, ACOUSTIC_EOS, TEXT_EOS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("train and test sets share sample id {0}")]
    Overlap(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("io: {0}")]
    Io(String),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Policy(e.into())
    }
}

impl From<crate::optim::OptimError> for TrainError {
    fn from(e: crate::optim::OptimError) -> Self {
        TrainError::Policy(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Diffro,
    Combined,
    CombinedFiltered,
}

impl Method {
    pub fn uses_grpo(self) -> bool {
        self != Method::Diffro
    }

    pub fn uses_diffro(self) -> bool {
        self != Method::Grpo
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Grpo => "grpo",
            Method::Diffro => "diffro",
            Method::Combined => "combined",
            Method::CombinedFiltered => "combined_filtered",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grpo" => Ok(Method::Grpo),
            "diffro" => Ok(Method::Diffro),
            "combined" => Ok(Method::Combined),
            "combined_filtered" => Ok(Method::CombinedFiltered),
            _ => Err(format!("unknown method {s:?}")),
        }
    }
}

/// One data subset and its draw probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub subset: Subset,
    pub weight: f64,
}

/// Everything that defines an RL run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub method: Method,
    pub rules: RuleSet,
    pub rule_weights: RuleWeights,
    pub hallucination: HallucinationParams,
    pub mix: Vec<MixEntry>,
    pub train: TrainConfig,
    pub steps: usize,
    pub eval_every: usize,
    /// Relative degradation from the best eval that marks instability.
    pub degrade_threshold: f64,
    /// Test items used for the TTS group-diversity metric.
    pub diversity_eval_items: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Asr,
            method: Method::Grpo,
            rules: RuleSet::R1,
            rule_weights: RuleWeights::default(),
            hallucination: HallucinationParams::default(),
            mix: vec![MixEntry {
                subset: Subset::D0,
                weight: 1.0,
            }],
            train: TrainConfig::default(),
            steps: 500,
            eval_every: 50,
            degrade_threshold: 0.2,
            diversity_eval_items: 16,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Incompatible(m));
        self.train.validate()?;
        if self.method.uses_diffro() && self.task != Task::Tts {
            return bad(format!("method {} needs TTS-style acoustic output", self.method));
        }
        if self.mix.is_empty() {
            return bad("mix must list at least one subset".into());
        }
        if self.mix.iter().any(|m| !(m.weight >= 0.0)) {
            return bad("mix weights must be non-negative".into());
        }
        let total: f64 = self.mix.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mix weights sum to {total}, expected 1"));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Training pools keyed by subset, drawn according to the mix.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub pools: BTreeMap<Subset, Vec<Sample>>,
}

impl TrainData {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut pools: BTreeMap<Subset, Vec<Sample>> = BTreeMap::new();
        for s in samples {
            pools.entry(s.subset).or_default().push(s);
        }
        Self { pools }
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.pools.values().flatten()
    }

    /// Draws a subset by the mixing weights, then a uniform sample from it.
    pub fn draw<'a>(&'a self, mix: &[MixEntry], r: &mut Rng) -> Result<&'a Sample> {
        let subset = draw_subset(mix, r.gen::<f64>());
        let pool = self
            .pools
            .get(&subset)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| TrainError::Incompatible(format!("no training samples for subset {subset}")))?;
        Ok(&pool[r.gen_range(0..pool.len())])
    }
}

/// Categorical choice over mix entries from a uniform `u` in `[0, 1)`.
pub fn draw_subset(mix: &[MixEntry], u: f64) -> Subset {
    let mut acc = 0.0;
    for m in mix {
        acc += m.weight;
        if u < acc {
            return m.subset;
        }
    }
    mix.iter().rev().find(|m| m.weight > 0.0).unwrap_or(&mix[mix.len() - 1]).subset
}

/// Indices with positive advantage whose response is valid.
pub fn filter_positive(group: &RolloutGroup) -> Vec<usize> {
    let Some(adv) = &group.advantages else {
        return Vec::new();
    };
    adv.iter()
        .enumerate()
        .filter(|&(i, &a)| a > 0.0 && group.validity.get(i).copied().unwrap_or(false))
        .map(|(i, _)| i)
        .collect()
}

/// Rule-based scoring for one task.
pub struct Scorer<'a> {
    pub world: &'a World,
    pub rm: Option<&'a RewardModel>,
    pub rules: RuleSet,
    pub weights: RuleWeights,
    pub hallucination: HallucinationParams,
    pub t_max: usize,
}

/// Per-response scores of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub rewards: Vec<f64>,
    pub flagged: Vec<bool>,
}

impl Scorer<'_> {
    pub fn score(&self, task: Task, sample: &Sample, group: &RolloutGroup) -> Result<GroupScores> {
        match task {
            Task::Asr => self.score_asr(sample, group),
            Task::Tts => self.score_tts(sample, group),
        }
    }

    fn score_asr(&self, sample: &Sample, group: &RolloutGroup) -> Result<GroupScores> {
        let reference = strip_eos(&sample.text, TEXT_EOS);
        let mut out = GroupScores {
            rewards: Vec::new(),
            flagged: Vec::new(),
        };
        for i in 0..group.size() {
            let hyp = group.stripped(i, TEXT_EOS);
            let r1 = 1.0 - wer(reference, hyp)?.wer;
            let flags = detect_hallucination(reference, hyp, &self.hallucination);
            let r3 = keyword_reward(reference, hyp, &self.world.keywords);
            out.rewards
                .push(combine_asr_rewards(r1, &flags, r3, self.rules, &self.weights).combined);
            out.flagged.push(flags.any());
        }
        Ok(out)
    }

    fn score_tts(&self, sample: &Sample, group: &RolloutGroup) -> Result<GroupScores> {
        let rm = self
            .rm
            .ok_or_else(|| TrainError::Incompatible("TTS scoring needs a reward model".into()))?;
        let reference = strip_eos(&sample.text, TEXT_EOS);
        let clean = self
            .world
            .render(&sample.text)
            .map_err(|e| TrainError::Incompatible(e.to_string()))?;
        let clean = strip_eos(&clean, ACOUSTIC_EOS);
        let g = group.size();
        let bodies: Vec<Vec<usize>> = (0..g).map(|i| group.stripped(i, ACOUSTIC_EOS).to_vec()).collect();
        let r1: Vec<f64> = group
            .responses
            .iter()
            .map(|o| Ok(1.0 - wer(reference, &rm.transcribe_tokens(o, self.t_max))?.wer))
            .collect::<Result<_>>()?;
        let r2 = if self.rules.r2 {
            tts_duration_reward(&bodies.iter().map(Vec::len).collect::<Vec<_>>())?
        } else {
            vec![0.0; g]
        };
        let r3 = if self.rules.r3 {
            let pitch = bodies
                .iter()
                .map(|b| self.world.f0_of(b))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TrainError::Incompatible(e.to_string()))?;
            tts_diversity_reward(&bodies, &pitch)?
        } else {
            vec![0.0; g]
        };
        let w = &self.weights;
        let den = w.r1 + if self.rules.r2 { w.r2 } else { 0.0 } + if self.rules.r3 { w.r3 } else { 0.0 };
        let rewards = (0..g)
            .map(|i| {
                let mut num = w.r1 * r1[i];
                if self.rules.r2 {
                    num += w.r2 * r2[i];
                }
                if self.rules.r3 {
                    num += w.r3 * r3[i];
                }
                num / den
            })
            .collect();
        let flagged = bodies
            .iter()
            .map(|b| detect_hallucination(clean, b, &self.hallucination).any())
            .collect();
        Ok(GroupScores { rewards, flagged })
    }
}

/// Which responses feed the DiffRO term.
#[derive(Debug, Clone)]
pub enum DiffroInputs<'a> {
    /// No DiffRO term.
    None,
    /// `(group, response)` pairs of realized rollouts.
    Responses(Vec<(usize, usize)>),
    /// Fresh Gumbel-driven generations with their target texts.
    Gumbel(&'a [(Vec<usize>, GumbelRollout)]),
}

/// Nodes of one combined step.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub total: NodeId,
    pub grpo: Option<(NodeId, Vec<GroupLoss>)>,
    pub diffro: Option<NodeId>,
    /// Zero-valued probes added to each DiffRO response's logits, keyed by
    /// `(group, response)`: parameter name and `[rows, vocab]` shape.
    pub probes: BTreeMap<(usize, usize), (String, [usize; 2])>,
}

/// Which responses a method passes to the DiffRO term.
pub fn diffro_selection(method: Method, groups: &[RolloutGroup]) -> Vec<(usize, usize)> {
    match method {
        Method::Grpo | Method::Diffro => Vec::new(),
        Method::Combined => groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| (0..g.size()).map(move |i| (gi, i)))
            .collect(),
        Method::CombinedFiltered => groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| filter_positive(g).into_iter().map(move |i| (gi, i)))
            .collect(),
    }
}

/// Builds `grpo + λ·mean(diffro)` (terms as selected by `method`).
///
/// With `probes` (and response-based DiffRO), every response of every group
/// gets a zero-valued parameter added to its DiffRO logits, so per-position
/// gradients can be inspected whether or not the response was selected. Returns `None`
/// when neither term has any content.
#[allow(clippy::too_many_arguments)]
pub fn build_step_graph(
    g: &mut Graph,
    lv: &DecoderLeaves,
    policy: &Policy,
    reference: &Policy,
    rm: Option<&RewardModel>,
    groups: &[RolloutGroup],
    diffro: DiffroInputs<'_>,
    method: Method,
    train: &TrainConfig,
    probes: bool,
) -> Result<Option<StepGraph>> {
    let params = GrpoParams {
        clip_eps: train.clip_eps,
        kl_coef: train.kl_coef,
        ratio_temperature: if train.ratio_at_sampling_temperature {
            train.temperature
        } else {
            1.0
        },
    };
    let grpo_part = if method.uses_grpo() {
        batch_loss_graph(g, lv, policy, reference, groups, &params, train.ratio_at_sampling_temperature)?
    } else {
        None
    };
    let mut probe_names = BTreeMap::new();
    let mut losses = Vec::new();
    match &diffro {
        DiffroInputs::None => {}
        DiffroInputs::Responses(sel) if !sel.is_empty() || probes => {
            let rm = rm.ok_or_else(|| TrainError::Incompatible("DiffRO needs a reward model".into()))?;
            let rl = rm.leaves(g);
            // With probes every response gets a branch, so excluded ones can
            // be shown to receive no gradient; only selected ones are summed.
            let all: Vec<(usize, usize)> = if probes {
                groups
                    .iter()
                    .enumerate()
                    .flat_map(|(gi, grp)| (0..grp.size()).map(move |i| (gi, i)))
                    .collect()
            } else {
                sel.clone()
            };
            for (gi, i) in all {
                let grp = &groups[gi];
                let resp = &grp.responses[i];
                let (mut logits, targets) = policy.response_logits_graph(g, lv, &grp.condition, &[resp])?;
                if probes {
                    let name = format!("probe/{gi}/{i}");
                    let shape = [resp.len(), policy.arch().target_vocab];
                    let p = g.param(&name, &shape);
                    logits = g.add(logits, p);
                    probe_names.insert((gi, i), (name, shape));
                }
                let probs = g.softmax(logits);
                let frames = straight_through(g, Array::one_hot(&targets, policy.arch().target_vocab), probs);
                let r = rm.reward_graph(g, &rl, frames, &grp.condition)?;
                let l = g.neg(r);
                if sel.contains(&(gi, i)) {
                    losses.push(l);
                }
            }
        }
        DiffroInputs::Responses(_) => {}
        DiffroInputs::Gumbel(rollouts) if !rollouts.is_empty() => {
            let rm = rm.ok_or_else(|| TrainError::Incompatible("DiffRO needs a reward model".into()))?;
            let rl = rm.leaves(g);
            for (text, ro) in rollouts.iter() {
                losses.push(diffro_loss_gumbel(g, lv, &rl, policy, rm, text, ro, train.gumbel_tau)?);
            }
        }
        DiffroInputs::Gumbel(_) => {}
    }
    let diffro_node = if losses.is_empty() {
        None
    } else {
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = g.add(acc, l);
        }
        Some(g.scale(acc, 1.0 / losses.len() as f64))
    };
    let weight = if method == Method::Diffro { 1.0 } else { train.diffro_weight };
    let total = match (&grpo_part, diffro_node) {
        (None, None) => return Ok(None),
        (Some((l, _)), None) => *l,
        (None, Some(d)) => g.scale(d, weight),
        (Some((l, _)), Some(d)) => {
            let wd = g.scale(d, weight);
            g.add(*l, wd)
        }
    };
    Ok(Some(StepGraph {
        total,
        grpo: grpo_part,
        diffro: diffro_node,
        probes: probe_names,
    }))
}

/// Bindings for a step graph: policy, reward model and zero probes.
pub fn step_bindings(policy: &Policy, rm: Option<&RewardModel>, step: &StepGraph) -> Bindings {
    let mut b = policy.bindings();
    if let Some(rm) = rm {
        rm.bind(&mut b);
    }
    for (name, shape) in step.probes.values() {
        b.insert(name.clone(), Array::zeros(shape));
    }
    b
}

/// Per-step training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub reward_mean: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub loss: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    pub diffro_selected: usize,
    /// No update happened (every group skippable, nothing selected).
    pub skipped: bool,
}

/// Scheduled evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub hallucination_rate: f64,
    pub keyword_recall: f64,
    pub short_wer: Option<f64>,
    pub long_wer: Option<f64>,
    /// Mean `log P(y | greedy output)` under the reward model (TTS).
    pub r_asr: Option<f64>,
    /// Mean greedy output length, EOS excluded (TTS).
    pub mean_len: Option<f64>,
    /// Mean `| |o| / |clean rendering| - 1 |` (TTS).
    pub length_drift: Option<f64>,
    /// Mean group diversity reward (TTS).
    pub diversity: Option<f64>,
    /// `length_drift` over the sampled diversity groups rather than greedy
    /// outputs (TTS).
    #[serde(default)]
    pub sampled_length_drift: Option<f64>,
}

impl EvalPoint {
    /// Scalar used for best-checkpoint selection, oriented so larger is better.
    pub fn score(&self, task: Task) -> f64 {
        match task {
            Task::Asr => -self.wer,
            Task::Tts => self.r_asr.unwrap_or(f64::NEG_INFINITY),
        }
    }
}

/// Whether `current` is more than `threshold` (relative) worse than `best`.
pub fn degraded(task: Task, best: &EvalPoint, current: &EvalPoint, threshold: f64) -> bool {
    match task {
        Task::Asr => current.wer > best.wer * (1.0 + threshold) && current.wer - best.wer > 1e-12,
        Task::Tts => {
            let (b, c) = (best.score(task), current.score(task));
            c < b - threshold * b.abs()
        }
    }
}

/// Curves and markers of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Option<Task>,
    pub method: Option<Method>,
    pub rules: String,
    pub subsets: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub stability_step: Option<usize>,
    pub final_checkpoint: Option<String>,
}

impl RunReport {
    pub fn baseline(&self) -> &EvalPoint {
        &self.evals[0]
    }

    pub fn best(&self) -> &EvalPoint {
        self.evals
            .iter()
            .find(|e| e.step == self.best_step)
            .expect("best step has an eval")
    }

    pub fn last(&self) -> &EvalPoint {
        self.evals.last().expect("at least the baseline eval")
    }
}

/// Report plus the final and best policies.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub policy: Policy,
    pub best_policy: Policy,
    /// Per-utterance logs of the baseline and the final evaluation.
    pub baseline_logs: Vec<UtteranceLog>,
    pub final_logs: Vec<UtteranceLog>,
}

/// Inputs of [`train`].
pub struct TrainInputs<'a> {
    pub world: &'a World,
    pub config: &'a RunConfig,
    pub baseline: &'a Policy,
    pub reward_model: Option<&'a RewardModel>,
    pub data: &'a TrainData,
    pub testset: &'a [Sample],
}

/// Rejects train/test id overlap.
pub fn check_disjoint<'a>(train: impl IntoIterator<Item = &'a Sample>, test: &[Sample]) -> Result<()> {
    let ids: std::collections::HashSet<&str> = test.iter().map(|s| s.id.as_str()).collect();
    for s in train {
        if ids.contains(s.id.as_str()) {
            return Err(TrainError::Overlap(s.id.clone()));
        }
    }
    Ok(())
}

/// One evaluated test utterance. TTS rows carry the reward-model score and
/// output length; `utterance.hypothesis` is then the recognizer transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceLog {
    #[serde(flatten)]
    pub utterance: UtteranceResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_asr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_len: Option<usize>,
}

/// Corpus numbers recomputed from per-utterance logs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogTotals {
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub r_asr: Option<f64>,
    pub mean_len: Option<f64>,
}

pub fn totals_from_logs(logs: &[UtteranceLog]) -> LogTotals {
    let (mut refs, mut s, mut i, mut d) = (0usize, 0usize, 0usize, 0usize);
    for l in logs {
        let w = &l.utterance.wer;
        refs += w.ref_len;
        s += w.substitutions;
        i += w.insertions;
        d += w.deletions;
    }
    let rate = |c: usize| if refs == 0 { 0.0 } else { c as f64 / refs as f64 };
    let n = logs.len().max(1) as f64;
    let mean_of = |f: &dyn Fn(&UtteranceLog) -> Option<f64>| {
        let v: Option<Vec<f64>> = logs.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
    };
    LogTotals {
        wer: rate(s + i + d),
        ins: rate(i),
        del: rate(d),
        r_asr: mean_of(&|l| l.r_asr),
        mean_len: mean_of(&|l| l.output_len.map(|x| x as f64)),
    }
}

/// Evaluates a policy on a test set.
pub fn evaluate(
    world: &World,
    policy: &Policy,
    rm: Option<&RewardModel>,
    testset: &[Sample],
    config: &RunConfig,
    step: usize,
) -> Result<EvalPoint> {
    Ok(evaluate_detailed(world, policy, rm, testset, config, step)?.0)
}

/// [`evaluate`] plus the per-utterance logs.
pub fn evaluate_detailed(
    world: &World,
    policy: &Policy,
    rm: Option<&RewardModel>,
    testset: &[Sample],
    config: &RunConfig,
    step: usize,
) -> Result<(EvalPoint, Vec<UtteranceLog>)> {
    let t_max = config.train.t_max;
    let split = SplitThresholds {
        short: world.spec.short_threshold,
        long: world.spec.long_threshold,
    };
    let mut e = EvalPoint {
        step,
        ..Default::default()
    };
    let fill = |e: &mut EvalPoint, m: &EvalMetrics| {
        e.wer = m.overall.wer();
        e.ins = m.overall.ins();
        e.del = m.overall.del();
        e.hallucination_rate = m.overall.hallucination_rate();
        e.keyword_recall = m.overall.keyword_recall();
        e.short_wer = (m.short.utterances > 0).then(|| m.short.wer());
        e.long_wer = (m.long.utterances > 0).then(|| m.long.wer());
    };
    match config.task {
        Task::Asr => {
            let m = eval_metrics(
                &policy.transcriber(t_max),
                testset,
                TEXT_EOS,
                ACOUSTIC_EOS,
                &world.keywords,
                split,
                &config.hallucination,
            )?;
            fill(&mut e, &m);
            let logs = m
                .utterances
                .into_iter()
                .map(|utterance| UtteranceLog {
                    utterance,
                    r_asr: None,
                    output_len: None,
                    clean_len: None,
                })
                .collect();
            Ok((e, logs))
        }
        Task::Tts => {
            let rm = rm.ok_or_else(|| TrainError::Incompatible("TTS evaluation needs a reward model".into()))?;
            let transcriber = RewardModelTranscriber { model: rm, t_max };
            let mut outputs = Vec::with_capacity(testset.len());
            let mut extra = Vec::with_capacity(testset.len());
            for s in testset {
                let o = policy.greedy(&s.condition, t_max)?;
                let r = diffro_reward_tokens(rm, &o, &s.text)?;
                let clean = world
                    .render(&s.text)
                    .map_err(|err| TrainError::Incompatible(err.to_string()))?;
                extra.push((r, strip_eos(&o, ACOUSTIC_EOS).len(), clean.len() - 1));
                outputs.push(Sample {
                    condition: o,
                    ..s.clone()
                });
            }
            let m = eval_metrics(
                &transcriber,
                &outputs,
                TEXT_EOS,
                ACOUSTIC_EOS,
                &world.keywords,
                split,
                &config.hallucination,
            )?;
            fill(&mut e, &m);
            let n = testset.len().max(1) as f64;
            e.r_asr = Some(extra.iter().map(|x| x.0).sum::<f64>() / n);
            e.mean_len = Some(extra.iter().map(|x| x.1 as f64).sum::<f64>() / n);
            e.length_drift = Some(
                extra
                    .iter()
                    .map(|&(_, len, clean)| (len as f64 / clean.max(1) as f64 - 1.0).abs())
                    .sum::<f64>()
                    / n,
            );
            let k = config.diversity_eval_items.min(testset.len());
            if k > 0 {
                let mut div = 0.0;
                let mut drift = 0.0;
                let mut count = 0usize;
                for (j, s) in testset[..k].iter().enumerate() {
                    let grp = policy.sample_group(
                        &s.condition,
                        config.train.group_size,
                        config.train.temperature,
                        t_max,
                        derive_seed(derive_named(config.train.seed, "eval-diversity"), j as u64),
                    )?;
                    let bodies: Vec<Vec<usize>> =
                        (0..grp.size()).map(|i| grp.stripped(i, ACOUSTIC_EOS).to_vec()).collect();
                    let pitch = bodies
                        .iter()
                        .map(|b| world.f0_of(b))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|err| TrainError::Incompatible(err.to_string()))?;
                    let d = tts_diversity_reward(&bodies, &pitch)?;
                    div += d.iter().sum::<f64>();
                    count += d.len();
                    let clean = extra[j].2.max(1) as f64;
                    drift += bodies.iter().map(|b| (b.len() as f64 / clean - 1.0).abs()).sum::<f64>();
                }
                e.diversity = Some(div / count as f64);
                e.sampled_length_drift = Some(drift / count as f64);
            }
            let logs = m
                .utterances
                .into_iter()
                .zip(extra)
                .map(|(utterance, (r, len, clean))| UtteranceLog {
                    utterance,
                    r_asr: Some(r),
                    output_len: Some(len),
                    clean_len: Some(clean),
                })
                .collect();
            Ok((e, logs))
        }
    }
}

/// Samples, scores and builds groups for one batch.
fn rollout_batch<'s>(
    world: &World,
    config: &RunConfig,
    snapshot: &Policy,
    rm: Option<&RewardModel>,
    batch: &[&'s Sample],
    step: usize,
) -> Result<Vec<RolloutGroup>> {
    let tc = &config.train;
    let scorer = Scorer {
        world,
        rm,
        rules: config.rules,
        weights: config.rule_weights,
        hallucination: config.hallucination,
        t_max: tc.t_max,
    };
    let base = derive_named(tc.seed, "rollout");
    batch
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let seed = derive_seed(base, (step * tc.batch_size + k) as u64);
            let mut grp = snapshot.sample_group(&s.condition, tc.group_size, tc.temperature, tc.t_max, seed)?;
            let scores = scorer.score(config.task, s, &grp)?;
            for (v, f) in grp.validity.iter_mut().zip(&scores.flagged) {
                *v = *v && !f;
            }
            assign_rewards(&mut grp, scores.rewards, grpo::DEFAULT_EPS_STD)?;
            Ok(grp)
        })
        .collect()
}

/// Runs RL from `baseline`. Deterministic given the config.
pub fn train(inputs: TrainInputs<'_>) -> Result<RunOutcome> {
    let TrainInputs {
        world,
        config,
        baseline,
        reward_model: rm,
        data,
        testset,
    } = inputs;
    config.validate()?;
    if baseline.task != config.task {
        return Err(TrainError::Incompatible(format!(
            "baseline policy is for {}, run is {}",
            baseline.task, config.task
        )));
    }
    if (config.method.uses_diffro() || config.task == Task::Tts) && rm.is_none() {
        return Err(TrainError::Incompatible("this run needs a reward model".into()));
    }
    check_disjoint(data.all(), testset)?;
    let tc = &config.train;
    let mut policy = baseline.copy_as(Role::Current);
    let mut snapshot = baseline.copy_as(Role::Snapshot);
    let reference = baseline.copy_as(Role::Reference);
    let mut opt = Adam::new(tc.learning_rate);
    if let Some(max) = tc.max_grad_norm {
        opt = opt.with_clip(max);
    }
    let mut draw_rng = rng(derive_named(tc.seed, "batches"));

    let mut report = RunReport {
        task: Some(config.task),
        method: Some(config.method),
        rules: config.rules.to_string(),
        subsets: config
            .mix
            .iter()
            .map(|m| m.subset.to_string())
            .collect::<Vec<_>>()
            .join("+"),
        seed: tc.seed,
        ..Default::default()
    };
    let (first, baseline_logs) = evaluate_detailed(world, &policy, rm, testset, config, 0)?;
    let mut final_logs = baseline_logs.clone();
    let mut best_score = first.score(config.task);
    let mut best_policy = policy.clone();
    report.evals.push(first);

    for step in 1..=config.steps {
        let batch: Vec<&Sample> = (0..tc.batch_size)
            .map(|_| data.draw(&config.mix, &mut draw_rng))
            .collect::<Result<_>>()?;
        let (groups, gumbel): (Vec<RolloutGroup>, Vec<(Vec<usize>, GumbelRollout)>) =
            if config.method == Method::Diffro {
                let base = derive_named(tc.seed, "gumbel");
                let mut ros = Vec::new();
                for (k, s) in batch.iter().enumerate() {
                    for j in 0..tc.group_size {
                        let seed = derive_seed(derive_seed(base, (step * tc.batch_size + k) as u64), j as u64);
                        ros.push((s.text.clone(), gumbel_rollout(&snapshot, &s.condition, tc.gumbel_tau, tc.t_max, seed)?));
                    }
                }
                (Vec::new(), ros)
            } else {
                (rollout_batch(world, config, &snapshot, rm, &batch, step)?, Vec::new())
            };
        let selection = diffro_selection(config.method, &groups);
        let diffro_inputs = match config.method {
            Method::Grpo => DiffroInputs::None,
            Method::Diffro => DiffroInputs::Gumbel(&gumbel),
            _ => DiffroInputs::Responses(selection.clone()),
        };
        let mut g = Graph::new();
        let lv = policy.decoder.leaves(&mut g, "", true);
        let built = build_step_graph(&mut g, &lv, &policy, &reference, rm, &groups, diffro_inputs, config.method, tc, false)?;

        let mut rec = StepRecord {
            step,
            diffro_selected: if config.method == Method::Diffro { gumbel.len() } else { selection.len() },
            ..Default::default()
        };
        let rewards: Vec<f64> = groups.iter().filter_map(|g| g.rewards.as_ref()).flatten().copied().collect();
        if !rewards.is_empty() {
            rec.reward_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        }
        match built {
            None => rec.skipped = true,
            Some(sg) => {
                let b = step_bindings(&policy, rm, &sg);
                let eval = g.evaluate(&b).map_err(|_| TrainError::NonFiniteLoss { step })?;
                let loss = eval.scalar(sg.total);
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                let grads = g.gradient(&eval, sg.total)?;
                let info = opt
                    .step(policy.params_mut(), &grads)
                    .map_err(|_| TrainError::NonFiniteLoss { step })?;
                sync_weights(&policy, &mut snapshot)?;
                rec.loss = loss;
                rec.grad_norm = info.grad_norm;
                if let Some((_, parts)) = &sg.grpo {
                    let d: GrpoDiagnostics = grpo::diagnostics(
                        &eval,
                        parts,
                        &GrpoParams {
                            clip_eps: tc.clip_eps,
                            kl_coef: tc.kl_coef,
                            ratio_temperature: 1.0,
                        },
                    );
                    rec.kl = d.kl_mean;
                    rec.clip_frac = d.clip_fraction;
                    rec.mean_abs_advantage = d.mean_abs_advantage;
                }
                if config.method == Method::Diffro {
                    // report the mean reward-model log-likelihood as the reward
                    if let Some(d) = sg.diffro {
                        rec.reward_mean = -eval.scalar(d);
                    }
                }
            }
        }
        report.steps.push(rec);

        if step % config.eval_every == 0 || step == config.steps {
            let (e, logs) = evaluate_detailed(world, &policy, rm, testset, config, step)?;
            final_logs = logs;
            let s = e.score(config.task);
            if s > best_score {
                best_score = s;
                best_policy = policy.clone();
                report.best_step = step;
            }
            if report.stability_step.is_none() {
                let best = report
                    .evals
                    .iter()
                    .chain(std::iter::once(&e))
                    .max_by(|a, b| a.score(config.task).total_cmp(&b.score(config.task)))
                    .expect("non-empty");
                if degraded(config.task, best, &e, config.degrade_threshold) {
                    report.stability_step = Some(step);
                }
            }
            report.evals.push(e);
        }
    }
    Ok(RunOutcome {
        report,
        policy,
        best_policy,
        baseline_logs,
        final_logs,
    })
}

/// Header of the per-step metrics file.
pub const METRICS_HEADER: &str = "step,reward_mean,kl,clip_frac,loss,wer,ins,del,r_asr,mean_len,diversity";

/// Writes one row per step; eval columns are filled on eval steps only.
pub fn write_metrics_csv(out: &mut impl Write, report: &RunReport) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    let evals: BTreeMap<usize, &EvalPoint> = report.evals.iter().map(|e| (e.step, e)).collect();
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows: Vec<(usize, Option<&StepRecord>)> = vec![(0, None)];
    rows.extend(report.steps.iter().map(|s| (s.step, Some(s))));
    for (step, rec) in rows {
        let (rm, kl, cf, loss) = rec
            .map(|r| (r.reward_mean.to_string(), r.kl.to_string(), r.clip_frac.to_string(), r.loss.to_string()))
            .unwrap_or_default();
        let (w, i, d, ra, ml, dv) = match evals.get(&step) {
            Some(e) => (
                e.wer.to_string(),
                e.ins.to_string(),
                e.del.to_string(),
                opt(e.r_asr),
                opt(e.mean_len),
                opt(e.diversity),
            ),
            None => Default::default(),
        };
        writeln!(out, "{step},{rm},{kl},{cf},{loss},{w},{i},{d},{ra},{ml},{dv}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(adv: Vec<f64>, valid: Vec<bool>) -> RolloutGroup {
        let mut g = RolloutGroup::new(vec![1], 1.0);
        g.responses = vec![vec![0]; adv.len()];
        g.validity = valid;
        g.advantages = Some(adv);
        g
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_positive(&group(vec![0.5, -0.5], vec![true, true])), vec![0]);
        assert_eq!(
            filter_positive(&group(vec![1.2, 0.3, -0.8, -0.7], vec![true, false, true, true])),
            vec![0]
        );
        assert!(filter_positive(&group(vec![0.0, -1.0], vec![true, true])).is_empty());
    }

    #[test]
    fn subset_draws_follow_weights() {
        let mix = vec![
            MixEntry { subset: Subset::D0, weight: 0.5 },
            MixEntry { subset: Subset::D1, weight: 0.2 },
            MixEntry { subset: Subset::D3, weight: 0.3 },
        ];
        let mut r = rng(5);
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            *counts.entry(draw_subset(&mix, r.gen::<f64>())).or_insert(0usize) += 1;
        }
        for m in &mix {
            let f = counts[&m.subset] as f64 / n as f64;
            assert!((f - m.weight).abs() < 0.02, "{:?} {f}", m.subset);
        }
    }

    #[test]
    fn config_compatibility() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.method = Method::CombinedFiltered;
        assert!(c.validate().is_err());
        c.task = Task::Tts;
        assert!(c.validate().is_ok());
        c.mix[0].weight = 0.7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Grpo, Method::Diffro, Method::Combined, Method::CombinedFiltered] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn degradation_marker() {
        let e = |wer: f64, r: f64| EvalPoint {
            wer,
            r_asr: Some(r),
            ..Default::default()
        };
        assert!(degraded(Task::Asr, &e(0.2, 0.0), &e(0.25, 0.0), 0.2));
        assert!(!degraded(Task::Asr, &e(0.2, 0.0), &e(0.23, 0.0), 0.2));
        assert!(degraded(Task::Tts, &e(0.0, -10.0), &e(0.0, -12.5), 0.2));
        assert!(!degraded(Task::Tts, &e(0.0, -10.0), &e(0.0, -11.5), 0.2));
    }
}
