//! Rule-based value functions for ASR- and TTS-style responses.
//!
//! ASR rules: accuracy `1 - WER` (R1), hallucination override (R2), keyword
//! precision/recall (R3). TTS rules: duration deviation from the group
//! median (R2) and token/pitch diversity (R3). TTS R1 is recognition
//! accuracy from the token-based recognizer and lives with the trainer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::world::{PitchTrack, Sample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("unknown reward rule {0:?}")]
    UnknownRule(String),
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("{responses} responses but {tracks} pitch tracks")]
    PitchTrackCount { responses: usize, tracks: usize },
}

/// Tokens before the first `eos` (the whole slice if there is none).
pub fn strip_eos(seq: &[usize], eos: usize) -> &[usize] {
    match seq.iter().position(|&t| t == eos) {
        Some(p) => &seq[..p],
        None => seq,
    }
}

/// Alignment counts between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl WerResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn ins_rate(&self) -> f64 {
        self.insertions as f64 / self.ref_len as f64
    }

    pub fn del_rate(&self) -> f64 {
        self.deletions as f64 / self.ref_len as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cell {
    cost: usize,
    subs: usize,
    ins: usize,
    dels: usize,
}

impl Cell {
    fn key(&self) -> (usize, usize) {
        (self.cost, self.ins + self.dels)
    }

    fn bump(self, subs: usize, ins: usize, dels: usize) -> Self {
        Cell {
            cost: self.cost + subs + ins + dels,
            subs: self.subs + subs,
            ins: self.ins + ins,
            dels: self.dels + dels,
        }
    }
}

/// Word error rate with a unit-cost Levenshtein alignment.
///
/// Runs in two rows of memory. Among minimum-edit alignments the one with
/// the fewest insertions + deletions wins (substitutions preferred). Since
/// `I - D = |hyp| - |ref|`, that pins S, I and D uniquely, and swapping
/// reference and hypothesis exchanges I and D.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<WerResult, RewardError> {
    if reference.is_empty() {
        return Err(RewardError::EmptyReference);
    }
    let m = hypothesis.len();
    let mut prev: Vec<Cell> = (0..=m)
        .map(|j| Cell { cost: j, subs: 0, ins: j, dels: 0 })
        .collect();
    let mut cur = prev.clone();
    for (i, &r) in reference.iter().enumerate() {
        cur[0] = Cell { cost: i + 1, subs: 0, ins: 0, dels: i + 1 };
        for j in 1..=m {
            let diag = if r == hypothesis[j - 1] {
                prev[j - 1]
            } else {
                prev[j - 1].bump(1, 0, 0)
            };
            let ins = cur[j - 1].bump(0, 1, 0);
            let del = prev[j].bump(0, 0, 1);
            cur[j] = [diag, ins, del]
                .into_iter()
                .min_by_key(Cell::key)
                .expect("three candidates");
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let end = prev[m];
    Ok(WerResult {
        wer: end.cost as f64 / reference.len() as f64,
        substitutions: end.subs,
        insertions: end.ins,
        deletions: end.dels,
        ref_len: reference.len(),
    })
}

/// Plain Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ASR R1: `1 - WER`. Negative when insertions push WER above 1.
pub fn asr_reward_r1(reference: &[usize], hypothesis: &[usize]) -> Result<f64, RewardError> {
    Ok(1.0 - wer(reference, hypothesis)?.wer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HallucinationParams {
    /// Longest n-gram checked for consecutive repetition.
    pub n_max: usize,
    /// Consecutive copies needed to flag a repetition.
    pub rep_threshold: usize,
    /// Hypotheses longer than `len_ratio * |ref|` are flagged.
    pub len_ratio: f64,
}

impl Default for HallucinationParams {
    fn default() -> Self {
        Self {
            n_max: 4,
            rep_threshold: 4,
            len_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub ngram: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationFlags {
    pub repetition: Option<Repetition>,
    pub length_explosion: bool,
}

impl HallucinationFlags {
    pub fn any(&self) -> bool {
        self.repetition.is_some() || self.length_explosion
    }
}

/// Finds the shortest, earliest n-gram repeated at least `threshold` times back to back.
pub fn find_repetition(seq: &[usize], n_max: usize, threshold: usize) -> Option<Repetition> {
    if threshold == 0 {
        return None;
    }
    for n in 1..=n_max {
        if n * threshold > seq.len() {
            break;
        }
        for start in 0..=seq.len() - n * threshold {
            let gram = &seq[start..start + n];
            let mut count = 1;
            while start + (count + 1) * n <= seq.len()
                && &seq[start + count * n..start + (count + 1) * n] == gram
            {
                count += 1;
            }
            if count >= threshold {
                return Some(Repetition {
                    ngram: gram.to_vec(),
                    count,
                });
            }
        }
    }
    None
}

/// ASR R2 detector: consecutive n-gram repetition or length explosion.
pub fn detect_hallucination(
    reference: &[usize],
    hypothesis: &[usize],
    params: &HallucinationParams,
) -> HallucinationFlags {
    HallucinationFlags {
        repetition: find_repetition(hypothesis, params.n_max, params.rep_threshold),
        length_explosion: hypothesis.len() as f64 > params.len_ratio * reference.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeywordScore {
    pub recall: f64,
    pub precision: f64,
    /// Keyword occurrences matched (per-keyword `min(count_ref, count_hyp)`).
    pub matched: usize,
    pub ref_total: usize,
    pub hyp_total: usize,
}

impl KeywordScore {
    pub fn reward(&self) -> f64 {
        (self.recall + self.precision) / 2.0
    }
}

/// Occurrence-level keyword precision and recall.
///
/// An empty denominator counts as a perfect ratio, so a keyword-free pair
/// scores 1 and a hypothesis that only invents keywords scores 0.5.
pub fn keyword_score(reference: &[usize], hypothesis: &[usize], keywords: &[usize]) -> KeywordScore {
    let count = |seq: &[usize]| {
        let mut m: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in seq.iter().filter(|t| keywords.contains(t)) {
            *m.entry(t).or_default() += 1;
        }
        m
    };
    let (rc, hc) = (count(reference), count(hypothesis));
    let matched: usize = rc
        .iter()
        .map(|(k, &n)| n.min(hc.get(k).copied().unwrap_or(0)))
        .sum();
    let ref_total: usize = rc.values().sum();
    let hyp_total: usize = hc.values().sum();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    KeywordScore {
        recall: ratio(matched, ref_total),
        precision: ratio(matched, hyp_total),
        matched,
        ref_total,
        hyp_total,
    }
}

/// ASR R3: mean of keyword recall and precision, in `[0, 1]`.
pub fn keyword_reward(reference: &[usize], hypothesis: &[usize], keywords: &[usize]) -> f64 {
    keyword_score(reference, hypothesis, keywords).reward()
}

/// One reward rule; meaning depends on the task (ASR or TTS).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

/// The set of enabled reward rules. Serialized as a list such as `"R1,R2"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RuleSet {
    pub r1: bool,
    pub r2: bool,
    pub r3: bool,
}

impl RuleSet {
    pub const R1: RuleSet = RuleSet { r1: true, r2: false, r3: false };
    pub const R12: RuleSet = RuleSet { r1: true, r2: true, r3: false };
    pub const R13: RuleSet = RuleSet { r1: true, r2: false, r3: true };
    pub const ALL: RuleSet = RuleSet { r1: true, r2: true, r3: true };

    /// Comma-separated form accepted by `FromStr`, e.g. `R1,R3`.
    pub fn code(&self) -> String {
        [(self.r1, "R1"), (self.r2, "R2"), (self.r3, "R3")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn contains(&self, rule: Rule) -> bool {
        match rule {
            Rule::R1 => self.r1,
            Rule::R2 => self.r2,
            Rule::R3 => self.r3,
        }
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::R1
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::ALL {
            return write!(f, "R^all");
        }
        let mut digits = String::new();
        for (on, d) in [(self.r1, '1'), (self.r2, '2'), (self.r3, '3')] {
            if on {
                if !digits.is_empty() {
                    digits.push(',');
                }
                digits.push(d);
            }
        }
        write!(f, "R^{{{digits}}}")
    }
}

impl From<RuleSet> for String {
    fn from(r: RuleSet) -> String {
        r.code()
    }
}

impl TryFrom<String> for RuleSet {
    type Error = RewardError;
    fn try_from(s: String) -> Result<Self, RewardError> {
        s.parse()
    }
}

impl FromStr for RuleSet {
    type Err = RewardError;

    /// Accepts `all` or a comma/space separated list such as `R1,R2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let mut set = RuleSet { r1: false, r2: false, r3: false };
        for part in t.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "R1" | "1" => set.r1 = true,
                "R2" | "2" => set.r2 = true,
                "R3" | "3" => set.r3 = true,
                _ => return Err(RewardError::UnknownRule(part.to_string())),
            }
        }
        if !set.r1 {
            return Err(RewardError::UnknownRule(format!("{t} (R1 is mandatory)")));
        }
        Ok(set)
    }
}

/// Relative weights of the non-override rules when averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleWeights {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl Default for RuleWeights {
    fn default() -> Self {
        Self { r1: 1.0, r2: 1.0, r3: 1.0 }
    }
}

/// Per-rule values plus the combined scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r1: f64,
    pub r2_flagged: Option<bool>,
    pub r3: Option<f64>,
    pub combined: f64,
    pub enabled: RuleSet,
}

/// Combines ASR rule values: weighted mean of R1 (and R3 if enabled), then
/// the hallucination override sets the result to exactly `-1`.
pub fn combine_asr_rewards(
    r1: f64,
    flags: &HallucinationFlags,
    r3: f64,
    enabled: RuleSet,
    weights: &RuleWeights,
) -> RewardBreakdown {
    let mut num = weights.r1 * r1;
    let mut den = weights.r1;
    if enabled.r3 {
        num += weights.r3 * r3;
        den += weights.r3;
    }
    let flagged = flags.any();
    let combined = if enabled.r2 && flagged { -1.0 } else { num / den };
    RewardBreakdown {
        r1,
        r2_flagged: enabled.r2.then_some(flagged),
        r3: enabled.r3.then_some(r3),
        combined,
        enabled,
    }
}

/// Inputs shared by every ASR reward evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRewardConfig {
    pub rules: RuleSet,
    pub weights: RuleWeights,
    pub hallucination: HallucinationParams,
}

impl Default for AsrRewardConfig {
    fn default() -> Self {
        Self {
            rules: RuleSet::R1,
            weights: RuleWeights::default(),
            hallucination: HallucinationParams::default(),
        }
    }
}

/// Scores one hypothesis (EOS already stripped) against its reference.
pub fn score_asr(
    reference: &[usize],
    hypothesis: &[usize],
    keywords: &[usize],
    config: &AsrRewardConfig,
) -> Result<(RewardBreakdown, HallucinationFlags), RewardError> {
    let r1 = asr_reward_r1(reference, hypothesis)?;
    let flags = detect_hallucination(reference, hypothesis, &config.hallucination);
    let r3 = keyword_reward(reference, hypothesis, keywords);
    Ok((
        combine_asr_rewards(r1, &flags, r3, config.rules, &config.weights),
        flags,
    ))
}

/// Median with the mean-of-central-pair convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Group-level statistics used by the TTS rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub lengths: Vec<usize>,
    pub median_length: f64,
    /// `distances[i][j]` is the token edit distance between responses i and j.
    pub distances: Vec<Vec<usize>>,
}

impl GroupStats {
    pub fn compute(responses: &[Vec<usize>]) -> Self {
        let lengths: Vec<usize> = responses.iter().map(Vec::len).collect();
        let lf: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        let g = responses.len();
        let mut distances = vec![vec![0; g]; g];
        for i in 0..g {
            for j in i + 1..g {
                let d = edit_distance(&responses[i], &responses[j]);
                distances[i][j] = d;
                distances[j][i] = d;
            }
        }
        Self {
            median_length: if g == 0 { 0.0 } else { median(&lf) },
            lengths,
            distances,
        }
    }
}

/// TTS R2: `-|(|o_i| - T_m) / T_m|` with `T_m` the group median length.
///
/// Lengths below 1 are treated as 1.
pub fn tts_duration_reward(lengths: &[usize]) -> Result<Vec<f64>, RewardError> {
    if lengths.len() < 2 {
        return Err(RewardError::GroupTooSmall(lengths.len()));
    }
    let lf: Vec<f64> = lengths.iter().map(|&l| l.max(1) as f64).collect();
    let tm = median(&lf);
    Ok(lf.iter().map(|&l| 0.0 - ((l - tm) / tm).abs()).collect())
}

/// TTS R3: mean normalized edit distance to every group member (self
/// included) plus the std of the response's normalized pitch track.
pub fn tts_diversity_reward(
    responses: &[Vec<usize>],
    pitch: &[PitchTrack],
) -> Result<Vec<f64>, RewardError> {
    let g = responses.len();
    if g < 2 {
        return Err(RewardError::GroupTooSmall(g));
    }
    if pitch.len() != g {
        return Err(RewardError::PitchTrackCount {
            responses: g,
            tracks: pitch.len(),
        });
    }
    let stats = GroupStats::compute(responses);
    Ok((0..g)
        .map(|i| {
            let len = responses[i].len().max(1) as f64;
            let token: f64 = stats.distances[i].iter().map(|&d| d as f64 / len).sum::<f64>() / g as f64;
            token + pitch[i].std()
        })
        .collect())
}

/// Anything that can greedily transcribe a condition into text tokens.
pub trait Transcriber {
    /// Greedy transcription of `condition`, EOS-stripped.
    fn transcribe(&self, condition: &[usize]) -> Vec<usize>;
}

/// Aggregated error counts over a set of utterances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub utterances: usize,
    pub ref_words: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hallucinated: usize,
    pub keyword_matched: usize,
    pub keyword_ref_total: usize,
}

impl SplitMetrics {
    pub fn add(&mut self, w: &WerResult, flagged: bool, kw: &KeywordScore) {
        self.utterances += 1;
        self.ref_words += w.ref_len;
        self.substitutions += w.substitutions;
        self.insertions += w.insertions;
        self.deletions += w.deletions;
        self.hallucinated += usize::from(flagged);
        self.keyword_matched += kw.matched;
        self.keyword_ref_total += kw.ref_total;
    }

    fn rate(&self, count: usize) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            count as f64 / self.ref_words as f64
        }
    }

    /// Corpus WER from summed counts.
    pub fn wer(&self) -> f64 {
        self.rate(self.substitutions + self.insertions + self.deletions)
    }

    pub fn ins(&self) -> f64 {
        self.rate(self.insertions)
    }

    pub fn del(&self) -> f64 {
        self.rate(self.deletions)
    }

    pub fn hallucination_rate(&self) -> f64 {
        if self.utterances == 0 {
            0.0
        } else {
            self.hallucinated as f64 / self.utterances as f64
        }
    }

    pub fn keyword_recall(&self) -> f64 {
        if self.keyword_ref_total == 0 {
            1.0
        } else {
            self.keyword_matched as f64 / self.keyword_ref_total as f64
        }
    }
}

/// Short/long thresholds on condition length (EOS excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitThresholds {
    pub short: usize,
    pub long: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self { short: 20, long: 40 }
    }
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub condition_len: usize,
    pub hypothesis: Vec<usize>,
    pub wer: WerResult,
    pub hallucinated: bool,
    pub keywords: KeywordScore,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub short: SplitMetrics,
    pub long: SplitMetrics,
    pub overall: SplitMetrics,
    pub utterances: Vec<UtteranceResult>,
}

/// Greedy-decodes every test sample and aggregates WER/Ins/Del per split
/// from summed counts.
pub fn eval_metrics(
    transcriber: &dyn Transcriber,
    testset: &[Sample],
    text_eos: usize,
    acoustic_eos: usize,
    keywords: &[usize],
    split: SplitThresholds,
    hallucination: &HallucinationParams,
) -> Result<EvalMetrics, RewardError> {
    let mut out = EvalMetrics::default();
    for sample in testset {
        let reference = strip_eos(&sample.text, text_eos);
        let hyp = transcriber.transcribe(&sample.condition);
        let hyp = strip_eos(&hyp, text_eos).to_vec();
        let w = wer(reference, &hyp)?;
        let flagged = detect_hallucination(reference, &hyp, hallucination).any();
        let kw = keyword_score(reference, &hyp, keywords);
        let cond_len = strip_eos(&sample.condition, acoustic_eos).len();
        out.overall.add(&w, flagged, &kw);
        if cond_len < split.short {
            out.short.add(&w, flagged, &kw);
        }
        if cond_len > split.long {
            out.long.add(&w, flagged, &kw);
        }
        out.utterances.push(UtteranceResult {
            id: sample.id.clone(),
            condition_len: cond_len,
            hypothesis: hyp,
            wer: w,
            hallucinated: flagged,
            keywords: kw,
        });
    }
    Ok(out)
}
