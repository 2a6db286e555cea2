//! Differentiable reward optimization: straight-through Gumbel-Softmax
//! frames, a frozen token-level recognizer used as the reward model, and
//! the loss `-log P(y | frames)` back-propagated into the policy.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Array, Bindings, Graph, NodeId};
use crate::optim::Adam;
use crate::policy::{
    Decoder, DecoderArch, DecoderLeaves, Policy, PolicyConfig, PolicyError, Result,
};
use crate::rewards::Transcriber;
use crate::seed::{derive_named, derive_seed, rng};
use crate::world::{World, ACOUSTIC_EOS, TEXT_EOS};

/// Prefix of reward-model leaves inside a shared graph.
pub const RM_PREFIX: &str = "rm/";

/// One straight-through Gumbel-Softmax sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTokenFrame {
    /// `softmax((logits + g) / τ)`: the backward path.
    pub soft: Vec<f64>,
    /// Argmax of `soft`: the forward value is its one-hot.
    pub hard: usize,
    pub noise: Vec<f64>,
}

impl SoftTokenFrame {
    /// Forward value of the frame.
    pub fn forward(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.soft.len()];
        v[self.hard] = 1.0;
        v
    }
}

/// Standard Gumbel draw `-ln(-ln u)` with `u` in the open unit interval.
pub fn gumbel(r: &mut crate::seed::Rng) -> f64 {
    let u: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn gumbel_softmax_st(logits: &[f64], tau: f64, seed: u64) -> SoftTokenFrame {
    assert!(tau > 0.0, "Gumbel temperature must be positive");
    let mut r = rng(seed);
    let noise: Vec<f64> = logits.iter().map(|_| gumbel(&mut r)).collect();
    let z: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| (l + g) / tau).collect();
    let mut soft = vec![0.0; z.len()];
    kernels::softmax_row(&z, &mut soft);
    SoftTokenFrame {
        hard: kernels::argmax(&soft),
        soft,
        noise,
    }
}

/// `hard + (soft - stopgrad(soft))`: forward value is exactly `hard`.
///
/// The difference is formed first so it is exactly zero in the forward pass.
pub fn straight_through(g: &mut Graph, hard: Array, soft: NodeId) -> NodeId {
    let h = g.constant(hard);
    let sg = g.stop_gradient(soft);
    let diff = g.sub(soft, sg);
    g.add(h, diff)
}

/// Sizing of the reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub pos_features: usize,
    pub context_window: usize,
    /// Training pairs generated from the world.
    pub n_pairs: usize,
    pub held_out: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of training utterances passed through the noisy channel.
    pub noisy_fraction: f64,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            hidden_dim: p.hidden_dim,
            input_dim: 16,
            pos_features: p.pos_features,
            context_window: p.context_window,
            n_pairs: 600,
            held_out: 100,
            steps: 600,
            learning_rate: 3e-3,
            batch_size: 8,
            noisy_fraction: 0.2,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

/// Frozen acoustic-to-text recognizer consuming (soft) token frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub decoder: Decoder,
}

/// Outcome of reward-model pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelReport {
    pub held_out_accuracy: f64,
    pub target_met: bool,
    pub loss_curve: Vec<f64>,
}

impl RewardModel {
    pub fn init(world: &World, cfg: &RewardModelConfig) -> Result<Self> {
        let arch = DecoderArch {
            source_vocab: world.acoustic_vocab(),
            target_vocab: world.text_vocab(),
            target_eos: TEXT_EOS,
            input_dim: cfg.input_dim,
            hidden_dim: cfg.hidden_dim,
            pos_features: cfg.pos_features,
            context_window: cfg.context_window,
        };
        Ok(Self {
            decoder: Decoder::init(arch, None, derive_named(cfg.seed, "reward-model-init"))?,
        })
    }

    pub fn acoustic_vocab(&self) -> usize {
        self.decoder.arch.source_vocab
    }

    fn check_frames(&self, frames: &Array) -> Result<()> {
        let v = self.acoustic_vocab();
        if frames.shape().len() != 2 || frames.last_dim() != v {
            return Err(PolicyError::ArchitectureMismatch(format!(
                "frames shape {:?}, expected [T, {v}]",
                frames.shape()
            )));
        }
        if frames.rows() == 0 {
            return Err(PolicyError::Empty("frames"));
        }
        if frames.rows() > self.decoder.arch.context_window {
            return Err(PolicyError::ContextOverflow {
                len: frames.rows(),
                window: self.decoder.arch.context_window,
            });
        }
        Ok(())
    }

    fn check_text(&self, y: &[usize]) -> Result<()> {
        if y.last() != Some(&TEXT_EOS) {
            return Err(PolicyError::InvalidConfig("target text must be EOS-terminated".into()));
        }
        self.decoder.check_target(y)
    }

    /// Teacher-forced posteriors `[|y|, text_vocab]` given frames `[T, acoustic_vocab]`.
    pub fn posteriors(&self, frames: &Array, y: &[usize]) -> Result<Array> {
        self.check_frames(frames)?;
        self.check_text(y)?;
        let x = kernels::matmul(frames, self.decoder.params.get(crate::policy::SOURCE_TABLE));
        let enc = self.decoder.encode_features(&x);
        Ok(kernels::softmax_rows(&self.decoder.teacher_forced_logits(&enc, y)))
    }

    /// Greedy transcript (EOS stripped) of a discrete acoustic sequence.
    pub fn transcribe_tokens(&self, acoustic: &[usize], t_max: usize) -> Vec<usize> {
        let Ok(enc) = self.decoder.encode(acoustic) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut prev = self.decoder.arch.start_token();
        for t in 0..t_max.min(self.decoder.arch.context_window) {
            let logits = self.decoder.logits_rows(&enc, &[prev], &[t]);
            let tok = kernels::argmax(logits.data());
            if tok == TEXT_EOS {
                break;
            }
            out.push(tok);
            prev = tok;
        }
        out
    }

    /// Registers leaves under [`RM_PREFIX`]; always non-trainable.
    pub fn leaves(&self, g: &mut Graph) -> DecoderLeaves {
        self.decoder.leaves(g, RM_PREFIX, false)
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        self.decoder.bind(bindings, RM_PREFIX);
    }

    /// Graph of `log P(y | frames)` (scalar) for a frames node `[T, V]`.
    pub fn reward_graph(&self, g: &mut Graph, lv: &DecoderLeaves, frames: NodeId, y: &[usize]) -> Result<NodeId> {
        self.check_text(y)?;
        let shape = g.shape(frames).to_vec();
        if shape.len() != 2 || shape[1] != self.acoustic_vocab() {
            return Err(PolicyError::ArchitectureMismatch(format!("frames shape {shape:?}")));
        }
        if shape[0] > self.decoder.arch.context_window {
            return Err(PolicyError::ContextOverflow {
                len: shape[0],
                window: self.decoder.arch.context_window,
            });
        }
        let x = g.matmul(frames, lv.source_table);
        let kv = self.decoder.encode_graph(g, lv, x, shape[0]);
        let (prev, pos) = self.decoder.teacher_inputs(y);
        let logits = self.decoder.logits_graph(g, lv, kv, &prev, &pos);
        let ls = g.log_softmax(logits);
        let picked = g.gather(ls, y.to_vec());
        Ok(g.sum(picked))
    }
}

/// Greedy reward-model transcription as a [`Transcriber`].
pub struct RewardModelTranscriber<'a> {
    pub model: &'a RewardModel,
    pub t_max: usize,
}

impl Transcriber for RewardModelTranscriber<'_> {
    fn transcribe(&self, condition: &[usize]) -> Vec<usize> {
        self.model.transcribe_tokens(condition, self.t_max)
    }
}

/// `R_ASR = Σ_n log P(y_n | frames, y_<n)`; always `<= 0`.
pub fn diffro_reward(rm: &RewardModel, frames: &Array, y: &[usize]) -> Result<f64> {
    let post = rm.posteriors(frames, y)?;
    Ok(y.iter().enumerate().map(|(n, &tok)| post.row(n)[tok].ln()).sum())
}

/// `R_ASR` of a hard acoustic token sequence.
pub fn diffro_reward_tokens(rm: &RewardModel, acoustic: &[usize], y: &[usize]) -> Result<f64> {
    if let Some(&t) = acoustic.iter().find(|&&t| t >= rm.acoustic_vocab()) {
        return Err(PolicyError::TokenOutOfVocab {
            kind: "acoustic",
            token: t,
            vocab: rm.acoustic_vocab(),
        });
    }
    diffro_reward(rm, &Array::one_hot(acoustic, rm.acoustic_vocab()), y)
}

/// `-R_ASR` for an already sampled response: frames are the realized
/// one-hots with the policy's probability rows as the straight-through path.
pub fn diffro_loss_on_response(
    g: &mut Graph,
    policy_leaves: &DecoderLeaves,
    rm_leaves: &DecoderLeaves,
    policy: &Policy,
    rm: &RewardModel,
    text: &[usize],
    response: &[usize],
) -> Result<NodeId> {
    let (logits, targets) = policy.response_logits_graph(g, policy_leaves, text, &[response])?;
    let probs = g.softmax(logits);
    let frames = straight_through(g, Array::one_hot(&targets, policy.arch().target_vocab), probs);
    let r = rm.reward_graph(g, rm_leaves, frames, text)?;
    Ok(g.neg(r))
}

/// A generation driven by Gumbel-max sampling with the noise recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GumbelRollout {
    pub condition: Vec<usize>,
    pub tokens: Vec<usize>,
    /// `[|tokens|, V]` Gumbel noise of every step.
    pub noise: Array,
    pub emitted_eos: bool,
}

/// Autoregressive generation with hard (argmax) prefixes.
pub fn gumbel_rollout(policy: &Policy, condition: &[usize], tau: f64, t_max: usize, seed: u64) -> Result<GumbelRollout> {
    let enc = policy.decoder.encode(condition)?;
    let v = policy.arch().target_vocab;
    let mut tokens = Vec::new();
    let mut noise = Vec::new();
    let mut prev = policy.arch().start_token();
    let mut ended = false;
    for t in 0..t_max.min(policy.arch().context_window) {
        let logits = policy.decoder.logits_rows(&enc, &[prev], &[t]);
        let frame = gumbel_softmax_st(logits.data(), tau, derive_seed(seed, t as u64));
        noise.extend_from_slice(&frame.noise);
        tokens.push(frame.hard);
        if frame.hard == policy.eos() {
            ended = true;
            break;
        }
        prev = frame.hard;
    }
    let n = tokens.len();
    Ok(GumbelRollout {
        condition: condition.to_vec(),
        tokens,
        noise: Array::matrix(n, v, noise),
        emitted_eos: ended,
    })
}

/// `-R_ASR` for a Gumbel rollout: soft path `softmax((logits + g)/τ)`.
#[allow(clippy::too_many_arguments)]
pub fn diffro_loss_gumbel(
    g: &mut Graph,
    policy_leaves: &DecoderLeaves,
    rm_leaves: &DecoderLeaves,
    policy: &Policy,
    rm: &RewardModel,
    text: &[usize],
    rollout: &GumbelRollout,
    tau: f64,
) -> Result<NodeId> {
    let (logits, targets) = policy.response_logits_graph(g, policy_leaves, &rollout.condition, &[&rollout.tokens])?;
    let noise = g.constant(rollout.noise.clone());
    let z = g.add(logits, noise);
    let z = g.scale(z, 1.0 / tau);
    let soft = g.softmax(z);
    let frames = straight_through(g, Array::one_hot(&targets, policy.arch().target_vocab), soft);
    let r = rm.reward_graph(g, rm_leaves, frames, text)?;
    Ok(g.neg(r))
}

/// Training pairs: the acoustic utterance (clean or noisy) and its text.
pub fn reward_model_pairs(world: &World, n: usize, noisy_fraction: f64, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let mut r = rng(s);
            let text = world.random_text(&mut r, 1.0);
            let noisy = r.gen::<f64>() < noisy_fraction;
            let acoustic = world
                .synthesize_utterance(&text, noisy, derive_seed(s, 1))
                .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
            Ok((acoustic, text))
        })
        .collect()
}

/// Trains the recognizer on world pairs and reports held-out teacher-forced
/// token accuracy. Missing the target accuracy is reported, not fatal.
pub fn pretrain_reward_model(world: &World, cfg: &RewardModelConfig) -> Result<(RewardModel, RewardModelReport)> {
    let mut rm = RewardModel::init(world, cfg)?;
    let train = reward_model_pairs(world, cfg.n_pairs, cfg.noisy_fraction, derive_named(cfg.seed, "rm-train"))?;
    let test = reward_model_pairs(world, cfg.held_out, cfg.noisy_fraction, derive_named(cfg.seed, "rm-test"))?;
    let mut opt = Adam::new(cfg.learning_rate).with_clip(5.0);
    let mut r = rng(derive_named(cfg.seed, "rm-batches"));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&(Vec<usize>, Vec<usize>)> =
            (0..cfg.batch_size.max(1)).map(|_| &train[r.gen_range(0..train.len())]).collect();
        let mut g = Graph::new();
        let lv = rm.decoder.leaves(&mut g, "", true);
        let mut total = 0usize;
        let mut acc: Option<NodeId> = None;
        for (a, y) in &batch {
            let frames = g.constant(Array::one_hot(a, rm.acoustic_vocab()));
            let lp = rm.reward_graph(&mut g, &lv, frames, y)?;
            total += y.len();
            acc = Some(match acc {
                Some(prev) => g.add(prev, lp),
                None => lp,
            });
        }
        let loss = g.scale(acc.expect("non-empty batch"), -1.0 / total as f64);
        let eval = g.evaluate(&rm.decoder.params.bindings()).map_err(|_| PolicyError::Diverged { step })?;
        let grads = g.gradient(&eval, loss)?;
        opt.step(&mut rm.decoder.params, &grads).map_err(|_| PolicyError::Diverged { step })?;
        curve.push(eval.scalar(loss));
    }
    let accuracy = crate::policy::teacher_forced_accuracy(&rm.decoder, &test)?;
    Ok((
        rm,
        RewardModelReport {
            held_out_accuracy: accuracy,
            target_met: accuracy >= cfg.target_accuracy,
            loss_curve: curve,
        },
    ))
}

/// Discrete acoustic EOS used by the TTS policy.
pub const TTS_EOS: usize = ACOUSTIC_EOS;
