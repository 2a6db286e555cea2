//! Autoregressive attention decoder used both as the policy and as the
//! token-level reward model.
//!
//! One layer: keys and values are built from the source tokens (with their
//! left/right neighbours and a sinusoidal position code), a query is formed
//! from the previous output token and the target position, and a tanh mixing
//! layer feeds the output projection. The same kernels serve the graph path
//! (training) and the plain path (sampling, scoring), and both work row by
//! row, so a single-row step reproduces the matching row of a full
//! teacher-forced pass bit for bit.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Array, AutodiffError, Bindings, Graph, NodeId};
use crate::optim::{Adam, OptimError, ParamStore};
use crate::rewards::Transcriber;
use crate::seed::{derive_named, derive_seed, rng};
use crate::world::{Sample, Task, World, ACOUSTIC_EOS, TEXT_EOS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{kind} token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab {
        kind: &'static str,
        token: usize,
        vocab: usize,
    },
    #[error("sequence of length {len} exceeds context window {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

/// Shape of a decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub target_eos: usize,
    /// Width of the source embedding rows.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of sinusoidal position features (even).
    pub pos_features: usize,
    pub context_window: usize,
}

impl DecoderArch {
    /// Index used as the "previous token" before the first output.
    pub fn start_token(&self) -> usize {
        self.target_vocab
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if self.source_vocab == 0 || self.target_vocab < 2 {
            return bad("vocabularies must be non-empty");
        }
        if self.target_eos >= self.target_vocab {
            return bad("target EOS outside target vocabulary");
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 {
            return bad("dimensions must be positive");
        }
        if self.pos_features == 0 || self.pos_features % 2 != 0 {
            return bad("pos_features must be positive and even");
        }
        Ok(())
    }
}

/// User-facing sizing knobs; vocabularies come from the world and task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
    pub context_window: usize,
    pub pos_features: usize,
    /// Source embedding width for text conditions (TTS). ASR uses the
    /// world's frozen acoustic embedding table instead.
    pub text_embedding_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            context_window: 128,
            pos_features: 16,
            text_embedding_dim: 16,
        }
    }
}

pub(crate) const SOURCE_TABLE: &str = "source_table";
const KEY_CUR: &str = "key_cur";
const KEY_PREV: &str = "key_prev";
const KEY_POS: &str = "key_pos";
const VAL_CUR: &str = "val_cur";
const VAL_NEXT: &str = "val_next";
const TARGET_TABLE: &str = "target_table";
const QUERY_TOK: &str = "query_tok";
const QUERY_POS: &str = "query_pos";
const MIX_CTX: &str = "mix_ctx";
const MIX_PREV: &str = "mix_prev";
const MIX_BIAS: &str = "mix_bias";
const OUT_W: &str = "out_w";
const OUT_BIAS: &str = "out_bias";

/// Sinusoidal features with periods 4, 8, 16, ... (one sin/cos pair each).
///
/// Doubling periods let a linear query map express both `s ≈ 2t` and
/// `s ≈ t/2` alignments.
pub fn position_features(positions: &[usize], width: usize) -> Array {
    let mut data = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for k in 0..width / 2 {
            let period = 4.0 * f64::powi(2.0, k as i32);
            let w = 2.0 * PI * p as f64 / period;
            data.push(w.sin());
            data.push(w.cos());
        }
    }
    Array::matrix(positions.len(), width, data)
}

/// `[n, n]` matrix selecting the previous (`offset = -1`) or next row.
fn shift_matrix(n: usize, next: bool) -> Array {
    let mut m = Array::zeros(&[n, n]);
    for r in 0..n {
        let c = if next { r + 1 } else { r.wrapping_sub(1) };
        if c < n {
            m.row_mut(r)[c] = 1.0;
        }
    }
    m
}

/// Cached keys and values for one source sequence.
#[derive(Debug, Clone)]
pub struct Encoded {
    keys: Array,
    values: Array,
}

impl Encoded {
    pub fn source_len(&self) -> usize {
        self.keys.rows()
    }
}

/// Graph handles of a decoder's parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLeaves {
    pub source_table: NodeId,
    key_cur: NodeId,
    key_prev: NodeId,
    key_pos: NodeId,
    val_cur: NodeId,
    val_next: NodeId,
    target_table: NodeId,
    query_tok: NodeId,
    query_pos: NodeId,
    mix_ctx: NodeId,
    mix_prev: NodeId,
    mix_bias: NodeId,
    out_w: NodeId,
    out_bias: NodeId,
}

/// Parameters plus architecture. Shared by [`Policy`] and the reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub arch: DecoderArch,
    pub params: ParamStore,
}

impl Decoder {
    /// Deterministic initialization. A supplied `source_table` is frozen.
    pub fn init(arch: DecoderArch, source_table: Option<Array>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (e, d, p) = (arch.input_dim, arch.hidden_dim, arch.pos_features);
        let (vs, vt) = (arch.source_vocab, arch.target_vocab);
        let mut params = ParamStore::new();
        let normal = |name: &str, shape: &[usize], std: f64| {
            let mut r = rng(derive_named(seed, name));
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut r); std * z })
                .collect::<Vec<f64>>();
            Array::new(shape.to_vec(), data).expect("shape and data agree")
        };
        match source_table {
            Some(t) => {
                if t.shape() != [vs, e] {
                    return Err(PolicyError::ArchitectureMismatch(format!(
                        "source table shape {:?}, expected {:?}",
                        t.shape(),
                        [vs, e]
                    )));
                }
                params.insert(SOURCE_TABLE, t);
                params.freeze(SOURCE_TABLE);
            }
            None => params.insert(SOURCE_TABLE, normal(SOURCE_TABLE, &[vs, e], 1.0)),
        }
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        params.insert(KEY_CUR, normal(KEY_CUR, &[e, d], inv(e)));
        params.insert(KEY_PREV, normal(KEY_PREV, &[e, d], inv(e)));
        params.insert(KEY_POS, normal(KEY_POS, &[p, d], inv(p)));
        params.insert(VAL_CUR, normal(VAL_CUR, &[e, d], inv(e)));
        params.insert(VAL_NEXT, normal(VAL_NEXT, &[e, d], inv(e)));
        params.insert(TARGET_TABLE, normal(TARGET_TABLE, &[vt + 1, d], 1.0));
        params.insert(QUERY_TOK, normal(QUERY_TOK, &[d, d], inv(d)));
        params.insert(QUERY_POS, normal(QUERY_POS, &[p, d], inv(p)));
        params.insert(MIX_CTX, normal(MIX_CTX, &[d, d], inv(2 * d)));
        params.insert(MIX_PREV, normal(MIX_PREV, &[d, d], inv(2 * d)));
        params.insert(MIX_BIAS, Array::zeros(&[d]));
        params.insert(OUT_W, normal(OUT_W, &[d, vt], 0.5 * inv(d)));
        params.insert(OUT_BIAS, Array::zeros(&[vt]));
        Ok(Self { arch, params })
    }

    fn p(&self, name: &str) -> &Array {
        self.params.get(name)
    }

    fn check_source(&self, source: &[usize]) -> Result<()> {
        if source.is_empty() {
            return Err(PolicyError::Empty("condition"));
        }
        if source.len() > self.arch.context_window {
            return Err(PolicyError::ContextOverflow {
                len: source.len(),
                window: self.arch.context_window,
            });
        }
        if let Some(&t) = source.iter().find(|&&t| t >= self.arch.source_vocab) {
            return Err(PolicyError::TokenOutOfVocab {
                kind: "source",
                token: t,
                vocab: self.arch.source_vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() > self.arch.context_window {
            return Err(PolicyError::ContextOverflow {
                len: target.len(),
                window: self.arch.context_window,
            });
        }
        if let Some(&t) = target.iter().find(|&&t| t >= self.arch.target_vocab) {
            return Err(PolicyError::TokenOutOfVocab {
                kind: "target",
                token: t,
                vocab: self.arch.target_vocab,
            });
        }
        Ok(())
    }

    /// Keys/values from source feature rows `x` (`[S, input_dim]`).
    pub fn encode_features(&self, x: &Array) -> Encoded {
        let s = x.rows();
        let xp = kernels::matmul(&shift_matrix(s, false), x);
        let xn = kernels::matmul(&shift_matrix(s, true), x);
        let phi = position_features(&(0..s).collect::<Vec<_>>(), self.arch.pos_features);
        let k = kernels::add(
            &kernels::add(
                &kernels::matmul(x, self.p(KEY_CUR)),
                &kernels::matmul(&xp, self.p(KEY_PREV)),
            ),
            &kernels::matmul(&phi, self.p(KEY_POS)),
        );
        let v = kernels::add(
            &kernels::matmul(x, self.p(VAL_CUR)),
            &kernels::matmul(&xn, self.p(VAL_NEXT)),
        );
        Encoded { keys: k, values: v }
    }

    /// Encodes discrete source tokens.
    pub fn encode(&self, source: &[usize]) -> Result<Encoded> {
        self.check_source(source)?;
        Ok(self.encode_features(&kernels::embedding(self.p(SOURCE_TABLE), source)))
    }

    /// Logit rows for the given (previous token, position) pairs.
    pub fn logits_rows(&self, enc: &Encoded, prev: &[usize], positions: &[usize]) -> Array {
        let d = self.arch.hidden_dim;
        let yp = kernels::embedding(self.p(TARGET_TABLE), prev);
        let phi = position_features(positions, self.arch.pos_features);
        let q = kernels::add(
            &kernels::matmul(&yp, self.p(QUERY_TOK)),
            &kernels::matmul(&phi, self.p(QUERY_POS)),
        );
        let c = 1.0 / (d as f64).sqrt();
        let scores = kernels::map(&kernels::matmul_nt(&q, &enc.keys), |x| x * c);
        let attn = kernels::softmax_rows(&scores);
        let ctx = kernels::matmul(&attn, &enc.values);
        let pre = kernels::add(
            &kernels::add(
                &kernels::matmul(&ctx, self.p(MIX_CTX)),
                &kernels::matmul(&yp, self.p(MIX_PREV)),
            ),
            self.p(MIX_BIAS),
        );
        let h = kernels::map(&pre, f64::tanh);
        kernels::add(&kernels::matmul(&h, self.p(OUT_W)), self.p(OUT_BIAS))
    }

    /// Teacher-forced logits for a whole target sequence.
    pub fn teacher_forced_logits(&self, enc: &Encoded, target: &[usize]) -> Array {
        let (prev, pos) = self.teacher_inputs(target);
        self.logits_rows(enc, &prev, &pos)
    }

    /// Previous-token and position indices for teacher forcing.
    pub fn teacher_inputs(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut prev = Vec::with_capacity(target.len());
        prev.push(self.arch.start_token());
        prev.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        prev.truncate(target.len());
        (prev, (0..target.len()).collect())
    }

    /// Registers every parameter as a graph leaf under `prefix`.
    /// With `trainable = false` (or for frozen names) leaves are inputs.
    pub fn leaves(&self, g: &mut Graph, prefix: &str, trainable: bool) -> DecoderLeaves {
        let mut leaf = |name: &str| {
            let shape = self.p(name).shape().to_vec();
            let full = format!("{prefix}{name}");
            if trainable && !self.params.is_frozen(name) {
                g.param(&full, &shape)
            } else {
                g.input(&full, &shape)
            }
        };
        DecoderLeaves {
            source_table: leaf(SOURCE_TABLE),
            key_cur: leaf(KEY_CUR),
            key_prev: leaf(KEY_PREV),
            key_pos: leaf(KEY_POS),
            val_cur: leaf(VAL_CUR),
            val_next: leaf(VAL_NEXT),
            target_table: leaf(TARGET_TABLE),
            query_tok: leaf(QUERY_TOK),
            query_pos: leaf(QUERY_POS),
            mix_ctx: leaf(MIX_CTX),
            mix_prev: leaf(MIX_PREV),
            mix_bias: leaf(MIX_BIAS),
            out_w: leaf(OUT_W),
            out_bias: leaf(OUT_BIAS),
        }
    }

    /// Adds this decoder's parameter values to `bindings` under `prefix`.
    pub fn bind(&self, bindings: &mut Bindings, prefix: &str) {
        for (k, v) in &self.params.arrays {
            bindings.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Graph version of [`Decoder::encode_features`]; `x` is `[S, input_dim]`.
    pub fn encode_graph(&self, g: &mut Graph, lv: &DecoderLeaves, x: NodeId, s: usize) -> (NodeId, NodeId) {
        let sp = g.constant(shift_matrix(s, false));
        let sn = g.constant(shift_matrix(s, true));
        let xp = g.matmul(sp, x);
        let xn = g.matmul(sn, x);
        let phi = g.constant(position_features(&(0..s).collect::<Vec<_>>(), self.arch.pos_features));
        let k1 = g.matmul(x, lv.key_cur);
        let k2 = g.matmul(xp, lv.key_prev);
        let k12 = g.add(k1, k2);
        let k3 = g.matmul(phi, lv.key_pos);
        let k = g.add(k12, k3);
        let v1 = g.matmul(x, lv.val_cur);
        let v2 = g.matmul(xn, lv.val_next);
        let v = g.add(v1, v2);
        (k, v)
    }

    /// Graph version of [`Decoder::encode`].
    pub fn encode_tokens_graph(
        &self,
        g: &mut Graph,
        lv: &DecoderLeaves,
        source: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        self.check_source(source)?;
        let x = g.embedding(lv.source_table, source.to_vec());
        Ok(self.encode_graph(g, lv, x, source.len()))
    }

    /// Graph version of [`Decoder::logits_rows`].
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        lv: &DecoderLeaves,
        kv: (NodeId, NodeId),
        prev: &[usize],
        positions: &[usize],
    ) -> NodeId {
        let d = self.arch.hidden_dim;
        let yp = g.embedding(lv.target_table, prev.to_vec());
        let phi = g.constant(position_features(positions, self.arch.pos_features));
        let q1 = g.matmul(yp, lv.query_tok);
        let q2 = g.matmul(phi, lv.query_pos);
        let q = g.add(q1, q2);
        let raw = g.matmul_nt(q, kv.0);
        let scores = g.scale(raw, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, kv.1);
        let m1 = g.matmul(ctx, lv.mix_ctx);
        let m2 = g.matmul(yp, lv.mix_prev);
        let m12 = g.add(m1, m2);
        let pre = g.add(m12, lv.mix_bias);
        let h = g.tanh(pre);
        let o = g.matmul(h, lv.out_w);
        g.add(o, lv.out_bias)
    }
}

/// Which copy of the policy a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Current,
    Reference,
    Snapshot,
}

/// Autoregressive categorical policy over the task's output vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub task: Task,
    pub role: Role,
    pub decoder: Decoder,
}

/// Log-softmax of `logits / temperature` (no scaling at temperature 1).
pub(crate) fn tempered_log_softmax(logits: &[f64], temperature: f64, out: &mut [f64]) {
    if temperature == 1.0 {
        kernels::log_softmax_row(logits, out);
    } else {
        let inv = 1.0 / temperature;
        let scaled: Vec<f64> = logits.iter().map(|&x| x * inv).collect();
        kernels::log_softmax_row(&scaled, out);
    }
}

impl Policy {
    /// Builds a freshly initialized current policy for `task` in `world`.
    pub fn init(world: &World, task: Task, config: &PolicyConfig, seed: u64) -> Result<Self> {
        let (arch, table) = match task {
            Task::Asr => {
                let e = world.spec.embedding_dim;
                let table = Array::matrix(world.acoustic_vocab(), e, world.embedding_table.clone());
                (
                    DecoderArch {
                        source_vocab: world.acoustic_vocab(),
                        target_vocab: world.text_vocab(),
                        target_eos: TEXT_EOS,
                        input_dim: e,
                        hidden_dim: config.hidden_dim,
                        pos_features: config.pos_features,
                        context_window: config.context_window,
                    },
                    Some(table),
                )
            }
            Task::Tts => (
                DecoderArch {
                    source_vocab: world.text_vocab(),
                    target_vocab: world.acoustic_vocab(),
                    target_eos: ACOUSTIC_EOS,
                    input_dim: config.text_embedding_dim,
                    hidden_dim: config.hidden_dim,
                    pos_features: config.pos_features,
                    context_window: config.context_window,
                },
                None,
            ),
        };
        Ok(Self {
            task,
            role: Role::Current,
            decoder: Decoder::init(arch, table, derive_named(seed, "policy-init"))?,
        })
    }

    /// Exact copy with a different role.
    pub fn copy_as(&self, role: Role) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.decoder.arch
    }

    pub fn eos(&self) -> usize {
        self.decoder.arch.target_eos
    }

    pub fn params(&self) -> &ParamStore {
        &self.decoder.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.decoder.params
    }

    pub fn bindings(&self) -> Bindings {
        self.decoder.params.bindings()
    }

    /// Next-token distribution after `prefix` at temperature 1.
    pub fn next_token_probs(&self, condition: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        self.decoder.check_target(prefix)?;
        let enc = self.decoder.encode(condition)?;
        let prev = prefix.last().copied().unwrap_or(self.arch().start_token());
        let logits = self.decoder.logits_rows(&enc, &[prev], &[prefix.len()]);
        let mut p = vec![0.0; logits.len()];
        kernels::softmax_row(logits.data(), &mut p);
        Ok(p)
    }

    /// Teacher-forced per-token log-probabilities of `response` at `temperature`.
    pub fn logprob(&self, condition: &[usize], response: &[usize], temperature: f64) -> Result<Vec<f64>> {
        if response.is_empty() {
            return Err(PolicyError::Empty("response"));
        }
        self.decoder.check_target(response)?;
        let enc = self.decoder.encode(condition)?;
        let logits = self.decoder.teacher_forced_logits(&enc, response);
        let mut row = vec![0.0; logits.last_dim()];
        Ok(response
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                tempered_log_softmax(logits.row(t), temperature, &mut row);
                row[tok]
            })
            .collect())
    }

    /// Greedy decode, EOS included when emitted.
    pub fn greedy(&self, condition: &[usize], t_max: usize) -> Result<Vec<usize>> {
        let enc = self.decoder.encode(condition)?;
        let t_max = t_max.min(self.arch().context_window);
        let mut out = Vec::new();
        let mut prev = self.arch().start_token();
        for t in 0..t_max {
            let logits = self.decoder.logits_rows(&enc, &[prev], &[t]);
            let tok = kernels::argmax(logits.data());
            out.push(tok);
            if tok == self.eos() {
                break;
            }
            prev = tok;
        }
        Ok(out)
    }

    /// Draws `g` responses with per-response seeds `derive_seed(seed, i)`.
    pub fn sample_group(
        &self,
        condition: &[usize],
        g: usize,
        temperature: f64,
        t_max: usize,
        seed: u64,
    ) -> Result<RolloutGroup> {
        if g < 2 {
            return Err(PolicyError::GroupTooSmall(g));
        }
        if !(temperature > 0.0) || t_max == 0 {
            return Err(PolicyError::InvalidConfig(
                "temperature must be positive and T_max at least 1".into(),
            ));
        }
        let enc = self.decoder.encode(condition)?;
        let t_max = t_max.min(self.arch().context_window);
        let v = self.arch().target_vocab;
        let mut group = RolloutGroup::new(condition.to_vec(), temperature);
        let mut logp_t = vec![0.0; v];
        let mut logp_1 = vec![0.0; v];
        for i in 0..g {
            let mut r = rng(derive_seed(seed, i as u64));
            let (mut toks, mut lt, mut l1) = (Vec::new(), Vec::new(), Vec::new());
            let mut prev = self.arch().start_token();
            let mut ended = false;
            for t in 0..t_max {
                let logits = self.decoder.logits_rows(&enc, &[prev], &[t]);
                tempered_log_softmax(logits.data(), temperature, &mut logp_t);
                kernels::log_softmax_row(logits.data(), &mut logp_1);
                let tok = sample_categorical(&logp_t, r.gen::<f64>());
                toks.push(tok);
                lt.push(logp_t[tok]);
                l1.push(logp_1[tok]);
                if tok == self.eos() {
                    ended = true;
                    break;
                }
                prev = tok;
            }
            group.responses.push(toks);
            group.sampling_logprobs.push(lt);
            group.old_logprobs.push(l1);
            group.emitted_eos.push(ended);
            group.validity.push(ended);
        }
        Ok(group)
    }

    /// Teacher-forced log-probability node `[sum |o_i|]` for several
    /// responses to one condition, concatenated in order.
    pub fn response_logprob_graph(
        &self,
        g: &mut Graph,
        lv: &DecoderLeaves,
        condition: &[usize],
        responses: &[&[usize]],
        temperature: f64,
    ) -> Result<NodeId> {
        let (logits, targets) = self.response_logits_graph(g, lv, condition, responses)?;
        let scaled = if temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / temperature)
        };
        let ls = g.log_softmax(scaled);
        Ok(g.gather(ls, targets))
    }

    /// Stacked teacher-forced logits `[sum |o_i|, V]` and the target tokens.
    pub fn response_logits_graph(
        &self,
        g: &mut Graph,
        lv: &DecoderLeaves,
        condition: &[usize],
        responses: &[&[usize]],
    ) -> Result<(NodeId, Vec<usize>)> {
        let kv = self.decoder.encode_tokens_graph(g, lv, condition)?;
        let (mut prev, mut pos, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for r in responses {
            if r.is_empty() {
                return Err(PolicyError::Empty("response"));
            }
            self.decoder.check_target(r)?;
            let (p, q) = self.decoder.teacher_inputs(r);
            prev.extend(p);
            pos.extend(q);
            targets.extend_from_slice(r);
        }
        Ok((self.decoder.logits_graph(g, lv, kv, &prev, &pos), targets))
    }

    /// Greedy transcriber view with a decode cap.
    pub fn transcriber(&self, t_max: usize) -> GreedyDecoder<'_> {
        GreedyDecoder { policy: self, t_max }
    }
}

/// Inverse-CDF draw from log-probabilities with a uniform `u` in `[0, 1)`.
pub(crate) fn sample_categorical(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Greedy decoding as a [`Transcriber`].
pub struct GreedyDecoder<'a> {
    pub policy: &'a Policy,
    pub t_max: usize,
}

impl Transcriber for GreedyDecoder<'_> {
    fn transcribe(&self, condition: &[usize]) -> Vec<usize> {
        let mut out = self.policy.greedy(condition, self.t_max).unwrap_or_default();
        if out.last() == Some(&self.policy.eos()) {
            out.pop();
        }
        out
    }
}

/// Copies `source`'s parameters into `target`.
pub fn sync_weights(source: &Policy, target: &mut Policy) -> Result<()> {
    if source.decoder.arch != target.decoder.arch || !source.params().same_layout(target.params()) {
        return Err(PolicyError::ArchitectureMismatch(
            "source and target policies differ in shape".into(),
        ));
    }
    target.decoder.params = source.decoder.params.clone();
    Ok(())
}

/// G responses to one condition plus everything derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub condition: Vec<usize>,
    pub temperature: f64,
    pub responses: Vec<Vec<usize>>,
    /// Per-token log-probabilities under the sampling distribution.
    pub sampling_logprobs: Vec<Vec<f64>>,
    /// Per-token temperature-1 log-probabilities of the rollout snapshot.
    pub old_logprobs: Vec<Vec<f64>>,
    pub emitted_eos: Vec<bool>,
    /// EOS within T_max and (after scoring) not hallucination-flagged.
    pub validity: Vec<bool>,
    pub rewards: Option<Vec<f64>>,
    pub advantages: Option<Vec<f64>>,
    pub skippable: bool,
}

impl RolloutGroup {
    pub fn new(condition: Vec<usize>, temperature: f64) -> Self {
        Self {
            condition,
            temperature,
            responses: Vec::new(),
            sampling_logprobs: Vec::new(),
            old_logprobs: Vec::new(),
            emitted_eos: Vec::new(),
            validity: Vec::new(),
            rewards: None,
            advantages: None,
            skippable: false,
        }
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    /// Response tokens without the terminal EOS.
    pub fn stripped(&self, i: usize, eos: usize) -> &[usize] {
        crate::rewards::strip_eos(&self.responses[i], eos)
    }
}

/// RL hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub t_max: usize,
    pub seed: u64,
    /// Weight of the DiffRO term in combined modes.
    pub diffro_weight: f64,
    pub gumbel_tau: f64,
    /// Use sampling-temperature log-probs in the importance ratio instead of
    /// temperature-1 ones.
    pub ratio_at_sampling_temperature: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            group_size: 8,
            temperature: 1.0,
            learning_rate: 1e-3,
            clip_eps: 0.2,
            kl_coef: 0.1,
            t_max: 64,
            seed: 0,
            diffro_weight: 1.0,
            gumbel_tau: 1.0,
            ratio_at_sampling_temperature: false,
            max_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    /// Large-model ASR settings: batch 32, group 12, lr 1e-5, KL 0.1.
    pub fn large_scale_asr() -> Self {
        Self {
            batch_size: 32,
            group_size: 12,
            learning_rate: 1e-5,
            kl_coef: 0.1,
            ..Self::default()
        }
    }

    /// Large-model TTS settings: group 8, sampling temperature 1.0.
    pub fn large_scale_tts() -> Self {
        Self {
            batch_size: 16,
            group_size: 8,
            temperature: 1.0,
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coef >= 0.0) {
            return bad("kl_coef must be >= 0");
        }
        if self.t_max == 0 {
            return bad("t_max must be >= 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.gumbel_tau > 0.0) {
            return bad("gumbel_tau must be > 0");
        }
        Ok(())
    }
}

/// Supervised pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Teacher-forced mean cross-entropy of a batch; returns the loss node.
pub fn sft_loss_graph(
    policy: &Policy,
    g: &mut Graph,
    lv: &DecoderLeaves,
    batch: &[(&[usize], &[usize])],
) -> Result<NodeId> {
    let total: usize = batch.iter().map(|(_, y)| y.len()).sum();
    if total == 0 {
        return Err(PolicyError::Empty("batch"));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for (cond, target) in batch {
        let lp = policy.response_logprob_graph(g, lv, cond, &[target], 1.0)?;
        parts.push(g.sum(lp));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    Ok(g.scale(acc, -1.0 / total as f64))
}

/// Pairs (condition, target) for training the policy on `task`.
pub fn sft_pairs(samples: &[Sample], task: Task, world: &World) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    samples
        .iter()
        .map(|s| match task {
            Task::Asr => Ok((s.condition.clone(), s.text.clone())),
            Task::Tts => world
                .render(&s.text)
                .map(|a| (s.text.clone(), a))
                .map_err(|e| PolicyError::InvalidConfig(e.to_string())),
        })
        .collect()
}

/// Cross-entropy pretraining with Adam on minibatches drawn with replacement.
/// Returns the per-step loss curve.
pub fn sft_pretrain(
    policy: &mut Policy,
    pairs: &[(Vec<usize>, Vec<usize>)],
    config: &SftConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(PolicyError::Empty("dataset"));
    }
    let mut opt = Adam::new(config.learning_rate).with_clip(5.0);
    let mut r = rng(derive_named(config.seed, "sft-batches"));
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<(&[usize], &[usize])> = (0..config.batch_size.max(1))
            .map(|_| {
                let (c, y) = &pairs[r.gen_range(0..pairs.len())];
                (c.as_slice(), y.as_slice())
            })
            .collect();
        let mut g = Graph::new();
        let lv = policy.decoder.leaves(&mut g, "", true);
        let loss = sft_loss_graph(policy, &mut g, &lv, &batch)?;
        let eval = g
            .evaluate(&policy.bindings())
            .map_err(|_| PolicyError::Diverged { step })?;
        let value = eval.scalar(loss);
        if !value.is_finite() {
            return Err(PolicyError::Diverged { step });
        }
        let grads = g.gradient(&eval, loss)?;
        opt.step(policy.params_mut(), &grads)
            .map_err(|_| PolicyError::Diverged { step })?;
        curve.push(value);
    }
    Ok(curve)
}

/// Fraction of target tokens predicted by teacher-forced argmax.
pub fn teacher_forced_accuracy(decoder: &Decoder, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, y) in pairs {
        decoder.check_target(y)?;
        let enc = decoder.encode(c)?;
        let logits = decoder.teacher_forced_logits(&enc, y);
        for (t, &tok) in y.iter().enumerate() {
            hit += usize::from(kernels::argmax(logits.row(t)) == tok);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
