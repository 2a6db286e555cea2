//! Group-relative advantages, the clipped surrogate with a KL penalty, and
//! the optimizer step that keeps the rollout snapshot on-policy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Evaluation, GradientReport, Graph, NodeId};
use crate::optim::{Adam, StepInfo};
use crate::policy::{sync_weights, DecoderLeaves, Policy, PolicyError, RolloutGroup};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("advantages missing for group {0}")]
    MissingAdvantages(usize),
    #[error("log-prob shape mismatch in group {group}: {detail}")]
    ShapeMismatch { group: usize, detail: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<crate::autodiff::AutodiffError> for GrpoError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        GrpoError::Policy(e.into())
    }
}

impl From<crate::optim::OptimError> for GrpoError {
    fn from(e: crate::optim::OptimError) -> Self {
        GrpoError::Policy(e.into())
    }
}

pub const DEFAULT_EPS_STD: f64 = 1e-6;

/// Normalized advantages with population std. Returns `(advantages,
/// skippable)`; degenerate groups get all zeros and `skippable = true`.
pub fn advantages(rewards: &[f64], eps_std: f64) -> Result<(Vec<f64>, bool), GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if !(std >= eps_std) {
        return Ok((vec![0.0; g], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// Stores rewards and advantages on a group.
pub fn assign_rewards(group: &mut RolloutGroup, rewards: Vec<f64>, eps_std: f64) -> Result<(), GrpoError> {
    let (adv, skip) = advantages(&rewards, eps_std)?;
    group.rewards = Some(rewards);
    group.advantages = Some(adv);
    group.skippable = skip;
    Ok(())
}

/// Per-token `exp(Δ) - Δ - 1` with `Δ = logp_ref - logp_current`.
pub fn kl_penalty(logp_current: &[f64], logp_ref: &[f64]) -> Vec<f64> {
    assert_eq!(logp_current.len(), logp_ref.len(), "aligned token positions");
    logp_current
        .iter()
        .zip(logp_ref)
        .map(|(&c, &r)| {
            let d = r - c;
            d.exp() - d - 1.0
        })
        .collect()
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoParams {
    pub clip_eps: f64,
    pub kl_coef: f64,
    /// Temperature of the current-policy log-probs in the ratio and KL.
    pub ratio_temperature: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.1,
            ratio_temperature: 1.0,
        }
    }
}

/// Nodes of one group's loss inside a larger graph.
#[derive(Debug, Clone)]
pub struct GroupLoss {
    /// `-L` for this group (scalar).
    pub loss: NodeId,
    pub ratio: NodeId,
    pub kl: NodeId,
    pub surrogate: NodeId,
    /// Current-policy token log-probs `[sum |o_i|]`.
    pub logp: NodeId,
    pub lengths: Vec<usize>,
    /// Per-token advantages, flattened like `ratio`.
    pub token_adv: Vec<f64>,
}

/// Builds `-(1/G) Σ_i mean_t [min(rÂ, clip(r)Â) - β·KL]` for one group.
///
/// `old` and `reference` are per-response token log-probs of the rollout
/// snapshot and of the frozen reference at the ratio temperature.
pub fn group_loss_graph(
    g: &mut Graph,
    lv: &DecoderLeaves,
    policy: &Policy,
    group: &RolloutGroup,
    old: &[Vec<f64>],
    reference: &[Vec<f64>],
    params: &GrpoParams,
) -> Result<GroupLoss, GrpoError> {
    let n = group.size();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let adv = group.advantages.as_ref().ok_or(GrpoError::MissingAdvantages(0))?;
    let mismatch = |detail: String| GrpoError::ShapeMismatch { group: 0, detail };
    if adv.len() != n || old.len() != n || reference.len() != n {
        return Err(mismatch("per-response vectors disagree with group size".into()));
    }
    let lengths: Vec<usize> = group.responses.iter().map(Vec::len).collect();
    for i in 0..n {
        if old[i].len() != lengths[i] || reference[i].len() != lengths[i] {
            return Err(mismatch(format!("response {i} has {} tokens", lengths[i])));
        }
    }
    let responses: Vec<&[usize]> = group.responses.iter().map(Vec::as_slice).collect();
    let logp = policy.response_logprob_graph(g, lv, &group.condition, &responses, params.ratio_temperature)?;
    let flat = |v: &[Vec<f64>]| Array::vector(v.iter().flatten().copied().collect());
    let mut token_adv = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        token_adv.extend(std::iter::repeat(adv[i]).take(lengths[i]));
        weights.extend(std::iter::repeat(1.0 / (n as f64 * lengths[i] as f64)).take(lengths[i]));
    }
    let old_c = g.constant(flat(old));
    let ref_c = g.constant(flat(reference));
    let adv_c = g.constant(Array::vector(token_adv.clone()));
    let w_c = g.constant(Array::vector(weights));

    let log_ratio = g.sub(logp, old_c);
    let ratio = g.exp(log_ratio);
    let unclipped = g.mul(ratio, adv_c);
    let clipped_r = g.clip(ratio, 1.0 - params.clip_eps, 1.0 + params.clip_eps);
    let clipped = g.mul(clipped_r, adv_c);
    let surrogate = g.minimum(unclipped, clipped);
    let delta = g.sub(ref_c, logp);
    let e = g.exp(delta);
    let e_minus = g.sub(e, delta);
    let kl = g.offset(e_minus, -1.0);
    let kl_w = g.scale(kl, params.kl_coef);
    let per_token = g.sub(surrogate, kl_w);
    let weighted = g.mul(per_token, w_c);
    let total = g.sum(weighted);
    let loss = g.neg(total);
    Ok(GroupLoss {
        loss,
        ratio,
        kl,
        surrogate,
        logp,
        lengths,
        token_adv,
    })
}

/// Step diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoDiagnostics {
    /// Per-group, per-token importance ratios.
    pub ratios: Vec<Vec<f64>>,
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub surrogate: f64,
    pub loss: f64,
    pub mean_abs_advantage: f64,
    pub grad_norm: f64,
    /// Estimator used for the KL term.
    pub kl_estimator: String,
}

/// Fills ratio/clip/KL statistics from an evaluated graph.
pub fn diagnostics(eval: &Evaluation, parts: &[GroupLoss], params: &GrpoParams) -> GrpoDiagnostics {
    let mut d = GrpoDiagnostics {
        kl_estimator: "exp(d)-d-1".into(),
        ..Default::default()
    };
    let (mut tokens, mut clipped, mut kl_sum, mut sur_sum, mut adv_sum) = (0usize, 0usize, 0.0, 0.0, 0.0);
    for p in parts {
        let r = eval.get(p.ratio).data().to_vec();
        for (ri, &a) in r.iter().zip(&p.token_adv) {
            let lo = 1.0 - params.clip_eps;
            let hi = 1.0 + params.clip_eps;
            // the clipped branch binds strictly
            if (a > 0.0 && *ri > hi) || (a < 0.0 && *ri < lo) {
                clipped += 1;
            }
            adv_sum += a.abs();
        }
        tokens += r.len();
        kl_sum += eval.get(p.kl).sum();
        sur_sum += eval.get(p.surrogate).sum();
        d.loss += eval.scalar(p.loss);
        d.ratios.push(r);
    }
    if tokens > 0 {
        d.clip_fraction = clipped as f64 / tokens as f64;
        d.kl_mean = kl_sum / tokens as f64;
        d.surrogate = sur_sum / tokens as f64;
        d.mean_abs_advantage = adv_sum / tokens as f64;
    }
    d
}

/// Reference-policy log-probs for every response of a group.
pub fn reference_logprobs(reference: &Policy, group: &RolloutGroup, temperature: f64) -> Result<Vec<Vec<f64>>, GrpoError> {
    group
        .responses
        .iter()
        .map(|r| reference.logprob(&group.condition, r, temperature).map_err(GrpoError::from))
        .collect()
}

/// Old log-probs used in the ratio, per the temperature flag.
pub fn old_logprobs(group: &RolloutGroup, at_sampling_temperature: bool) -> &[Vec<f64>] {
    if at_sampling_temperature {
        &group.sampling_logprobs
    } else {
        &group.old_logprobs
    }
}

/// Mean of group losses over the non-skippable groups; `None` when every
/// group is skippable.
pub fn batch_loss_graph(
    g: &mut Graph,
    lv: &DecoderLeaves,
    policy: &Policy,
    reference: &Policy,
    groups: &[RolloutGroup],
    params: &GrpoParams,
    at_sampling_temperature: bool,
) -> Result<Option<(NodeId, Vec<GroupLoss>)>, GrpoError> {
    let mut parts = Vec::new();
    for (gi, grp) in groups.iter().enumerate() {
        if grp.advantages.is_none() {
            return Err(GrpoError::MissingAdvantages(gi));
        }
        if grp.skippable {
            continue;
        }
        let refs = reference_logprobs(reference, grp, params.ratio_temperature)?;
        let part = group_loss_graph(g, lv, policy, grp, old_logprobs(grp, at_sampling_temperature), &refs, params)
            .map_err(|e| match e {
                GrpoError::ShapeMismatch { detail, .. } => GrpoError::ShapeMismatch { group: gi, detail },
                other => other,
            })?;
        parts.push(part);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let mut acc = parts[0].loss;
    for p in &parts[1..] {
        acc = g.add(acc, p.loss);
    }
    let loss = g.scale(acc, 1.0 / parts.len() as f64);
    Ok(Some((loss, parts)))
}

/// Evaluates `loss`, applies one Adam update to `policy`, then syncs the
/// rollout snapshot. Non-finite losses or gradients leave both untouched.
pub fn step(
    optimizer: &mut Adam,
    policy: &mut Policy,
    snapshot: &mut Policy,
    graph: &Graph,
    loss: NodeId,
) -> Result<(f64, Evaluation, GradientReport, StepInfo), GrpoError> {
    let eval = graph.evaluate(&policy.bindings())?;
    let value = eval.scalar(loss);
    if !value.is_finite() {
        return Err(GrpoError::NonFiniteLoss(value));
    }
    let grads = graph.gradient(&eval, loss)?;
    let info = optimizer.step(policy.params_mut(), &grads)?;
    sync_weights(policy, snapshot)?;
    Ok((value, eval, grads, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient_at;
    use crate::policy::{PolicyConfig, Role};
    use crate::world::{build_world, Task, WorldSpec};
    use rand::{Rng, SeedableRng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn advantage_examples() {
        let (a, s) = advantages(&[5.0, 5.0, 5.0], DEFAULT_EPS_STD).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        assert!(s);
        let (a, s) = advantages(&[1.0, 2.0, 3.0], DEFAULT_EPS_STD).unwrap();
        // oracle: mean 2, population std sqrt(2/3)
        let sd = (2.0f64 / 3.0).sqrt();
        assert!(close(a[0], -1.0 / sd, 1e-12) && a[1] == 0.0 && close(a[2], 1.0 / sd, 1e-12));
        assert!(close(a[2], 1.2247, 1e-4));
        assert!(!s);
        assert_eq!(advantages(&[0.0, 1.0], DEFAULT_EPS_STD).unwrap().0, vec![-1.0, 1.0]);
        assert!(advantages(&[1.0], DEFAULT_EPS_STD).is_err());
    }

    #[test]
    fn advantage_shift_and_scale_invariance() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = r.gen_range(2..=16);
            let x: Vec<f64> = (0..g).map(|_| r.gen_range(-3.0..3.0)).collect();
            let (a, _) = advantages(&x, DEFAULT_EPS_STD).unwrap();
            let c = r.gen_range(0.1..10.0);
            let k = r.gen_range(-5.0..5.0);
            let y: Vec<f64> = x.iter().map(|v| c * v + k).collect();
            let (b, _) = advantages(&y, DEFAULT_EPS_STD).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!(close(*p, *q, 1e-9));
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_penalty(&[-0.3, -2.0], &[-0.3, -2.0]), vec![0.0, 0.0]);
        let v = kl_penalty(&[0.5f64.ln()], &[0.25f64.ln()])[0];
        assert!(close(v, 0.5 - 0.5f64.ln() - 1.0, 1e-15));
        assert!(close(v, 0.1931, 1e-4));
    }

    #[test]
    fn surrogate_examples() {
        assert!(close(clipped_surrogate(1.5, 1.0, 0.2), 1.2, 1e-15));
        assert!(close(clipped_surrogate(0.5, -1.0, 0.2), -0.8, 1e-15));
        assert_eq!(clipped_surrogate(1.1, 2.0, 0.2), 2.2);
    }

    struct Fixture {
        policy: Policy,
        snapshot: Policy,
        reference: Policy,
        group: RolloutGroup,
    }

    fn fixture(hidden: usize) -> Fixture {
        let world = build_world(&WorldSpec::default()).unwrap();
        let cfg = PolicyConfig {
            hidden_dim: hidden,
            pos_features: 4,
            text_embedding_dim: 4,
            ..Default::default()
        };
        let policy = Policy::init(&world, Task::Tts, &cfg, 9).unwrap();
        let snapshot = policy.copy_as(Role::Snapshot);
        let reference = policy.copy_as(Role::Reference);
        let mut group = snapshot.sample_group(&[5, 9, 2], 4, 1.0, 6, 1).unwrap();
        assign_rewards(&mut group, vec![1.0, 0.0, 0.5, 0.2], DEFAULT_EPS_STD).unwrap();
        Fixture {
            policy,
            snapshot,
            reference,
            group,
        }
    }

    #[test]
    fn fresh_group_has_unit_ratio_and_zero_kl() {
        let f = fixture(8);
        let mut g = Graph::new();
        let lv = f.policy.decoder.leaves(&mut g, "", true);
        let p = GrpoParams::default();
        let (loss, parts) = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group.clone()], &p, false)
            .unwrap()
            .unwrap();
        let eval = g.evaluate(&f.policy.bindings()).unwrap();
        let d = diagnostics(&eval, &parts, &p);
        assert!(d.ratios[0].iter().all(|&r| r == 1.0));
        assert_eq!(d.kl_mean, 0.0);
        assert_eq!(d.clip_fraction, 0.0);
        let grads = g.gradient(&eval, loss).unwrap();
        assert!(grads.norm() > 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut f = fixture(6);
        // move the current policy away from snapshot/reference so ratio and KL are non-trivial
        for a in f.policy.params_mut().arrays.values_mut() {
            for (i, v) in a.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i as f64) * 0.37).sin();
            }
        }
        let mut g = Graph::new();
        let lv = f.policy.decoder.leaves(&mut g, "", true);
        let p = GrpoParams { kl_coef: 0.3, ..Default::default() };
        let (loss, _) = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group.clone()], &p, false)
            .unwrap()
            .unwrap();
        for name in g.parameters() {
            let n = f.policy.params().get(&name).len();
            let err = check_gradient_at(&g, &f.policy.bindings(), loss, &name, 1e-6, (0..n).step_by(2)).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn repeated_steps_reduce_loss_and_favor_best_response() {
        let mut f = fixture(16);
        let p = GrpoParams { kl_coef: 0.0, ..Default::default() };
        let best = 0;
        let before = f.policy.logprob(&f.group.condition, &f.group.responses[best], 1.0).unwrap();
        let mut opt = Adam::new(1e-2);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let mut g = Graph::new();
            let lv = f.policy.decoder.leaves(&mut g, "", true);
            let (loss, _) = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group.clone()], &p, false)
                .unwrap()
                .unwrap();
            let mut snap = f.snapshot.clone();
            let (v, ..) = step(&mut opt, &mut f.policy, &mut snap, &g, loss).unwrap();
            assert_eq!(snap.params(), f.policy.params());
            losses.push(v);
        }
        assert!(losses.last().unwrap() < &losses[0]);
        let after = f.policy.logprob(&f.group.condition, &f.group.responses[best], 1.0).unwrap();
        assert!(after.iter().sum::<f64>() > before.iter().sum::<f64>());
    }

    #[test]
    fn one_update_moves_extreme_responses_apart() {
        let mut f = fixture(16);
        let p = GrpoParams { kl_coef: 0.0, ..Default::default() };
        let lp = |pol: &Policy, i: usize| pol.logprob(&f.group.condition, &f.group.responses[i], 1.0).unwrap().iter().sum::<f64>();
        let (hi0, lo0) = (lp(&f.policy, 0), lp(&f.policy, 1));
        let mut g = Graph::new();
        let lv = f.policy.decoder.leaves(&mut g, "", true);
        let (loss, _) = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group.clone()], &p, false)
            .unwrap()
            .unwrap();
        let mut opt = Adam::new(1e-4);
        step(&mut opt, &mut f.policy, &mut f.snapshot, &g, loss).unwrap();
        assert!(lp(&f.policy, 0) > hi0);
        assert!(lp(&f.policy, 1) < lo0);
    }

    #[test]
    fn skipped_sync_lets_ratios_drift() {
        let mut f = fixture(8);
        let p = GrpoParams::default();
        let mut opt = Adam::new(1e-2);
        let stale = f.snapshot.clone();
        let mut max_dev: f64 = 0.0;
        for _ in 0..2 {
            let mut g = Graph::new();
            let lv = f.policy.decoder.leaves(&mut g, "", true);
            let (loss, parts) = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group.clone()], &p, false)
                .unwrap()
                .unwrap();
            let mut scratch = stale.clone();
            let (_, eval, ..) = step(&mut opt, &mut f.policy, &mut scratch, &g, loss).unwrap();
            let d = diagnostics(&eval, &parts, &p);
            max_dev = d.ratios[0].iter().fold(max_dev, |m, r| m.max((r - 1.0).abs()));
        }
        // second step evaluated ratios against the stale rollout log-probs
        assert!(max_dev > 0.0);
        let _ = f.snapshot;
    }

    #[test]
    fn missing_advantages_rejected() {
        let mut f = fixture(8);
        f.group.advantages = None;
        let mut g = Graph::new();
        let lv = f.policy.decoder.leaves(&mut g, "", true);
        let r = batch_loss_graph(&mut g, &lv, &f.policy, &f.reference, &[f.group], &GrpoParams::default(), false);
        assert_eq!(r.unwrap_err(), GrpoError::MissingAdvantages(0));
    }
}
