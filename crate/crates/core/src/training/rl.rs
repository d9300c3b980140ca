use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{marginal, mean_iou, tvd};
use crate::models::{argmax_labels, ModelSuite, PatchProbs, PolicyNet};
use crate::tensorkit::{AdamState, Graph, Mode, RngStream, Scalar, Tensor};

use super::{compute_reward, route, sample_action, schedule, Action, EventLog, IouTable, Phase, Prepared};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

/// Policy-gradient hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Subtract the mean reward of the rest of the batch before weighting log-probabilities.
    pub baseline: bool,
    /// Weight each patch's log-probability by its own reward term instead of the image total.
    pub patch_credit: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { lambda: 0.5, epochs: 50, lr: 1e-3, batch_size: 16, baseline: true, patch_credit: false }
    }
}

impl RlConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid(format!("bad RL config {self:?}")));
        }
        Ok(())
    }
}

/// Records `−mean_b Σ_p w[b][p] · log π(a[b][p])` on the graph.
pub fn policy_gradient_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: crate::tensorkit::Var,
    actions: &[Action],
    weights: &[Vec<f64>],
) -> Result<crate::tensorkit::Var> {
    let shape = g.value(logits).shape().to_vec();
    let b = shape[0];
    let cells: usize = shape[2..].iter().product();
    if actions.len() != b || weights.len() != b || actions.iter().any(|a| a.len() != cells) {
        return Err(Error::shape("policy gradient", format!("{} actions for logits {shape:?}", actions.len())));
    }
    if weights.iter().any(|w| w.len() != cells) {
        return Err(Error::shape("policy gradient", "weights do not match the patch grid"));
    }
    let logp = g.log_softmax(logits)?;
    let logp = g.clamp_min(logp, PROB_FLOOR.ln());
    let index: Vec<u32> = actions.iter().flatten().map(|&a| a as u32).collect();
    let taken = g.pick(logp, &index)?;
    let w = Tensor::new(
        g.value(taken).shape().to_vec(),
        weights.iter().flatten().map(|&v| T::from_f64_lossy(v)).collect(),
    )?;
    let weighted = g.mul_const(taken, &w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// One REINFORCE ascent step on fixed actions and weights; returns the surrogate loss.
pub fn policy_update<T: Scalar>(
    policy: &mut PolicyNet<T>,
    adam: &mut AdamState<T>,
    states: &Tensor<T>,
    actions: &[Action],
    weights: &[Vec<f64>],
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new(Mode::Train);
        let sv = g.input_ref(states);
        let logits = policy.forward(&mut g, sv)?;
        let loss = policy_gradient_loss(&mut g, logits, actions, weights)?;
        let lv = g.value(loss).item().to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::Diverged("non-finite policy loss".into()));
        }
        (lv, g.backward(loss)?.into_params())
    };
    adam.step(&mut policy.params, &grads)?;
    Ok(loss)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlHistory {
    pub mean_reward: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Turns a batch of reward breakdowns into per-patch log-probability weights.
///
/// Image credit weights every patch by the image total; patch credit uses each
/// patch's own term. With `baseline`, the mean of the *other* items in the batch
/// is subtracted, which keeps the estimator unbiased.
fn credit_weights(rewards: &[super::RewardBreakdown], patch: bool, baseline: bool) -> Vec<Vec<f64>> {
    if patch {
        let all: Vec<f64> = rewards.iter().flat_map(|r| (0..r.gains.len()).map(|p| r.term(p))).collect();
        let (n, sum) = (all.len() as f64, all.iter().sum::<f64>());
        let mut it = all.into_iter();
        rewards
            .iter()
            .map(|r| {
                (0..r.gains.len())
                    .map(|_| {
                        let t = it.next().unwrap_or(0.0);
                        if baseline && n > 1.0 {
                            t - (sum - t) / (n - 1.0)
                        } else {
                            t
                        }
                    })
                    .collect()
            })
            .collect()
    } else {
        let (n, sum) = (rewards.len() as f64, rewards.iter().map(|r| r.total).sum::<f64>());
        rewards
            .iter()
            .map(|r| {
                let w = if baseline && n > 1.0 { r.total - (sum - r.total) / (n - 1.0) } else { r.total };
                vec![w; r.gains.len()]
            })
            .collect()
    }
}

/// One pass of policy-gradient updates over `prep` with cached IoUs.
fn rl_epoch<T: Scalar>(
    policy: &mut PolicyNet<T>,
    adam: &mut AdamState<T>,
    costs: &[f64],
    prep: &Prepared<T>,
    ious: &IouTable,
    lambda: f64,
    alpha: f64,
    batch_size: usize,
    patch_credit: bool,
    baseline: bool,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..prep.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for idx in order.chunks(batch_size) {
        let states = prep.states(idx)?;
        let probs = policy.probabilities(&states)?;
        let mut actions = Vec::with_capacity(idx.len());
        let mut rewards = Vec::with_capacity(idx.len());
        for (&i, pr) in idx.iter().zip(&probs) {
            let a = sample_action(pr, alpha, rng)?;
            rewards.push(compute_reward(&a, &ious[i], lambda, costs)?);
            actions.push(a);
        }
        policy_update(policy, adam, &states, &actions, &credit_weights(&rewards, patch_credit, baseline))?;
        total += rewards.iter().map(|r| r.total).sum::<f64>();
    }
    Ok(total / prep.len() as f64)
}

/// Trains the routing policy against frozen task models.
pub fn train_rl<T: Scalar>(
    policy: &mut PolicyNet<T>,
    suite: &ModelSuite<T>,
    prep: &Prepared<T>,
    ious: &IouTable,
    cfg: &RlConfig,
    rng: &mut RngStream,
    log: &mut EventLog,
) -> Result<RlHistory> {
    cfg.validate()?;
    if prep.is_empty() {
        return Err(Error::invalid("empty RL dataset"));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut history = RlHistory::default();
    let base = rng.named("train_rl");
    for epoch in 0..cfg.epochs {
        let alpha = schedule(Phase::RlPretrain, epoch, cfg.epochs).alpha;
        let mut erng = base.fork(epoch as u64);
        let r = rl_epoch(
            policy,
            &mut adam,
            suite.costs(),
            prep,
            ious,
            cfg.lambda,
            alpha,
            cfg.batch_size,
            cfg.patch_credit,
            cfg.baseline,
            &mut erng,
        )?;
        log.record("train_rl", epoch, &[("reward", r), ("alpha", alpha), ("lambda", cfg.lambda)]);
        history.mean_reward.push(r);
        history.alpha.push(alpha);
    }
    Ok(history)
}

/// Joint fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub rl: RlConfig,
    /// Learning rate of the large task models.
    pub model_lr: f64,
}

/// Alternates, per batch, cross-entropy updates of every large model on the
/// patches routed to it and a policy-gradient update; the small model stays frozen.
pub fn finetune<T: Scalar>(
    suite: &mut ModelSuite<T>,
    policy: &mut PolicyNet<T>,
    prep: &Prepared<T>,
    cfg: &FinetuneConfig,
    rng: &mut RngStream,
    log: &mut EventLog,
) -> Result<RlHistory> {
    cfg.rl.validate()?;
    if prep.is_empty() {
        return Err(Error::invalid("empty fine-tuning dataset"));
    }
    let k = prep.num_classes();
    let costs = suite.costs().to_vec();
    let mut model_adam: Vec<AdamState<T>> = (0..suite.len()).map(|_| AdamState::new(cfg.model_lr)).collect();
    let mut adam = AdamState::new(cfg.rl.lr);
    let mut history = RlHistory::default();
    let base = rng.named("finetune");
    for epoch in 0..cfg.rl.epochs {
        let alpha = schedule(Phase::Finetune, epoch, cfg.rl.epochs).alpha;
        let mut erng = base.fork(epoch as u64);
        let mut order: Vec<usize> = (0..prep.len()).collect();
        erng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.rl.batch_size) {
            let states = prep.states(idx)?;
            let probs: Vec<PatchProbs> = policy.probabilities(&states)?;
            let actions = probs.iter().map(|p| sample_action(p, alpha, &mut erng)).collect::<Result<Vec<_>>>()?;
            let mut ious: Vec<Vec<Vec<Option<f64>>>> = idx
                .iter()
                .map(|&i| {
                    (0..prep.patches)
                        .map(|p| {
                            let mut row = vec![None; suite.len()];
                            row[0] = mean_iou(&prep.small_patch_labels[i][p], &prep.gt_patches[i][p], k).ok();
                            row
                        })
                        .collect()
                })
                .collect();
            for m in 1..suite.len() {
                let picks: Vec<(usize, usize)> = actions
                    .iter()
                    .enumerate()
                    .flat_map(|(b, a)| a.iter().enumerate().filter(move |(_, &x)| x == m).map(move |(p, _)| (b, p)))
                    .collect();
                if picks.is_empty() {
                    continue;
                }
                let x = Tensor::stack(&picks.iter().map(|&(b, p)| prep.inputs[idx[b]][p].clone()).collect::<Vec<_>>())?;
                let labels: Vec<u32> = picks
                    .iter()
                    .flat_map(|&(b, p)| prep.gt_patches[idx[b]][p].labels.iter().map(|&l| l as u32))
                    .collect();
                let model = &mut suite.models[m];
                let (preds, grads) = {
                    let mut g = Graph::new(Mode::Train);
                    let xv = g.input(x);
                    let logits = model.forward(&mut g, xv, &mut erng)?;
                    let preds = argmax_labels(g.value(logits));
                    let loss = g.cross_entropy(logits, &labels)?;
                    if !g.value(loss).item().to_f64_lossy().is_finite() {
                        return Err(Error::Diverged(format!("model {m} loss is non-finite during fine-tuning")));
                    }
                    (preds, g.backward(loss)?.into_params())
                };
                model_adam[m].step(&mut model.params, &grads)?;
                for (&(b, p), pred) in picks.iter().zip(&preds) {
                    ious[b][p][m] = Some(mean_iou(pred, &prep.gt_patches[idx[b]][p], k)?);
                }
            }
            let rewards = actions
                .iter()
                .zip(&ious)
                .map(|(a, table)| compute_reward(a, table, cfg.rl.lambda, &costs))
                .collect::<Result<Vec<_>>>()?;
            policy_update(
                policy,
                &mut adam,
                &states,
                &actions,
                &credit_weights(&rewards, cfg.rl.patch_credit, cfg.rl.baseline),
            )?;
            total += rewards.iter().map(|r| r.total).sum::<f64>();
        }
        let r = total / prep.len() as f64;
        log.record("finetune", epoch, &[("reward", r), ("alpha", alpha), ("lambda", cfg.rl.lambda)]);
        history.mean_reward.push(r);
        history.alpha.push(alpha);
    }
    Ok(history)
}

/// Budgeted drift away from a reference routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdConfig {
    pub threshold: f64,
    pub lambda_start: f64,
    /// Increase of λ per epoch.
    pub lambda_step: f64,
    pub max_epochs: usize,
    pub alpha: f64,
    pub rl: RlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdOutcome {
    /// Epochs of training contained in the returned policy.
    pub epochs: usize,
    /// λ used in the last retained epoch (`lambda_start` if none).
    pub lambda: f64,
    /// Distance of the returned policy's marginal from the reference.
    pub tvd: f64,
    /// Whether the threshold was hit before the epoch cap.
    pub reached: bool,
    pub tvd_history: Vec<f64>,
}

/// Marginal model-assignment distribution of greedy routing over `prep`.
pub fn routing_marginal<T: Scalar>(policy: &PolicyNet<T>, prep: &Prepared<T>) -> Result<Vec<f64>> {
    let actions: Vec<usize> = route(policy, prep)?.into_iter().flatten().collect();
    Ok(marginal(&actions, policy.spec.num_actions))
}

/// Trains the policy with a linearly increasing λ and stops at the first
/// epoch whose validation marginal is at least `threshold` away (TVD) from
/// `reference`, returning the last policy still below it.
pub fn finetune_tvd<T: Scalar>(
    policy: &mut PolicyNet<T>,
    suite: &ModelSuite<T>,
    train: &Prepared<T>,
    ious: &IouTable,
    val: &Prepared<T>,
    reference: &[f64],
    cfg: &TvdConfig,
    rng: &mut RngStream,
    log: &mut EventLog,
) -> Result<TvdOutcome> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::invalid(format!("TVD threshold {} outside [0, 1]", cfg.threshold)));
    }
    cfg.rl.validate()?;
    let mut adam = AdamState::new(cfg.rl.lr);
    let base = rng.named("finetune_tvd");
    let mut prev: Option<(PolicyNet<T>, f64)> = None;
    let mut history = Vec::new();
    let mut lambda = cfg.lambda_start;
    for epoch in 0..=cfg.max_epochs {
        let d = tvd(&routing_marginal(policy, val)?, reference)?;
        history.push(d);
        log.record("finetune_tvd", epoch, &[("tvd", d), ("lambda", lambda)]);
        if d >= cfg.threshold {
            let (epochs, tvd_kept) = match prev.take() {
                Some((p, pd)) => {
                    *policy = p;
                    (epoch - 1, pd)
                }
                None => (0, d),
            };
            let kept_lambda = if epochs == 0 { cfg.lambda_start } else { lambda_at(cfg, epochs - 1) };
            return Ok(TvdOutcome { epochs, lambda: kept_lambda, tvd: tvd_kept, reached: true, tvd_history: history });
        }
        if epoch == cfg.max_epochs {
            log.warn(
                "finetune_tvd",
                epoch,
                format!("TVD stayed below {} for {} epochs", cfg.threshold, cfg.max_epochs),
            );
            return Ok(TvdOutcome { epochs: epoch, lambda, tvd: d, reached: false, tvd_history: history });
        }
        prev = Some((policy.clone(), d));
        lambda = lambda_at(cfg, epoch);
        let mut erng = base.fork(epoch as u64);
        rl_epoch(
            policy,
            &mut adam,
            suite.costs(),
            train,
            ious,
            lambda,
            cfg.alpha,
            cfg.rl.batch_size,
            cfg.rl.patch_credit,
            cfg.rl.baseline,
            &mut erng,
        )?;
    }
    unreachable!("loop returns at the epoch cap")
}

fn lambda_at(cfg: &TvdConfig, epoch: usize) -> f64 {
    (cfg.lambda_start + cfg.lambda_step * epoch as f64).clamp(0.0, 1.0)
}
