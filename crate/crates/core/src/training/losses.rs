use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::domain::TransitionRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Actor, AdamState, Critic};

use super::dataset::{ClassWeights, Sample};

const CHUNK: usize = 32;

/// Per-head coefficients of the composed policy loss
/// `−Σ_h w_h log π_h(label) − w_ent Σ_h H_h`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadLossWeights {
    pub mode: f64,
    pub target: f64,
    pub capacity: f64,
    pub bid: f64,
    pub entropy: f64,
}

/// Loss of one sample and its gradient w.r.t. the actor output vector and
/// the bid log-sd.
pub fn head_loss(actor: &Actor, out: &[f64], s: &Sample, w: &HeadLossWeights) -> Result<(f64, Vec<f64>, f64)> {
    let lay = actor.layout;
    let mut grad = vec![0.0; out.len()];
    let mut loss = 0.0;
    if w.mode != 0.0 || w.entropy != 0.0 {
        let d = actor.mode_dist(out, &s.mode_mask)?;
        loss -= w.mode * d.log_prob(s.mode)? + w.entropy * d.entropy();
        let gl = d.grad_log_prob(s.mode)?;
        let ge = d.grad_entropy();
        for (k, i) in lay.mode().enumerate() {
            grad[i] -= w.mode * gl[k] + w.entropy * ge[k];
        }
    }
    if let Some(t) = s.target {
        if (w.target != 0.0 || w.entropy != 0.0) && s.target_mask.iter().any(|&m| m) {
            let d = actor.target_dist(out, &s.target_mask)?;
            loss -= w.target * d.log_prob(t)? + w.entropy * d.entropy();
            let gl = d.grad_log_prob(t)?;
            let ge = d.grad_entropy();
            for (k, i) in lay.target().enumerate() {
                grad[i] -= w.target * gl[k] + w.entropy * ge[k];
            }
        }
    }
    if w.capacity != 0.0 || w.entropy != 0.0 {
        let d = actor.capacity_dist(out)?;
        loss -= w.capacity * d.log_prob(s.capacity)? + w.entropy * d.entropy();
        let gl = d.grad_log_prob(s.capacity)?;
        let ge = d.grad_entropy();
        for (k, i) in lay.capacity().enumerate() {
            grad[i] -= w.capacity * gl[k] + w.entropy * ge[k];
        }
    }
    let mut d_log_sd = 0.0;
    if w.bid != 0.0 || w.entropy != 0.0 {
        let d = actor.bid_dist(out)?;
        loss -= w.bid * d.log_prob_latent(s.latent) + w.entropy * d.latent_entropy();
        let (gm, gs) = d.grad_log_prob(s.latent);
        grad[lay.bid()] -= w.bid * gm;
        d_log_sd -= w.bid * gs + w.entropy;
    }
    Ok((loss, grad, d_log_sd))
}

struct Acc {
    loss: f64,
    grads: Vec<f64>,
    err: Option<String>,
    dropped: usize,
}

/// Sum of per-sample losses and gradients. `per_sample` returns `None` to
/// drop a sample.
fn actor_batch<F>(exec: Exec, actor: &Actor, batch: &[(&Sample, f64)], per_sample: F) -> Result<(f64, Vec<f64>, usize)>
where
    F: Fn(&[f64], &Sample, f64) -> Result<Option<(f64, Vec<f64>, f64)>> + Sync + Send,
{
    let n = actor.param_count();
    let acc = exec.fold_chunks(
        batch,
        CHUNK,
        || Acc { loss: 0.0, grads: vec![0.0; n], err: None, dropped: 0 },
        |acc, (s, aux)| {
            if acc.err.is_some() {
                return;
            }
            let mut step = || -> Result<()> {
                let cache = actor.forward(&s.features)?;
                match per_sample(cache.output(), s, *aux)? {
                    Some((l, g, ds)) => {
                        acc.loss += l;
                        actor.backward(&cache, &g, ds, &mut acc.grads)?;
                    }
                    None => acc.dropped += 1,
                }
                Ok(())
            };
            if let Err(e) = step() {
                acc.err = Some(e.to_string());
            }
        },
        |total, part| {
            if total.err.is_none() {
                total.err = part.err;
            }
            total.loss += part.loss;
            total.dropped += part.dropped;
            for (t, p) in total.grads.iter_mut().zip(&part.grads) {
                *t += p;
            }
        },
    );
    if let Some(e) = acc.err {
        return Err(Error::InvalidInput(e));
    }
    Ok((acc.loss, acc.grads, acc.dropped))
}

fn mean_step(actor: &mut Actor, adam: &mut AdamState, loss: f64, mut grads: Vec<f64>, count: usize) -> Result<f64> {
    if count == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / count as f64;
    grads.iter_mut().for_each(|g| *g *= inv);
    actor.apply(adam, &grads)?;
    Ok(loss * inv)
}

/// One behavior-cloning step: class-weighted masked cross-entropy on the
/// discrete heads plus the bid negative log-likelihood. Returns the mean
/// loss before the step.
pub fn bc_update(actor: &mut Actor, adam: &mut AdamState, batch: &[&Sample], weights: Option<&ClassWeights>, exec: Exec) -> Result<f64> {
    let items: Vec<(&Sample, f64)> = batch.iter().map(|s| (*s, 0.0)).collect();
    let (loss, grads, _) = actor_batch(exec, actor, &items, |out, s, _| {
        let (wm, wt, wc) = match weights {
            Some(cw) => (cw.mode[s.mode], s.target.map_or(0.0, |t| cw.target[t]), cw.capacity[s.capacity]),
            None => (1.0, 1.0, 1.0),
        };
        let w = HeadLossWeights { mode: wm, target: wt, capacity: wc, bid: 1.0, entropy: 0.0 };
        head_loss(actor, out, s, &w).map(Some)
    })?;
    mean_step(actor, adam, loss, grads, batch.len())
}

/// `exp(clip(A, −β, β) / β)`.
pub fn awr_weight(advantage: f64, beta: f64) -> f64 {
    (advantage.clamp(-beta, beta) / beta).exp()
}

/// One advantage-weighted regression step over mode, target and bid heads.
pub fn awr_update(
    actor: &mut Actor,
    adam: &mut AdamState,
    batch: &[&Sample],
    advantages: &[f64],
    beta: f64,
    entropy_coef: f64,
    exec: Exec,
) -> Result<f64> {
    if advantages.len() != batch.len() {
        return Err(Error::Shape { expected: batch.len(), got: advantages.len() });
    }
    let items: Vec<(&Sample, f64)> = batch.iter().copied().zip(advantages.iter().copied()).collect();
    let (loss, grads, _) = actor_batch(exec, actor, &items, |out, s, adv| {
        let wt = awr_weight(adv, beta);
        let w = HeadLossWeights { mode: wt, target: wt, capacity: 0.0, bid: wt, entropy: entropy_coef };
        head_loss(actor, out, s, &w).map(Some)
    })?;
    mean_step(actor, adam, loss, grads, batch.len())
}

/// Multiplier of ∇ log π in the gradient of the clipped surrogate; exactly
/// zero when the clip is active.
pub fn ppo_sample_coefficient(ratio: f64, advantage: f64, eps: f64) -> f64 {
    if (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps) {
        0.0
    } else {
        advantage * ratio
    }
}

fn ppo_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Mean-squared-error step of the critic; returns the loss before the step.
pub fn fit_critic(critic: &mut Critic, adam: &mut AdamState, states: &[&[f64]], targets: &[f64], exec: Exec) -> Result<f64> {
    if states.len() != targets.len() {
        return Err(Error::Shape { expected: states.len(), got: targets.len() });
    }
    if states.is_empty() {
        return Ok(0.0);
    }
    let n = critic.net.len();
    let items: Vec<(&[f64], f64)> = states.iter().copied().zip(targets.iter().copied()).collect();
    let net = &critic.net;
    let acc = exec.fold_chunks(
        &items,
        CHUNK,
        || Acc { loss: 0.0, grads: vec![0.0; n], err: None, dropped: 0 },
        |acc, (x, y)| {
            if acc.err.is_some() {
                return;
            }
            let r = net.forward(x).and_then(|cache| {
                let e = cache.output()[0] - y;
                acc.loss += e * e;
                net.backward(&cache, &[2.0 * e], &mut acc.grads).map(|_| ())
            });
            if let Err(e) = r {
                acc.err = Some(e.to_string());
            }
        },
        |total, part| {
            if total.err.is_none() {
                total.err = part.err;
            }
            total.loss += part.loss;
            for (t, p) in total.grads.iter_mut().zip(&part.grads) {
                *t += p;
            }
        },
    );
    if let Some(e) = acc.err {
        return Err(Error::InvalidInput(e));
    }
    let inv = 1.0 / items.len() as f64;
    let grads: Vec<f64> = acc.grads.iter().map(|g| g * inv).collect();
    adam.step(critic.net.params_mut(), &grads)?;
    Ok(acc.loss * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub dropped: usize,
}

/// Clipped-surrogate update of the bid head (plus entropy bonus) and a
/// regression of the critic onto the GAE returns, over several epochs of
/// shuffled minibatches. Advantages are normalized over the batch.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng + ?Sized>(
    actor: &mut Actor,
    actor_adam: &mut AdamState,
    critic: &mut Critic,
    critic_adam: &mut AdamState,
    samples: &[Sample],
    sample_adv: &[f64],
    states: &[Vec<f64>],
    returns: &[f64],
    hp: &super::TrainingHyperparams,
    exec: Exec,
    rng: &mut R,
) -> Result<PpoStats> {
    if sample_adv.len() != samples.len() || states.len() != returns.len() {
        return Err(Error::Shape { expected: samples.len(), got: sample_adv.len() });
    }
    if samples.iter().any(|s| s.old_log_prob.is_none()) {
        return Err(Error::InvalidInput("rollout sample without a stored log-probability".into()));
    }
    let n = samples.len().max(1) as f64;
    let mean = sample_adv.iter().sum::<f64>() / n;
    let sd = (sample_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let adv: Vec<f64> = sample_adv.iter().map(|a| (a - mean) / (sd + 1e-8)).collect();

    let mut stats = PpoStats::default();
    let (mut actor_steps, mut critic_steps) = (0usize, 0usize);
    let clipped = AtomicUsize::new(0);
    let mut seen = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state_order: Vec<usize> = (0..states.len()).collect();
    let eps = hp.ppo_clip;
    for _ in 0..hp.epochs_per_update {
        order.shuffle(rng);
        state_order.shuffle(rng);
        let mb = samples.len().div_ceil(hp.ppo_minibatches).max(1);
        for chunk in order.chunks(mb) {
            let items: Vec<(&Sample, f64)> = chunk.iter().map(|&i| (&samples[i], adv[i])).collect();
            let frozen = &*actor;
            let (loss, grads, dropped) = actor_batch(exec, frozen, &items, |out, s, a| {
                let d = frozen.bid_dist(out)?;
                let ratio = (d.log_prob_latent(s.latent) - s.old_log_prob.unwrap()).exp();
                if !ratio.is_finite() {
                    log::warn!("dropping rollout sample with ratio {ratio}");
                    return Ok(None);
                }
                let c = ppo_sample_coefficient(ratio, a, eps);
                if c == 0.0 && a != 0.0 {
                    clipped.fetch_add(1, Ordering::Relaxed);
                }
                let (gm, gs) = d.grad_log_prob(s.latent);
                let mut g = vec![0.0; out.len()];
                g[frozen.layout.bid()] = -c * gm;
                let loss = -ppo_surrogate(ratio, a, eps) - hp.entropy_coef * d.latent_entropy();
                Ok(Some((loss, g, -c * gs - hp.entropy_coef)))
            })?;
            seen += items.len();
            stats.dropped += dropped;
            stats.actor_loss += mean_step(actor, actor_adam, loss, grads, items.len() - dropped)?;
            actor_steps += 1;
        }
        let smb = states.len().div_ceil(hp.ppo_minibatches).max(1);
        for chunk in state_order.chunks(smb) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| states[i].as_slice()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
            stats.critic_loss += fit_critic(critic, critic_adam, &xs, &ys, exec)?;
            critic_steps += 1;
        }
    }
    stats.actor_loss /= actor_steps.max(1) as f64;
    stats.critic_loss /= critic_steps.max(1) as f64;
    stats.clip_fraction = clipped.into_inner() as f64 / seen.max(1) as f64;
    Ok(stats)
}

/// Fraction of multi-bidder auctions in which the greedy policy bids pick
/// the same winner as the logged bids.
pub fn action_agreement<'a, I>(actor: &Actor, records: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a TransitionRecord>,
{
    let (mut agree, mut total) = (0usize, 0usize);
    for r in records {
        let bidders: Vec<usize> =
            (0..r.actions.len()).filter(|&s| r.actions[s].is_some() && r.mask.get(s).copied().unwrap_or(false)).collect();
        if bidders.len() < 2 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &s in &bidders {
            let obs = r.observations[s].as_ref().ok_or_else(|| Error::InvalidInput("bidder without observation".into()))?;
            let out = actor.forward(&obs.features)?;
            let bid = actor.bid_dist(out.output())?.mode();
            if best.is_none_or(|(_, b)| bid < b) {
                best = Some((s, bid));
            }
        }
        total += 1;
        if best.map(|(s, _)| s) == Some(r.winner_id) {
            agree += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}
