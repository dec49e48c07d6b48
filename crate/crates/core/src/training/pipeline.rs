use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::PolicyScheduler;
use crate::config::ScenarioConfig;
use crate::domain::TransitionRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{Actor, AdamState, Checkpoint, Critic};
use crate::sim::World;

use super::dataset::{samples_from_records, OfflineDataset, Sample};
use super::losses::{action_agreement, awr_update, bc_update, fit_critic, head_loss, ppo_update, HeadLossWeights};
use super::{build_ct_state, compute_gae, ct_width, discounted_returns, DualVariables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Phase::A),
            "B" => Ok(Phase::B),
            "C" => Ok(Phase::C),
            other => Err(Error::Config(format!("unknown phase '{other}' (expected A, B or C)"))),
        }
    }
}

/// Parse a comma-separated phase list; only contiguous runs are accepted.
pub fn parse_phases(spec: &str) -> Result<Vec<Phase>> {
    let mut phases: Vec<Phase> = spec.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    phases.sort();
    phases.dedup();
    if phases.is_empty() {
        return Err(Error::Config("no training phase requested".into()));
    }
    if phases.windows(2).any(|w| w[1] as u8 != w[0] as u8 + 1) {
        let names: Vec<String> = phases.iter().map(|p| p.to_string()).collect();
        return Err(Error::Config(format!("phases {} are not contiguous", names.join(","))));
    }
    Ok(phases)
}

/// One row of the training curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub phase: Phase,
    pub update_step: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_reward: f64,
    /// Phase A: held-out winner agreement. Phase C: PPO clip fraction.
    pub metric: f64,
    /// Mean reward of the samples tagged with each host slot.
    pub robot_reward: Vec<f64>,
    pub lambda_d: f64,
    pub lambda_e: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoints: Vec<(Phase, Checkpoint)>,
    pub curves: Vec<CurveRow>,
    pub phase_a_agreement: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub seed: u64,
    pub updates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Fresh,
    Imitated,
    CriticFitted,
    Improved,
    Online,
}

/// Owns the actor, the centralized critic and the duals, and enforces the
/// phase order: AWR only runs on a fitted critic.
pub struct Trainer<'a> {
    cfg: &'a ScenarioConfig,
    exec: Exec,
    rng: ChaCha8Rng,
    pub actor: Actor,
    pub critic: Critic,
    pub duals: DualVariables,
    pub curves: Vec<CurveRow>,
    stage: Stage,
}

fn slot_throughput(cfg: &ScenarioConfig) -> Vec<f64> {
    cfg.roster.iter().map(|r| r.profile.compute_throughput).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ScenarioConfig, exec: Exec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = Actor::new(cfg.max_robots, cfg.auction.bounds, &mut rng);
        let critic = Critic::new(ct_width(cfg.max_robots), &mut rng);
        Self { cfg, exec, rng, actor, critic, duals: DualVariables::zeros(cfg.roster.len(), cfg), curves: vec![], stage: Stage::Fresh }
    }

    pub fn from_checkpoint(cfg: &'a ScenarioConfig, ck: &Checkpoint, exec: Exec) -> Result<Self> {
        if ck.max_robots != cfg.max_robots {
            return Err(Error::Config(format!("checkpoint roster width {} differs from max_robots {}", ck.max_robots, cfg.max_robots)));
        }
        let mut t = Self::new(cfg, exec);
        t.actor = ck.actor()?;
        if let Some(c) = ck.critic()? {
            t.critic = c;
            t.stage = Stage::CriticFitted;
        } else {
            t.stage = Stage::Imitated;
        }
        Ok(t)
    }

    pub fn checkpoint(&self, phase: Phase) -> Checkpoint {
        let critic = (self.stage != Stage::Fresh && self.stage != Stage::Imitated).then_some(&self.critic);
        Checkpoint::new(&phase.to_string(), &self.cfg.hash(), &self.actor, critic, slot_throughput(self.cfg))
    }

    fn hp(&self) -> &super::TrainingHyperparams {
        &self.cfg.training
    }

    fn bounds(&self) -> crate::domain::BidBounds {
        self.cfg.auction.bounds
    }

    fn mean_loss(&self, samples: &[Sample], w: &HeadLossWeights) -> Result<f64> {
        let losses: Vec<Result<f64>> = self.exec.map(samples, |s| {
            let out = self.actor.net.predict(&s.features)?;
            head_loss(&self.actor, &out, s, w).map(|(l, _, _)| l)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Behavior cloning with early stopping on held-out loss. Returns the
    /// held-out winner agreement of the best parameters.
    pub fn phase_a(&mut self, ds: &OfflineDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::MissingArtifact("offline dataset is empty; Phase A needs collected transitions".into()));
        }
        let train_recs: Vec<TransitionRecord> = ds.train_records().cloned().collect();
        let val_recs: Vec<TransitionRecord> = ds.val_records().cloned().collect();
        let train = samples_from_records(&train_recs, ds.max_robots, &self.bounds())?;
        let val = samples_from_records(&val_recs, ds.max_robots, &self.bounds())?;
        let val = if val.is_empty() { train.clone() } else { val };
        let hp = self.hp().clone();
        let mut adam = AdamState::new(self.actor.param_count(), hp.bc_lr);
        let eval_w = HeadLossWeights { mode: 1.0, target: 1.0, capacity: 1.0, bid: 1.0, entropy: 0.0 };
        let mut best = (f64::INFINITY, self.actor.clone());
        let mut stale = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..hp.bc_epochs {
            order.shuffle(&mut self.rng);
            let mut loss = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(hp.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                loss += bc_update(&mut self.actor, &mut adam, &batch, Some(&ds.class_weights), self.exec)?;
                steps += 1;
            }
            let val_loss = self.mean_loss(&val, &eval_w)?;
            let agreement = action_agreement(&self.actor, if val_recs.is_empty() { &train_recs } else { &val_recs })?;
            self.push_row(Phase::A, epoch, loss / steps.max(1) as f64, f64::NAN, f64::NAN, agreement, vec![]);
            log::info!("phase A epoch {epoch}: loss {:.4} val {:.4} agreement {:.3}", loss / steps.max(1) as f64, val_loss, agreement);
            if val_loss < best.0 - 1e-4 {
                best = (val_loss, self.actor.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= hp.bc_patience {
                    break;
                }
            }
        }
        self.actor = best.1;
        self.stage = Stage::Imitated;
        action_agreement(&self.actor, if val_recs.is_empty() { &train_recs } else { &val_recs })
    }

    fn ct_states(&self, records: &[TransitionRecord]) -> Result<Vec<Vec<f64>>> {
        records
            .iter()
            .map(|r| build_ct_state(&r.observations, &r.mask, self.cfg.max_robots, r.t as f64 / r.chain_len.max(1) as f64))
            .collect()
    }

    /// Regress the critic onto discounted within-chain returns of the
    /// shaped reward.
    pub fn fit_critic_offline(&mut self, ds: &OfflineDataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::MissingArtifact("offline dataset is empty; the critic cannot be fitted".into()));
        }
        let hp = self.hp().clone();
        let mut states = Vec::new();
        let mut targets = Vec::new();
        for traj in &ds.train {
            let rewards: Vec<f64> = traj.records.iter().map(|r| r.reward).collect();
            targets.extend(discounted_returns(&rewards, hp.gamma));
            states.extend(self.ct_states(&traj.records)?);
        }
        let mut adam = AdamState::new(self.critic.net.len(), hp.critic_lr);
        let mut order: Vec<usize> = (0..states.len()).collect();
        let mut last = 0.0;
        for epoch in 0..hp.critic_epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(hp.minibatch) {
                let xs: Vec<&[f64]> = chunk.iter().map(|&i| states[i].as_slice()).collect();
                let ys: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                total += fit_critic(&mut self.critic, &mut adam, &xs, &ys, self.exec)?;
                steps += 1;
            }
            last = total / steps.max(1) as f64;
            self.push_row(Phase::B, epoch, f64::NAN, last, f64::NAN, f64::NAN, vec![]);
        }
        self.stage = Stage::CriticFitted;
        Ok(last)
    }

    /// Advantage-weighted regression against the fitted critic.
    pub fn awr_offline(&mut self, ds: &OfflineDataset) -> Result<f64> {
        if !matches!(self.stage, Stage::CriticFitted | Stage::Improved | Stage::Online) {
            return Err(Error::Runtime("advantage-weighted regression needs a fitted critic".into()));
        }
        let hp = self.hp().clone();
        let recs: Vec<TransitionRecord> = ds.train_records().cloned().collect();
        let mut rec_adv = Vec::with_capacity(recs.len());
        for traj in &ds.train {
            let rewards: Vec<f64> = traj.records.iter().map(|r| r.reward).collect();
            let returns = discounted_returns(&rewards, hp.gamma);
            for (state, ret) in self.ct_states(&traj.records)?.iter().zip(returns) {
                rec_adv.push(ret - self.critic.value(state)?);
            }
        }
        let n = rec_adv.len().max(1) as f64;
        let mean = rec_adv.iter().sum::<f64>() / n;
        let sd = (rec_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let rec_adv: Vec<f64> = rec_adv.iter().map(|a| (a - mean) / (sd + 1e-8)).collect();
        let samples = samples_from_records(&recs, ds.max_robots, &self.bounds())?;
        let adv: Vec<f64> = samples.iter().map(|s| rec_adv[s.record]).collect();
        let mut adam = AdamState::new(self.actor.param_count(), hp.lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut last = 0.0;
        for epoch in 0..hp.awr_epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0;
            for chunk in order.chunks(hp.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                total += awr_update(&mut self.actor, &mut adam, &batch, &a, hp.awr_beta, hp.entropy_coef, self.exec)?;
                steps += 1;
            }
            last = total / steps.max(1) as f64;
            self.push_row(Phase::B, hp.critic_epochs + epoch, last, f64::NAN, f64::NAN, f64::NAN, vec![]);
        }
        self.stage = Stage::Improved;
        Ok(last)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_row(&mut self, phase: Phase, step: usize, actor_loss: f64, critic_loss: f64, reward: f64, metric: f64, robot_reward: Vec<f64>) {
        self.curves.push(CurveRow {
            phase,
            update_step: step,
            actor_loss,
            critic_loss,
            mean_reward: reward,
            metric,
            robot_reward,
            lambda_d: self.duals.lambda_d,
            lambda_e: self.duals.lambda_e.clone(),
        });
    }

    /// On-policy constrained PPO on live rollouts, one update per
    /// `batch_chains` completed chains.
    pub fn phase_c(&mut self, settings: RolloutSettings) -> Result<()> {
        let hp = self.hp().clone();
        if let Some(sd) = hp.phase_c_log_sd {
            self.actor.log_sd = sd;
        }
        let n = self.cfg.roster.len();
        // Episodes of the scenario horizon on successive seeds, so a policy
        // that overloads a robot is not stuck with the backlog forever.
        let cfg = self.cfg;
        let mut episode = 0u64;
        let new_world = |episode: u64, duals: &DualVariables| -> Result<World> {
            let mut w = World::new(cfg, settings.seed.wrapping_add(episode), cfg.horizon_s)?;
            w.set_record_transitions(false);
            w.duals = duals.clone();
            Ok(w)
        };
        let mut world = new_world(episode, &self.duals)?;
        let mut sched = PolicyScheduler::new(self.actor.clone(), true);
        let mut actor_adam = AdamState::new(self.actor.param_count(), hp.ppo_lr);
        let mut critic_adam = AdamState::new(self.critic.net.len(), hp.critic_lr);
        // Chains that start before the FPS window has filled see a biased
        // FPS term and are not trained on.
        let warmup_ms = self.cfg.sim.fps_window_s * 1000.0;
        let mut open: BTreeMap<u64, Vec<TransitionRecord>> = BTreeMap::new();
        let mut ready: Vec<Vec<TransitionRecord>> = Vec::new();
        for update in 0..settings.updates {
            while ready.len() < hp.batch_chains {
                let Some(out) = world.step_next(&mut sched)? else {
                    episode += 1;
                    open.clear();
                    world = new_world(episode, &self.duals)?;
                    continue;
                };
                for r in out.records {
                    let done = r.done;
                    let id = r.chain_id;
                    open.entry(id).or_default().push(r);
                    if done {
                        let chain = open.remove(&id).unwrap();
                        if chain[0].t == 0 && chain[0].time_ms >= warmup_ms {
                            ready.push(chain);
                        }
                    }
                }
            }
            let batch: Vec<Vec<TransitionRecord>> = ready.drain(..hp.batch_chains).collect();
            let mut records = Vec::new();
            let mut states = Vec::new();
            let mut returns = Vec::new();
            let mut rec_adv = Vec::new();
            for chain in &batch {
                let st = self.ct_states(chain)?;
                let mut values: Vec<f64> = st.iter().map(|s| self.critic.value(s)).collect::<Result<_>>()?;
                values.push(0.0);
                let rewards: Vec<f64> = chain.iter().map(|r| r.penalized_reward).collect();
                let mut dones = vec![false; chain.len()];
                *dones.last_mut().unwrap() = true;
                let adv = compute_gae(&rewards, &values, &dones, hp.gamma, hp.gae_lambda)?;
                for (i, a) in adv.iter().enumerate() {
                    returns.push(a + values[i]);
                }
                rec_adv.extend(adv);
                states.extend(st);
                records.extend(chain.iter().cloned());
            }
            let samples: Vec<Sample> = samples_from_records(&records, self.cfg.max_robots, &self.bounds())?
                .into_iter()
                .filter(|s| s.old_log_prob.is_some())
                .collect();
            let sample_adv: Vec<f64> = samples.iter().map(|s| rec_adv[s.record]).collect();
            let stats = ppo_update(
                &mut self.actor,
                &mut actor_adam,
                &mut self.critic,
                &mut critic_adam,
                &samples,
                &sample_adv,
                &states,
                &returns,
                &hp,
                self.exec,
                &mut self.rng,
            )?;

            let mut mean_power = vec![0.0; n];
            for r in &records {
                for (m, p) in mean_power.iter_mut().zip(&r.powers) {
                    *m += p / records.len() as f64;
                }
            }
            let miss_rate = records.iter().filter(|r| r.components.deadline_miss).count() as f64 / records.len() as f64;
            self.duals.update(&mean_power, miss_rate)?;
            world.duals = self.duals.clone();

            let mean_reward = records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64;
            let mut per = vec![(0.0, 0usize); n];
            for r in &records {
                per[r.robot_id].0 += r.reward;
                per[r.robot_id].1 += 1;
            }
            let robot_reward = per.iter().map(|(s, c)| if *c == 0 { f64::NAN } else { s / *c as f64 }).collect();
            self.push_row(Phase::C, update, stats.actor_loss, stats.critic_loss, mean_reward, stats.clip_fraction, robot_reward);
            log::info!(
                "phase C update {update}: reward {mean_reward:.3} actor {:.4} critic {:.4} clip {:.2} lambda_d {:.3}",
                stats.actor_loss,
                stats.critic_loss,
                stats.clip_fraction,
                self.duals.lambda_d
            );
            sched.actor = self.actor.clone();
        }
        self.stage = Stage::Online;
        Ok(())
    }
}

/// Run the requested contiguous prefix/suffix of the curriculum.
pub fn three_phase_train(
    cfg: &ScenarioConfig,
    dataset: Option<&OfflineDataset>,
    init: Option<&Checkpoint>,
    phases: &[Phase],
    exec: Exec,
) -> Result<TrainOutputs> {
    let mut sorted = phases.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.is_empty() || sorted.windows(2).any(|w| w[1] as u8 != w[0] as u8 + 1) {
        return Err(Error::Config("training phases must be a non-empty contiguous run of A, B, C".into()));
    }
    let offline = sorted.contains(&Phase::A) || sorted.contains(&Phase::B);
    let ds = match dataset {
        Some(d) if !d.is_empty() => Some(d),
        _ if offline => return Err(Error::MissingArtifact("Phases A and B need a non-empty offline dataset (--dataset)".into())),
        _ => None,
    };
    if sorted[0] == Phase::C && init.is_none() {
        return Err(Error::MissingArtifact("Phase C alone needs a starting checkpoint (--checkpoint)".into()));
    }
    let mut trainer = match init {
        Some(ck) if sorted[0] != Phase::A => Trainer::from_checkpoint(cfg, ck, exec)?,
        _ => Trainer::new(cfg, exec),
    };
    let mut out = TrainOutputs { checkpoints: vec![], curves: vec![], phase_a_agreement: None };
    for phase in sorted {
        match phase {
            Phase::A => {
                out.phase_a_agreement = Some(trainer.phase_a(ds.unwrap())?);
            }
            Phase::B => {
                trainer.fit_critic_offline(ds.unwrap())?;
                trainer.awr_offline(ds.unwrap())?;
            }
            Phase::C => {
                if trainer.stage == Stage::Imitated || trainer.stage == Stage::Fresh {
                    log::warn!("Phase C starts without a fitted critic");
                }
                trainer.phase_c(RolloutSettings { seed: cfg.seed.wrapping_add(1_000_003), updates: cfg.training.ppo_updates })?;
            }
        }
        out.checkpoints.push((phase, trainer.checkpoint(phase)));
    }
    out.curves = std::mem::take(&mut trainer.curves);
    Ok(out)
}

/// Give a joining device the policy slot of the roster member with the
/// nearest compute throughput. The new slot's target logits start at zero.
pub fn policy_mask_init(ck: &Checkpoint, new_throughput: f64) -> Result<(Checkpoint, usize)> {
    let occupied = ck.slot_throughput.len();
    if occupied == 0 {
        return Err(Error::InvalidInput("checkpoint has no roster profiles".into()));
    }
    if occupied >= ck.max_robots {
        return Err(Error::RosterFull(ck.max_robots));
    }
    let donor = (0..occupied)
        .min_by(|&a, &b| {
            (ck.slot_throughput[a] - new_throughput).abs().total_cmp(&(ck.slot_throughput[b] - new_throughput).abs()).then(a.cmp(&b))
        })
        .unwrap();
    let mut out = ck.clone();
    let mut alias = if out.embed_alias.len() == occupied { out.embed_alias.clone() } else { (0..occupied).collect() };
    alias.push(alias[donor]);
    out.embed_alias = alias;
    out.slot_throughput.push(new_throughput);
    let mut actor = out.actor()?;
    let layer = actor.net.sizes().len() - 2;
    let hidden = actor.net.sizes()[layer];
    let rows = actor.net.sizes()[layer + 1];
    let row = actor.layout.target().start + occupied;
    let w_off = actor.net.len() - (hidden * rows + rows);
    let params = actor.net.params_mut();
    params[w_off + row * hidden..w_off + (row + 1) * hidden].iter_mut().for_each(|p| *p = 0.0);
    params[w_off + hidden * rows + row] = 0.0;
    out.actor = actor.net.snapshot();
    Ok((out, donor))
}
