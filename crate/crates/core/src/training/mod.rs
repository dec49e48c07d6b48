//! Reward shaping, advantage estimation, Lagrangian duals, the centralized
//! critic state and the three-phase curriculum (imitation, offline
//! advantage-weighted regression, constrained on-policy PPO).

mod dataset;
mod losses;
mod pipeline;

pub use dataset::{dataset_prepare, samples_from_records, ClassWeights, OfflineDataset, Sample, Trajectory};
pub use losses::{
    action_agreement, awr_update, awr_weight, bc_update, fit_critic, head_loss, ppo_sample_coefficient, ppo_update,
    HeadLossWeights, PpoStats,
};
pub use pipeline::{
    parse_phases, policy_mask_init, three_phase_train, CurveRow, Phase, RolloutSettings, TrainOutputs, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::domain::{obs_width, Observation, RewardComponents, RewardWeights, CONTEXT_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_clip: f64,
    pub epochs_per_update: usize,
    pub batch_chains: usize,
    pub lr: f64,
    pub awr_beta: f64,
    pub entropy_coef: f64,
    /// Phase A uses its own learning rate and early stopping.
    pub bc_lr: f64,
    pub bc_epochs: usize,
    pub bc_patience: usize,
    pub minibatch: usize,
    pub critic_lr: f64,
    /// Actor step size in Phase C. `lr` drives Phase B.
    pub ppo_lr: f64,
    pub critic_epochs: usize,
    pub awr_epochs: usize,
    pub ppo_updates: usize,
    pub ppo_minibatches: usize,
    /// Log-sd of the bid head at the start of Phase C; `None` keeps the
    /// imitated value.
    pub phase_c_log_sd: Option<f64>,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_clip: 0.2,
            epochs_per_update: 2,
            batch_chains: 64,
            lr: 3e-4,
            awr_beta: 1.0,
            entropy_coef: 0.01,
            bc_lr: 1e-3,
            bc_epochs: 200,
            bc_patience: 8,
            minibatch: 128,
            critic_lr: 1e-3,
            ppo_lr: 3e-5,
            critic_epochs: 20,
            awr_epochs: 10,
            ppo_updates: 50,
            ppo_minibatches: 4,
            phase_c_log_sd: Some(-2.0),
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0,1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0,1]");
        }
        if !(self.ppo_clip > 0.0) || !(self.awr_beta > 0.0) {
            return bad("ppo_clip and awr_beta must be > 0");
        }
        if !(self.lr >= 0.0 && self.bc_lr >= 0.0 && self.critic_lr >= 0.0 && self.ppo_lr >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("learning rates and entropy coefficient must be >= 0");
        }
        if self.batch_chains == 0 || self.minibatch == 0 || self.ppo_minibatches == 0 || self.epochs_per_update == 0 {
            return bad("batch sizes and epoch counts must be positive");
        }
        Ok(())
    }
}

/// Lagrange multipliers for the per-robot power limit and the
/// deadline-miss-rate limit. Power enters both the penalty and the
/// constraint as a fraction of the robot's busy power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    pub lambda_e: Vec<f64>,
    pub lambda_d: f64,
    /// Limits on mean power / busy power.
    pub power_limits: Vec<f64>,
    /// Busy power of each robot (W).
    pub power_scale: Vec<f64>,
    pub miss_rate_limit: f64,
    pub alpha: f64,
}

impl DualVariables {
    pub fn zeros(n: usize, cfg: &ScenarioConfig) -> Self {
        let power_scale = (0..n).map(|i| cfg.roster[i].profile.busy_power.max(1e-9)).collect();
        Self {
            lambda_e: vec![0.0; n],
            lambda_d: 0.0,
            power_limits: vec![cfg.duals.power_limit_frac; n],
            power_scale,
            miss_rate_limit: cfg.duals.miss_rate_limit,
            alpha: cfg.duals.alpha,
        }
    }

    /// Projected subgradient step with measured mean power (W) per robot
    /// and measured miss rate.
    pub fn update(&mut self, mean_power: &[f64], miss_rate: f64) -> Result<()> {
        if mean_power.len() != self.lambda_e.len() {
            return Err(Error::Shape { expected: self.lambda_e.len(), got: mean_power.len() });
        }
        for i in 0..self.lambda_e.len() {
            self.lambda_e[i] = dual_update(self.lambda_e[i], mean_power[i] / self.power_scale[i], self.power_limits[i], self.alpha)?;
        }
        self.lambda_d = dual_update(self.lambda_d, miss_rate, self.miss_rate_limit, self.alpha)?;
        Ok(())
    }
}

/// `max(0, λ + α (measured − limit))`.
pub fn dual_update(lambda: f64, measured: f64, limit: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("dual step size {alpha} must be > 0")));
    }
    Ok((lambda + alpha * (measured - limit)).max(0.0))
}

const MS: f64 = 1000.0;

pub fn shaped_reward(c: &RewardComponents, w: &RewardWeights) -> f64 {
    let miss = if c.deadline_miss { 1.0 } else { 0.0 };
    c.fps - w.lambda_d * miss - w.lambda_e * c.energy_j + w.w_slack * c.slack_ms.max(0.0) / MS
        - w.w_rtt * c.rtt_ms / MS
        - w.w_proc * c.proc_ms / MS
        - w.w_xfer * c.xfer_ms / MS
}

pub fn penalized_reward(r: f64, powers: &[f64], miss: bool, duals: &DualVariables) -> f64 {
    let energy: f64 = duals.lambda_e.iter().zip(powers).zip(&duals.power_scale).map(|((l, p), s)| l * p / s).sum();
    r - energy - if miss { duals.lambda_d } else { 0.0 }
}

/// Recursive GAE; `values` carries one bootstrap entry past the end.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Result<Vec<f64>> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 {
        return Err(Error::Shape { expected: t_len + 1, got: values.len() });
    }
    if dones.len() != t_len {
        return Err(Error::Shape { expected: t_len, got: dones.len() });
    }
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        running = delta + gamma * lam * live * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// Discounted reward-to-go within one chain (terminal bootstrap 0).
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Extra shared-context entries after the stage context: chain progress.
pub const CT_EXTRA: usize = 1;

pub fn ct_width(max_robots: usize) -> usize {
    max_robots * obs_width(max_robots) + CONTEXT_FEATURES + CT_EXTRA
}

/// Masked global state: one observation block per roster slot (zero when
/// unavailable), then the shared stage context and chain progress.
pub fn build_ct_state(observations: &[Option<Observation>], mask: &[bool], max_robots: usize, progress: f64) -> Result<Vec<f64>> {
    let w = obs_width(max_robots);
    if observations.len() > max_robots || mask.len() != observations.len() {
        return Err(Error::Shape { expected: observations.len(), got: mask.len() });
    }
    let mut state = vec![0.0; ct_width(max_robots)];
    let mut context = None;
    for (slot, (obs, &m)) in observations.iter().zip(mask).enumerate() {
        if let Some(o) = obs {
            if o.features.len() != w {
                return Err(Error::Shape { expected: w, got: o.features.len() });
            }
            context.get_or_insert_with(|| o.context_features().to_vec());
            if m {
                state[slot * w..(slot + 1) * w].copy_from_slice(&o.features);
            }
        }
    }
    let base = max_robots * w;
    if let Some(c) = context {
        state[base..base + CONTEXT_FEATURES].copy_from_slice(&c);
    }
    state[base + CONTEXT_FEATURES] = progress;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default3;
    use crate::domain::{FeatureScales, NetworkSummary, ObservationBuilder, ResourceTelemetry, StageContext, StageKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_weights() -> RewardWeights {
        RewardWeights { lambda_d: 0.0, lambda_e: 0.0, w_slack: 0.0, w_rtt: 0.0, w_proc: 0.0, w_xfer: 0.0 }
    }

    #[test]
    fn shaped_reward_examples() {
        let c = RewardComponents { fps: 4.0, ..Default::default() };
        assert_eq!(shaped_reward(&c, &zero_weights()), 4.0);
        let miss = RewardComponents { fps: 3.0, deadline_miss: true, ..Default::default() };
        assert_eq!(shaped_reward(&miss, &RewardWeights { lambda_d: 5.0, ..zero_weights() }), -2.0);
        let full = RewardComponents {
            fps: 2.5,
            slack_ms: 120.0,
            rtt_ms: 15.0,
            proc_ms: 200.0,
            xfer_ms: 40.0,
            wait_ms: 10.0,
            energy_j: 30.0,
            deadline_miss: false,
        };
        // 2.5 - 0 - 0.001*30 + 0.5*0.12 - 0.2*0.015 - 0.2*0.2 - 0.2*0.04
        let expected = 2.5 - 0.03 + 0.06 - 0.003 - 0.04 - 0.008;
        assert!((shaped_reward(&full, &RewardWeights::default()) - expected).abs() < 1e-12);
        let late = RewardComponents { slack_ms: -50.0, ..full };
        assert!(shaped_reward(&late, &RewardWeights::default()) < shaped_reward(&full, &RewardWeights::default()));
    }

    #[test]
    fn penalized_reward_examples() {
        let cfg = default3();
        let mut d = DualVariables::zeros(3, &cfg);
        assert_eq!(penalized_reward(1.5, &[100.0, 60.0, 10.0], true, &d), 1.5);
        d.lambda_e[1] = 0.6;
        assert!((penalized_reward(1.5, &[100.0, 45.0, 10.0], false, &d) - 0.9).abs() < 1e-12);
        d.lambda_e[1] = 0.0;
        d.lambda_d = 2.0;
        assert_eq!(penalized_reward(1.5, &[0.0; 3], true, &d), -0.5);
    }

    #[test]
    fn dual_update_examples() {
        assert!((dual_update(0.5, 10.0, 8.0, 0.1).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(dual_update(0.1, 0.0, 8.0, 0.1).unwrap(), 0.0);
        assert_eq!(dual_update(0.3, 8.0, 8.0, 0.1).unwrap(), 0.3);
        assert!(dual_update(0.3, 8.0, 8.0, 0.0).is_err());
    }

    fn brute_gae(r: &[f64], v: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
        let t_len = r.len();
        let delta: Vec<f64> = (0..t_len).map(|t| r[t] + gamma * v[t + 1] - v[t]).collect();
        (0..t_len).map(|t| (t..t_len).map(|k| (gamma * lam).powi((k - t) as i32) * delta[k]).sum()).collect()
    }

    #[test]
    fn gae_matches_brute_force_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t_len = rng.random_range(1..=12);
            let r: Vec<f64> = (0..t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut v: Vec<f64> = (0..=t_len).map(|_| rng.random_range(-5.0..5.0)).collect();
            v[t_len] = 0.0;
            let mut dones = vec![false; t_len];
            dones[t_len - 1] = true;
            let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..=1.0));
            let a = compute_gae(&r, &v, &dones, g, l).unwrap();
            for (x, y) in a.iter().zip(brute_gae(&r, &v, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
            let one_step = compute_gae(&r, &v, &dones, g, 0.0).unwrap();
            for t in 0..t_len {
                assert_eq!(one_step[t], r[t] + g * v[t + 1] - v[t]);
            }
        }
        assert!(compute_gae(&[1.0], &[0.0], &[true], 0.9, 0.9).is_err());
    }

    #[test]
    fn constant_reward_returns_approach_geometric_limit() {
        let ret = discounted_returns(&vec![1.0; 5000], 0.99);
        assert!((ret[0] - 100.0).abs() < 1e-6);
    }

    fn obs(slot: usize) -> Observation {
        let t = ResourceTelemetry { battery_horizon: 9000.0, soc: 0.5, power: 60.0, temp: 40.0, cpu: 0.2, gpu: 0.3, ram: 0.3, queue: slot as u32 };
        let n = NetworkSummary { rssi: -55.0, rtt_to_host: 10.0, rtt_min: 10.0, rtt_mean: 12.0 };
        ObservationBuilder::new(FeatureScales::default(), 4)
            .build(&t, &n, &StageContext::new(StageKind::ClipB, 200.0, 6e5), slot, slot)
            .unwrap()
    }

    #[test]
    fn ct_state_layout() {
        let w = obs_width(4);
        let obs3: Vec<Option<Observation>> = (0..3).map(|s| Some(obs(s))).collect();
        let all = build_ct_state(&obs3, &[true; 3], 4, 0.5).unwrap();
        assert_eq!(all.len(), ct_width(4));
        for s in 0..3 {
            assert_eq!(&all[s * w..(s + 1) * w], obs3[s].as_ref().unwrap().features.as_slice());
        }
        assert!(all[3 * w..4 * w].iter().all(|v| *v == 0.0));
        assert_eq!(&all[4 * w..4 * w + CONTEXT_FEATURES], obs3[0].as_ref().unwrap().context_features());
        let masked = build_ct_state(&obs3, &[true, true, false], 4, 0.5).unwrap();
        assert!(masked[2 * w..3 * w].iter().all(|v| *v == 0.0));
        assert_eq!(&masked[..2 * w], &all[..2 * w]);
    }

    #[test]
    fn hyperparams_validate() {
        assert!(TrainingHyperparams::default().validate().is_ok());
        let bad = TrainingHyperparams { gamma: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
