//! Scenario configuration: the experiment contract shared by every command.
//!
//! Scenarios are TOML files. The four built-in templates reproduce the fleet
//! compositions used for the scalability, fault-tolerance and workload-stress
//! experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::GaConfig;
use crate::domain::{
    BidBounds, ChainSpec, FeatureScales, RewardWeights, RobotId, RobotProfile, StageContext, StageKind,
};
use crate::error::{Error, Result};
use crate::training::TrainingHyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    #[serde(flatten)]
    pub profile: RobotProfile,
    pub initial_soc: f64,
    /// Online at t = 0.
    #[serde(default = "yes")]
    pub online: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: RobotId,
    pub b: RobotId,
    pub base_rtt_ms: f64,
    pub jitter_sd_ms: f64,
    /// Bytes per millisecond.
    pub bandwidth: f64,
    pub rssi: f64,
    #[serde(default = "yes")]
    pub up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub kind: StageKind,
    pub gflop: f64,
    pub tensor_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub stages: Vec<StageKind>,
    pub goal_fps: f64,
    /// Camera frame rate of each host.
    pub arrival_fps: f64,
    /// Uniform relative jitter on inter-arrival gaps.
    pub arrival_jitter: f64,
    pub latency_budget_ms: f64,
    /// Frames dropped at the host while this many chains are in flight.
    pub max_inflight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Processing slowdown per pending stage in the executor queue.
    pub contention: f64,
    /// Lognormal sigma on processing times (0 disables noise).
    pub proc_noise_sd: f64,
    pub bid_window_ms: f64,
    pub fps_window_s: f64,
    pub ambient_temp: f64,
    pub busy_temp_rise: f64,
    pub temp_tau_s: f64,
    pub util_tau_ms: f64,
    pub cpu_busy_share: f64,
    pub cpu_queue_share: f64,
    pub ram_base: f64,
    pub ram_queue_share: f64,
    /// Planning latency charged to schedulers that plan whole chains.
    pub planning_delay_ms: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            contention: 0.05,
            proc_noise_sd: 0.1,
            bid_window_ms: 200.0,
            fps_window_s: 5.0,
            ambient_temp: 35.0,
            busy_temp_rise: 30.0,
            temp_tau_s: 60.0,
            util_tau_ms: 2000.0,
            cpu_busy_share: 0.4,
            cpu_queue_share: 0.03,
            ram_base: 0.25,
            ram_queue_share: 0.04,
            planning_delay_ms: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicCoefficients {
    pub k_q: f64,
    pub k_s: f64,
    pub k_r: f64,
    pub k_g: f64,
    pub k_c: f64,
}

impl Default for HeuristicCoefficients {
    fn default() -> Self {
        Self { k_q: 50.0, k_s: 100.0, k_r: 0.5, k_g: 80.0, k_c: 40.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuctionParams {
    pub bounds: BidBounds,
    pub coefficients: HeuristicCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    /// Per-robot power limit as a fraction of busy power.
    pub power_limit_frac: f64,
    pub miss_rate_limit: f64,
    pub alpha: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { power_limit_frac: 0.8, miss_rate_limit: 0.2, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceEventKind {
    Join,
    Leave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub time_s: f64,
    pub kind: DeviceEventKind,
    pub slot: RobotId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub horizon_s: f64,
    /// Gaussian noise added to logged heuristic bids (bid units).
    pub bid_noise_sd: f64,
    /// Fraction of auctions whose bids are replaced by uniform random bids.
    pub degraded_fraction: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { horizon_s: 600.0, bid_noise_sd: 0.0, degraded_fraction: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon_s: f64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon_s: 120.0, seeds: (1..=10).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated seconds for generic runs.
    pub horizon_s: f64,
    /// Width of the identity one-hot and of the target head.
    pub max_robots: usize,
    pub roster: Vec<RobotConfig>,
    pub links: Vec<LinkConfig>,
    pub stage_costs: Vec<StageCost>,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub auction: AuctionParams,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub training: TrainingHyperparams,
    #[serde(default)]
    pub duals: DualConfig,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub scales: FeatureScales,
    #[serde(default)]
    pub events: Vec<DeviceEvent>,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.roster.is_empty() {
            return cfg_err("roster is empty".into());
        }
        if self.roster.len() > self.max_robots {
            return cfg_err(format!("{} robots exceed max_robots = {}", self.roster.len(), self.max_robots));
        }
        if !(self.horizon_s > 0.0) {
            return cfg_err("horizon_s must be > 0".into());
        }
        for (slot, r) in self.roster.iter().enumerate() {
            if r.profile.robot_id != slot {
                return cfg_err(format!("roster entry {slot} has robot_id {}", r.profile.robot_id));
            }
            r.profile.validate()?;
            if !(0.0..=1.0).contains(&r.initial_soc) {
                return cfg_err(format!("{}: initial_soc outside [0,1]", r.profile.name));
            }
        }
        if !self.roster.iter().any(|r| r.profile.is_host) {
            return cfg_err("no host publishes workloads".into());
        }
        let n = self.roster.len();
        for l in &self.links {
            if l.a >= n || l.b >= n || l.a == l.b {
                return cfg_err(format!("link {}-{} references an unknown robot", l.a, l.b));
            }
            if l.up && !(l.bandwidth > 0.0) {
                return cfg_err(format!("link {}-{} is up with non-positive bandwidth", l.a, l.b));
            }
            if l.base_rtt_ms < 0.0 || l.jitter_sd_ms < 0.0 {
                return cfg_err(format!("link {}-{} has negative latency parameters", l.a, l.b));
            }
        }
        for kind in &self.workload.stages {
            if self.stage_cost(*kind).is_none() {
                return cfg_err(format!("no stage cost for {kind}"));
            }
        }
        for c in &self.stage_costs {
            if !(c.gflop > 0.0) || c.tensor_bytes < 0.0 {
                return cfg_err(format!("invalid cost for {}", c.kind));
            }
        }
        let w = &self.workload;
        if !(w.goal_fps > 0.0 && w.arrival_fps > 0.0 && w.latency_budget_ms > 0.0) || w.max_inflight == 0 {
            return cfg_err("workload rates, budget and max_inflight must be positive".into());
        }
        if !(0.0..1.0).contains(&w.arrival_jitter) {
            return cfg_err("arrival_jitter must be in [0,1)".into());
        }
        for e in &self.events {
            if e.slot >= n || e.time_s < 0.0 {
                return cfg_err(format!("event references slot {} at {} s", e.slot, e.time_s));
            }
        }
        if !(self.sim.bid_window_ms > 0.0 && self.sim.fps_window_s > 0.0) {
            return cfg_err("bid window and fps window must be > 0".into());
        }
        self.auction.bounds.validate()?;
        self.reward.validate()?;
        self.training.validate()?;
        self.ga.validate()?;
        self.scales.validate()?;
        if !(self.duals.alpha > 0.0) {
            return cfg_err("dual learning rate must be > 0".into());
        }
        self.chain_template(0)?.validate()?;
        Ok(())
    }

    pub fn stage_cost(&self, kind: StageKind) -> Option<&StageCost> {
        self.stage_costs.iter().find(|c| c.kind == kind)
    }

    pub fn link(&self, a: RobotId, b: RobotId) -> Option<&LinkConfig> {
        self.links.iter().find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    pub fn hosts(&self) -> Vec<RobotId> {
        self.roster.iter().filter(|r| r.profile.is_host).map(|r| r.profile.robot_id).collect()
    }

    /// Chain for `host`, with the end-to-end budget split across stages in
    /// proportion to nominal FLOPs.
    pub fn chain_template(&self, host: RobotId) -> Result<ChainSpec> {
        let costs: Vec<&StageCost> = self
            .workload
            .stages
            .iter()
            .map(|k| self.stage_cost(*k).ok_or_else(|| Error::Config(format!("no stage cost for {k}"))))
            .collect::<Result<_>>()?;
        let total: f64 = costs.iter().map(|c| c.gflop).sum();
        let stages = costs
            .iter()
            .map(|c| StageContext::new(c.kind, self.workload.latency_budget_ms * c.gflop / total, c.tensor_bytes))
            .collect();
        Ok(ChainSpec {
            chain_id: 0,
            host_id: host,
            stages,
            goal_fps: self.workload.goal_fps,
            latency_budget_ms: self.workload.latency_budget_ms,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }

    pub fn template(name: &str) -> Result<Self> {
        let cfg = match name {
            "default3" => default3(),
            "executor4" => executor4(),
            "failure2" => failure2(),
            "extratask" => extratask(),
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario template '{other}' (expected default3, executor4, failure2, extratask)"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub const TEMPLATES: [&'static str; 4] = ["default3", "executor4", "failure2", "extratask"];
}

fn robot(id: RobotId, name: &str, gflops: f64, gpu_mem: f64, wh: f64, idle: f64, busy: f64, host: bool, soc: f64) -> RobotConfig {
    RobotConfig {
        profile: RobotProfile {
            robot_id: id,
            name: name.into(),
            compute_throughput: gflops,
            gpu_mem,
            battery_capacity: wh,
            idle_power: idle,
            busy_power: busy,
            is_host: host,
        },
        initial_soc: soc,
        online: true,
    }
}

fn link(a: RobotId, b: RobotId, rtt: f64, rssi: f64) -> LinkConfig {
    LinkConfig { a, b, base_rtt_ms: rtt, jitter_sd_ms: 3.0, bandwidth: 32_000.0, rssi, up: true }
}

fn default_stage_costs() -> Vec<StageCost> {
    use StageKind::*;
    [
        (SamA, 22.0, 600_000.0),
        (SamB, 26.0, 1_200_000.0),
        (SamC, 12.0, 300_000.0),
        (ClipA, 4.0, 150_000.0),
        (ClipB, 9.0, 600_000.0),
        (ClipC, 2.0, 50_000.0),
        (Extra, 14.0, 400_000.0),
    ]
    .into_iter()
    .map(|(kind, gflop, tensor_bytes)| StageCost { kind, gflop, tensor_bytes })
    .collect()
}

/// Three heterogeneous hosts running the six-stage SAM + CLIP chain.
pub fn default3() -> ScenarioConfig {
    use StageKind::*;
    ScenarioConfig {
        name: "default3".into(),
        seed: 7,
        horizon_s: 120.0,
        max_robots: 4,
        roster: vec![
            robot(0, "husky", 700.0, 24_000.0, 650.0, 110.0, 200.0, true, 0.9),
            robot(1, "jackal", 220.0, 4_000.0, 130.0, 22.0, 45.0, true, 0.85),
            robot(2, "spot", 160.0, 8_000.0, 310.0, 150.0, 190.0, true, 0.8),
        ],
        links: vec![link(0, 1, 10.0, -48.0), link(0, 2, 14.0, -58.0), link(1, 2, 14.0, -60.0)],
        stage_costs: default_stage_costs(),
        workload: WorkloadConfig {
            stages: vec![SamA, SamB, SamC, ClipA, ClipB, ClipC],
            goal_fps: 2.0,
            arrival_fps: 3.0,
            arrival_jitter: 0.1,
            latency_budget_ms: 400.0,
            max_inflight: 16,
        },
        sim: SimParams::default(),
        auction: AuctionParams::default(),
        reward: RewardWeights::default(),
        training: TrainingHyperparams::default(),
        duals: DualConfig::default(),
        ga: GaConfig::default(),
        scales: FeatureScales::default(),
        events: vec![],
        collect: CollectConfig::default(),
        evaluation: EvalConfig::default(),
    }
}

/// default3 plus an executor-only laptop with Husky-class compute.
pub fn executor4() -> ScenarioConfig {
    let mut c = default3();
    c.name = "executor4".into();
    c.roster.push(robot(3, "linux", 650.0, 8_000.0, 90.0, 40.0, 130.0, false, 0.95));
    c.links.extend([link(0, 3, 10.0, -50.0), link(1, 3, 12.0, -52.0), link(2, 3, 14.0, -58.0)]);
    c
}

/// default3 with the Spot-class host offline from the start.
pub fn failure2() -> ScenarioConfig {
    let mut c = default3();
    c.name = "failure2".into();
    c.events.push(DeviceEvent { time_s: 0.0, kind: DeviceEventKind::Leave, slot: 2 });
    c
}

/// default3 with a heavy detection stage appended to every chain.
pub fn extratask() -> ScenarioConfig {
    let mut c = default3();
    c.name = "extratask".into();
    c.workload.stages.push(StageKind::Extra);
    c
}
