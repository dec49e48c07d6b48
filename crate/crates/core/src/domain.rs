//! Domain types shared by the simulator, the auction, the learners and the
//! reports, plus observation construction and feature normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RobotId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotProfile {
    pub robot_id: RobotId,
    pub name: String,
    /// Effective GFLOP/s.
    pub compute_throughput: f64,
    /// MB.
    pub gpu_mem: f64,
    /// Wh.
    pub battery_capacity: f64,
    /// W.
    pub idle_power: f64,
    /// W.
    pub busy_power: f64,
    /// Hosts publish perception chains; executor-only nodes just bid.
    pub is_host: bool,
}

impl RobotProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute_throughput > 0.0) {
            return Err(Error::Config(format!("{}: compute_throughput must be > 0", self.name)));
        }
        if !(self.battery_capacity > 0.0) {
            return Err(Error::Config(format!("{}: battery_capacity must be > 0", self.name)));
        }
        if !(self.idle_power >= 0.0 && self.busy_power >= self.idle_power) {
            return Err(Error::Config(format!("{}: need busy_power >= idle_power >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTelemetry {
    /// Seconds of runtime left at the current draw.
    pub battery_horizon: f64,
    pub soc: f64,
    pub power: f64,
    pub temp: f64,
    pub cpu: f64,
    pub gpu: f64,
    pub ram: f64,
    pub queue: u32,
}

impl ResourceTelemetry {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.soc) || !unit(self.cpu) || !unit(self.gpu) || !unit(self.ram) {
            return Err(Error::InvalidInput(format!("telemetry fraction out of [0,1]: {self:?}")));
        }
        if !(self.battery_horizon >= 0.0) {
            return Err(Error::InvalidInput("battery_horizon must be >= 0".into()));
        }
        Ok(())
    }
}

/// `soc × capacity × 3600 / max(power, idle_power)` seconds.
pub fn battery_horizon(soc: f64, profile: &RobotProfile, power: f64) -> f64 {
    let draw = power.max(profile.idle_power);
    if draw <= 0.0 {
        return f64::MAX.min(1e12);
    }
    soc * profile.battery_capacity * 3600.0 / draw
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkTelemetry {
    pub rssi: f64,
    /// Milliseconds to each reachable peer. A missing key means unreachable.
    pub rtt: BTreeMap<RobotId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "samA")]
    SamA,
    #[serde(rename = "samB")]
    SamB,
    #[serde(rename = "samC")]
    SamC,
    #[serde(rename = "clipA")]
    ClipA,
    #[serde(rename = "clipB")]
    ClipB,
    #[serde(rename = "clipC")]
    ClipC,
    #[serde(rename = "extra")]
    Extra,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::SamA,
        StageKind::SamB,
        StageKind::SamC,
        StageKind::ClipA,
        StageKind::ClipB,
        StageKind::ClipC,
        StageKind::Extra,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::SamA => "samA",
            StageKind::SamB => "samB",
            StageKind::SamC => "samC",
            StageKind::ClipA => "clipA",
            StageKind::ClipB => "clipB",
            StageKind::ClipC => "clipC",
            StageKind::Extra => "extra",
        }
    }

    pub fn onehot(self) -> Vec<f64> {
        let mut v = vec![0.0; Self::COUNT];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage_kind '{s}' (expected one of samA, samB, samC, clipA, clipB, clipC, extra)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageContext {
    pub stage_kind: StageKind,
    pub stage_onehot: Vec<f64>,
    pub deadline_ms: f64,
    pub tensor_bytes: f64,
}

impl StageContext {
    pub fn new(stage_kind: StageKind, deadline_ms: f64, tensor_bytes: f64) -> Self {
        Self { stage_kind, stage_onehot: stage_kind.onehot(), deadline_ms, tensor_bytes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_onehot.len() != StageKind::COUNT {
            return Err(Error::InvalidInput(format!(
                "stage_onehot has {} entries, expected {}",
                self.stage_onehot.len(),
                StageKind::COUNT
            )));
        }
        let ones = self.stage_onehot.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.stage_onehot.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != StageKind::COUNT - 1 || self.stage_onehot[self.stage_kind.index()] != 1.0 {
            return Err(Error::InvalidInput(format!("stage_onehot does not encode {}", self.stage_kind)));
        }
        if !(self.deadline_ms > 0.0) {
            return Err(Error::InvalidInput("deadline_ms must be > 0".into()));
        }
        if !(self.tensor_bytes >= 0.0) {
            return Err(Error::InvalidInput("tensor_bytes must be >= 0".into()));
        }
        Ok(())
    }
}

/// `normalized = (raw - offset) * gain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineScale {
    pub offset: f64,
    pub gain: f64,
}

impl AffineScale {
    pub const fn new(offset: f64, gain: f64) -> Self {
        Self { offset, gain }
    }

    /// Maps `[lo, hi]` onto `[-1, 1]`.
    pub fn from_range(lo: f64, hi: f64) -> Self {
        Self { offset: 0.5 * (lo + hi), gain: 2.0 / (hi - lo) }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) * self.gain
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y / self.gain + self.offset
    }
}

/// Fixed per-feature normalization, recorded in the scenario so offline and
/// online features are computed identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScales {
    pub battery_horizon: AffineScale,
    pub soc: AffineScale,
    pub power: AffineScale,
    pub temp: AffineScale,
    pub cpu: AffineScale,
    pub gpu: AffineScale,
    pub ram: AffineScale,
    pub queue: AffineScale,
    pub rssi: AffineScale,
    pub rtt: AffineScale,
    pub deadline_ms: AffineScale,
    pub tensor_bytes: AffineScale,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            battery_horizon: AffineScale::from_range(0.0, 72_000.0),
            soc: AffineScale::from_range(0.0, 1.0),
            power: AffineScale::from_range(0.0, 400.0),
            temp: AffineScale::from_range(20.0, 90.0),
            cpu: AffineScale::from_range(0.0, 1.0),
            gpu: AffineScale::from_range(0.0, 1.0),
            ram: AffineScale::from_range(0.0, 1.0),
            queue: AffineScale::from_range(0.0, 16.0),
            rssi: AffineScale::from_range(-90.0, -30.0),
            rtt: AffineScale::from_range(0.0, 200.0),
            deadline_ms: AffineScale::from_range(0.0, 1200.0),
            tensor_bytes: AffineScale::from_range(0.0, 2.0e6),
        }
    }
}

impl FeatureScales {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.battery_horizon,
            self.soc,
            self.power,
            self.temp,
            self.cpu,
            self.gpu,
            self.ram,
            self.queue,
            self.rssi,
            self.rtt,
            self.deadline_ms,
            self.tensor_bytes,
        ];
        if all.iter().any(|s| !(s.gain.is_finite() && s.gain != 0.0 && s.offset.is_finite())) {
            return Err(Error::Config("feature scales need finite offsets and non-zero gains".into()));
        }
        Ok(())
    }
}

/// Actor-side summary of the network view: fixed width regardless of roster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub rssi: f64,
    /// Zero for the chain host itself.
    pub rtt_to_host: f64,
    pub rtt_min: f64,
    pub rtt_mean: f64,
}

impl NetworkSummary {
    pub fn from_telemetry(net: &NetworkTelemetry, self_id: RobotId, host: RobotId) -> Result<Self> {
        let rtt_to_host = if self_id == host {
            0.0
        } else {
            *net.rtt.get(&host).ok_or(Error::Unreachable { from: host, to: self_id })?
        };
        let peers: Vec<f64> = net.rtt.iter().filter(|(k, _)| **k != self_id).map(|(_, v)| *v).collect();
        let (rtt_min, rtt_mean) = if peers.is_empty() {
            (0.0, 0.0)
        } else {
            (peers.iter().cloned().fold(f64::INFINITY, f64::min), peers.iter().sum::<f64>() / peers.len() as f64)
        };
        Ok(Self { rssi: net.rssi, rtt_to_host, rtt_min, rtt_mean })
    }
}

pub const TELEMETRY_FEATURES: usize = 8;
pub const NETWORK_FEATURES: usize = 4;
pub const CONTEXT_FEATURES: usize = StageKind::COUNT + 2;

pub fn obs_width(max_robots: usize) -> usize {
    TELEMETRY_FEATURES + NETWORK_FEATURES + CONTEXT_FEATURES + max_robots
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub slot: RobotId,
    pub telemetry: ResourceTelemetry,
    pub network: NetworkSummary,
    pub context: StageContext,
    pub robot_embed: Vec<f64>,
    /// Normalized actor input: telemetry, network, context, identity one-hot.
    pub features: Vec<f64>,
}

impl Observation {
    /// The normalized shared-context block (stage one-hot, deadline, payload).
    pub fn context_features(&self) -> &[f64] {
        let start = TELEMETRY_FEATURES + NETWORK_FEATURES;
        &self.features[start..start + CONTEXT_FEATURES]
    }
}

#[derive(Debug, Clone)]
pub struct ObservationBuilder {
    pub scales: FeatureScales,
    pub max_robots: usize,
}

impl ObservationBuilder {
    pub fn new(scales: FeatureScales, max_robots: usize) -> Self {
        Self { scales, max_robots }
    }

    pub fn width(&self) -> usize {
        obs_width(self.max_robots)
    }

    /// `embed_slot` selects the identity one-hot; it differs from `slot` only
    /// for devices that borrow another robot's policy slot.
    pub fn build(
        &self,
        telemetry: &ResourceTelemetry,
        network: &NetworkSummary,
        context: &StageContext,
        slot: RobotId,
        embed_slot: RobotId,
    ) -> Result<Observation> {
        context.validate()?;
        if embed_slot >= self.max_robots || slot >= self.max_robots {
            return Err(Error::InvalidInput(format!("roster slot {slot} outside 0..{}", self.max_robots)));
        }
        let s = &self.scales;
        let mut f = Vec::with_capacity(self.width());
        f.extend_from_slice(&[
            s.battery_horizon.normalize(telemetry.battery_horizon),
            s.soc.normalize(telemetry.soc),
            s.power.normalize(telemetry.power),
            s.temp.normalize(telemetry.temp),
            s.cpu.normalize(telemetry.cpu),
            s.gpu.normalize(telemetry.gpu),
            s.ram.normalize(telemetry.ram),
            s.queue.normalize(telemetry.queue as f64),
            s.rssi.normalize(network.rssi),
            s.rtt.normalize(network.rtt_to_host),
            s.rtt.normalize(network.rtt_min),
            s.rtt.normalize(network.rtt_mean),
        ]);
        f.extend_from_slice(&context.stage_onehot);
        f.push(s.deadline_ms.normalize(context.deadline_ms));
        f.push(s.tensor_bytes.normalize(context.tensor_bytes));
        let mut embed = vec![0.0; self.max_robots];
        embed[embed_slot] = 1.0;
        f.extend_from_slice(&embed);
        Ok(Observation {
            slot,
            telemetry: telemetry.clone(),
            network: network.clone(),
            context: context.clone(),
            robot_embed: embed,
            features: f,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMask {
    pub available: Vec<bool>,
}

impl AvailabilityMask {
    pub fn all(n: usize) -> Self {
        Self { available: vec![true; n] }
    }

    pub fn any(&self) -> bool {
        self.available.iter().any(|&a| a)
    }

    pub fn count(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub chain_id: u64,
    pub host_id: RobotId,
    pub stages: Vec<StageContext>,
    pub goal_fps: f64,
    pub latency_budget_ms: f64,
}

impl ChainSpec {
    /// Deadline of stage `idx` measured from chain arrival: the sum of the
    /// stage deadlines up to and including `idx`.
    pub fn cumulative_deadline(&self, idx: usize) -> f64 {
        self.stages.iter().take(idx + 1).map(|s| s.deadline_ms).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("chain needs at least one stage".into()));
        }
        let total: f64 = self.stages.iter().map(|s| s.deadline_ms).sum();
        if total > self.latency_budget_ms * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "stage deadlines sum to {total} ms, above the {} ms budget",
                self.latency_budget_ms
            )));
        }
        self.stages.iter().try_for_each(StageContext::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub w_slack: f64,
    pub w_rtt: f64,
    pub w_proc: f64,
    pub w_xfer: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { lambda_d: 5.0, lambda_e: 0.001, w_slack: 0.5, w_rtt: 0.2, w_proc: 0.2, w_xfer: 0.2 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_d, self.lambda_e, self.w_slack, self.w_rtt, self.w_proc, self.w_xfer];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Continuous bid interval applied at the auction interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidBounds {
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for BidBounds {
    fn default() -> Self {
        Self { a_min: 0.0, a_max: 400.0 }
    }
}

impl BidBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min.is_finite() && self.a_max.is_finite() && self.a_min < self.a_max) {
            return Err(Error::Config(format!("bid bounds need a_min < a_max, got [{}, {}]", self.a_min, self.a_max)));
        }
        Ok(())
    }

    pub fn clip_bid(&self, raw: f64) -> Result<f64> {
        if raw.is_nan() {
            return Err(Error::InvalidInput("bid is NaN".into()));
        }
        Ok(raw.clamp(self.a_min, self.a_max))
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.a_min + self.a_max)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.a_max - self.a_min)
    }
}

/// Clamp with the default `[0, 400]` interval.
pub fn clip_bid(raw: f64) -> Result<f64> {
    BidBounds::default().clip_bid(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Local,
    Offload,
    Accept,
}

impl Mode {
    pub const COUNT: usize = 3;
    pub const ALL: [Mode; 3] = [Mode::Local, Mode::Offload, Mode::Accept];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Concurrent stages a robot declares it will accept.
pub const CAPACITY_LEVELS: [u32; 3] = [1, 2, 4];

/// One robot's decision for one stage auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    pub bid: f64,
    pub mode: Mode,
    /// Offload target, only meaningful for the chain host.
    pub target: Option<RobotId>,
    /// Index into [`CAPACITY_LEVELS`].
    pub capacity: usize,
    /// Pre-squash Gaussian sample, present for sampled policy bids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub fps: f64,
    pub slack_ms: f64,
    pub rtt_ms: f64,
    pub proc_ms: f64,
    pub xfer_ms: f64,
    pub wait_ms: f64,
    pub energy_j: f64,
    pub deadline_miss: bool,
}

/// One stage decision with its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: usize,
    pub chain_id: u64,
    /// Chain host; samples are tagged with it for per-robot reporting.
    pub robot_id: RobotId,
    pub time_ms: f64,
    pub chain_len: usize,
    pub observations: Vec<Option<Observation>>,
    pub mask: Vec<bool>,
    pub actions: Vec<Option<RobotAction>>,
    pub winner_id: RobotId,
    pub reward: f64,
    pub penalized_reward: f64,
    /// Instantaneous draw of each slot when the stage completed (W).
    pub powers: Vec<f64>,
    pub components: RewardComponents,
    pub done: bool,
    #[serde(default)]
    pub failed: bool,
}

pub fn write_jsonl<T: Serialize, W: Write>(out: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn telemetry() -> ResourceTelemetry {
        ResourceTelemetry {
            battery_horizon: 18_000.0,
            soc: 0.8,
            power: 150.0,
            temp: 48.0,
            cpu: 0.25,
            gpu: 0.6,
            ram: 0.4,
            queue: 3,
        }
    }

    fn net() -> NetworkSummary {
        NetworkSummary { rssi: -55.0, rtt_to_host: 12.0, rtt_min: 10.0, rtt_mean: 13.0 }
    }

    #[test]
    fn soc_endpoint_normalizes_to_one() {
        let s = AffineScale::new(0.5, 2.0);
        assert_eq!(s.normalize(1.0), 1.0);
    }

    #[test]
    fn empty_queue_maps_to_scale_minimum() {
        let b = ObservationBuilder::new(FeatureScales::default(), 3);
        let mut t = telemetry();
        t.queue = 0;
        let o = b.build(&t, &net(), &StageContext::new(StageKind::SamA, 300.0, 1e5), 0, 0).unwrap();
        assert_eq!(o.features[7], -1.0);
    }

    #[test]
    fn full_sample_matches_hand_normalization() {
        let b = ObservationBuilder::new(FeatureScales::default(), 3);
        let ctx = StageContext::new(StageKind::ClipB, 240.0, 600_000.0);
        let o = b.build(&telemetry(), &net(), &ctx, 1, 1).unwrap();
        // (x - offset) * gain with the default ranges, evaluated by hand.
        let expected = [
            (18_000.0 - 36_000.0) / 36_000.0, // -0.5
            (0.8 - 0.5) * 2.0,                // 0.6
            (150.0 - 200.0) / 200.0,          // -0.25
            (48.0 - 55.0) / 35.0,             // -0.2
            -0.5,
            0.2,
            -0.2,
            (3.0 - 8.0) / 8.0,       // -0.625
            (-55.0 + 60.0) / 30.0,   // 1/6
            (12.0 - 100.0) / 100.0,  // -0.88
            -0.9,
            -0.87,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0,
            (240.0 - 600.0) / 600.0, // -0.6
            -0.4,
            0.0, 1.0, 0.0,
        ];
        assert_eq!(o.features.len(), expected.len());
        for (a, e) in o.features.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn unknown_stage_kind_is_rejected() {
        let err = "detector".parse::<StageKind>().unwrap_err();
        assert!(err.to_string().contains("unknown stage_kind 'detector'"));
        let mut ctx = StageContext::new(StageKind::SamA, 100.0, 0.0);
        ctx.stage_onehot = vec![0.0; 7];
        let b = ObservationBuilder::new(FeatureScales::default(), 3);
        assert!(b.build(&telemetry(), &net(), &ctx, 0, 0).is_err());
    }

    #[test]
    fn clip_bid_examples() {
        assert_eq!(clip_bid(-5.0).unwrap(), 0.0);
        assert_eq!(clip_bid(123.4).unwrap(), 123.4);
        assert_eq!(clip_bid(1e6).unwrap(), 400.0);
        assert!(clip_bid(f64::NAN).is_err());
    }

    #[test]
    fn horizon_uses_idle_floor() {
        let p = RobotProfile {
            robot_id: 0,
            name: "r".into(),
            compute_throughput: 1.0,
            gpu_mem: 1.0,
            battery_capacity: 100.0,
            idle_power: 50.0,
            busy_power: 100.0,
            is_host: true,
        };
        assert_eq!(battery_horizon(0.5, &p, 10.0), 0.5 * 100.0 * 3600.0 / 50.0);
        assert_eq!(battery_horizon(0.5, &p, 100.0), 1800.0);
    }

    #[test]
    fn chain_deadlines_must_fit_budget() {
        let c = ChainSpec {
            chain_id: 0,
            host_id: 0,
            stages: vec![StageContext::new(StageKind::SamA, 600.0, 0.0); 2],
            goal_fps: 2.0,
            latency_budget_ms: 1000.0,
        };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalization_round_trips(x in -1e6f64..1e6, lo in -100.0f64..0.0, w in 0.1f64..1e5) {
            let s = AffineScale::from_range(lo, lo + w);
            let back = s.denormalize(s.normalize(x));
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
        }

        #[test]
        fn clip_is_idempotent(x in -1e9f64..1e9) {
            let once = clip_bid(x).unwrap();
            prop_assert_eq!(clip_bid(once).unwrap(), once);
            prop_assert!((0.0..=400.0).contains(&once));
        }

        #[test]
        fn observation_is_pure(soc in 0.0f64..1.0, q in 0u32..20) {
            let b = ObservationBuilder::new(FeatureScales::default(), 4);
            let mut t = telemetry();
            t.soc = soc;
            t.queue = q;
            let ctx = StageContext::new(StageKind::SamB, 200.0, 1e6);
            let a = serde_json::to_string(&b.build(&t, &net(), &ctx, 2, 2).unwrap()).unwrap();
            let c = serde_json::to_string(&b.build(&t, &net(), &ctx, 2, 2).unwrap()).unwrap();
            prop_assert_eq!(a, c);
        }
    }
}
