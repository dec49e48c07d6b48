//! QoS and resource accounting: windowed FPS, per-chain success, offload
//! rates, utilization/energy summaries and report files.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{ChainSpec, RobotId};
use crate::error::{Error, Result};
use crate::sim::{RobotState, StageOutcome, World};

/// Completions inside the trailing window divided by its length.
#[derive(Debug, Clone, PartialEq)]
pub struct FpsWindow {
    window_ms: f64,
    times: VecDeque<f64>,
}

impl FpsWindow {
    pub fn new(window_s: f64) -> Self {
        Self { window_ms: window_s * 1000.0, times: VecDeque::new() }
    }

    pub fn record(&mut self, t_ms: f64) {
        self.times.push_back(t_ms);
    }

    /// Rate over `(t − window, t]` without pruning.
    pub fn rate(&self, t_ms: f64) -> f64 {
        let n = self.times.iter().filter(|&&x| x <= t_ms && x > t_ms - self.window_ms).count();
        n as f64 / (self.window_ms / 1000.0)
    }

    /// Rate over `(t − window, t]`; earlier completions are discarded.
    pub fn rate_at(&mut self, t_ms: f64) -> f64 {
        while self.times.front().is_some_and(|&x| x <= t_ms - self.window_ms) {
            self.times.pop_front();
        }
        let n = self.times.iter().filter(|&&x| x <= t_ms).count();
        n as f64 / (self.window_ms / 1000.0)
    }
}

/// FPS at each sample time from sorted completion times (ms).
pub fn windowed_fps(completions_ms: &[f64], window_s: f64, sample_ms: &[f64]) -> Result<Vec<f64>> {
    if !(window_s > 0.0) {
        return Err(Error::InvalidInput("fps window must be > 0".into()));
    }
    let w = window_s * 1000.0;
    Ok(sample_ms
        .iter()
        .map(|&t| completions_ms.iter().filter(|&&c| c <= t && c > t - w).count() as f64 / window_s)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain_id: u64,
    pub host: RobotId,
    pub pipeline: String,
    pub start_ms: f64,
    pub end_ms: Option<f64>,
    pub latency_ms: Option<f64>,
    pub completed: bool,
    pub dropped: bool,
    pub failed: bool,
    /// Host FPS sampled at completion.
    pub fps: f64,
    pub goal_fps: f64,
    pub budget_ms: f64,
    pub stage_count: usize,
    pub offloaded_stage_count: usize,
    pub energy_j: f64,
    pub stages: Vec<StageOutcome>,
}

fn pipeline_name(spec: &ChainSpec) -> String {
    spec.stages.iter().map(|s| s.stage_kind.name()).collect::<Vec<_>>().join("+")
}

impl ChainRecord {
    fn base(spec: &ChainSpec, start_ms: f64, stages: Vec<StageOutcome>) -> Self {
        let offloaded = stages.iter().filter(|s| s.offloaded(spec.host_id)).count();
        let energy = stages.iter().map(|s| s.energy_j).sum();
        Self {
            chain_id: spec.chain_id,
            host: spec.host_id,
            pipeline: pipeline_name(spec),
            start_ms,
            end_ms: None,
            latency_ms: None,
            completed: false,
            dropped: false,
            failed: false,
            fps: 0.0,
            goal_fps: spec.goal_fps,
            budget_ms: spec.latency_budget_ms,
            stage_count: spec.stages.len(),
            offloaded_stage_count: offloaded,
            energy_j: energy,
            stages,
        }
    }

    pub fn completed(spec: &ChainSpec, start_ms: f64, end_ms: f64, stages: Vec<StageOutcome>, fps: f64) -> Self {
        Self { end_ms: Some(end_ms), latency_ms: Some(end_ms - start_ms), completed: true, fps, ..Self::base(spec, start_ms, stages) }
    }

    pub fn dropped(spec: &ChainSpec, start_ms: f64) -> Self {
        Self { dropped: true, ..Self::base(spec, start_ms, vec![]) }
    }

    pub fn unfinished(spec: &ChainSpec, start_ms: f64, stages: Vec<StageOutcome>, failed: bool) -> Self {
        Self { failed, ..Self::base(spec, start_ms, stages) }
    }

    pub fn succeeded(&self, c: &SuccessCriteria) -> bool {
        self.completed && self.fps >= c.goal_fps && self.latency_ms.is_some_and(|l| l <= c.latency_budget_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    pub goal_fps: f64,
    pub latency_budget_ms: f64,
}

impl SuccessCriteria {
    pub fn new(goal_fps: f64, latency_budget_ms: f64) -> Result<Self> {
        if !(goal_fps > 0.0 && latency_budget_ms > 0.0) {
            return Err(Error::InvalidInput("success criteria must be positive".into()));
        }
        Ok(Self { goal_fps, latency_budget_ms })
    }
}

/// Fraction of chains meeting both the FPS goal and the latency budget.
/// Dropped and unfinished chains count as failures.
pub fn success_rate(chains: &[&ChainRecord], c: &SuccessCriteria) -> Result<f64> {
    if chains.is_empty() {
        return Err(Error::InvalidInput("success rate of zero chains".into()));
    }
    Ok(chains.iter().filter(|ch| ch.succeeded(c)).count() as f64 / chains.len() as f64)
}

/// Offloaded over total executed stages of chains hosted by each slot.
pub fn offload_rate(chains: &[ChainRecord], n: usize) -> Vec<f64> {
    let mut off = vec![0usize; n];
    let mut tot = vec![0usize; n];
    for c in chains {
        off[c.host] += c.offloaded_stage_count;
        tot[c.host] += c.stages.len();
    }
    off.iter().zip(&tot).map(|(&o, &t)| if t == 0 { 0.0 } else { o as f64 / t as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub robot: RobotId,
    pub name: String,
    pub cpu_pct: f64,
    pub gpu_pct: f64,
    pub energy_wh: f64,
    pub soc_drop_pct: f64,
}

fn interpolate(robot: &RobotState, t: f64) -> (f64, f64, f64, f64) {
    let tr = &robot.trace;
    let i = tr.partition_point(|s| s.t_ms <= t);
    if i == 0 {
        let s = tr[0];
        return (s.busy_ms, s.cpu_ms, s.energy_j, s.soc);
    }
    let a = tr[i - 1];
    if i == tr.len() || a.t_ms == t {
        return (a.busy_ms, a.cpu_ms, a.energy_j, a.soc);
    }
    let b = tr[i];
    let f = (t - a.t_ms) / (b.t_ms - a.t_ms);
    let lerp = |x: f64, y: f64| x + f * (y - x);
    (lerp(a.busy_ms, b.busy_ms), lerp(a.cpu_ms, b.cpu_ms), lerp(a.energy_j, b.energy_j), lerp(a.soc, b.soc))
}

/// Time-weighted utilization, energy and SoC drop over `[from, to]` ms.
/// Counters are piecewise linear between trace samples, so the
/// interpolation is exact.
pub fn resource_summary(robot: &RobotState, from_ms: f64, to_ms: f64) -> Result<ResourceSummary> {
    let end = robot.trace.last().map_or(0.0, |s| s.t_ms);
    if !(to_ms > from_ms) || from_ms < 0.0 || to_ms > end + 1e-9 {
        return Err(Error::InvalidInput(format!("window [{from_ms}, {to_ms}] ms outside history [0, {end}]")));
    }
    let (b0, c0, e0, s0) = interpolate(robot, from_ms);
    let (b1, c1, e1, s1) = interpolate(robot, to_ms);
    let dt = to_ms - from_ms;
    Ok(ResourceSummary {
        robot: robot.profile.robot_id,
        name: robot.profile.name.clone(),
        cpu_pct: 100.0 * (c1 - c0) / dt,
        gpu_pct: 100.0 * (b1 - b0) / dt,
        energy_wh: (e1 - e0) / 3600.0,
        soc_drop_pct: 100.0 * (s0 - s1),
    })
}

/// Residuals of the energy and SoC bookkeeping of one robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    /// |stage + unfinished + idle − total| / max(total, 1 J).
    pub energy_rel_err: f64,
    /// |Δsoc − energy / capacity|.
    pub soc_abs_err: f64,
}

pub fn conservation(robot: &RobotState) -> Conservation {
    let idle = robot.profile.idle_power * robot.idle_ms / 1000.0;
    let parts = robot.stage_energy + robot.unfinished_energy + idle;
    let total = robot.cum_energy;
    let soc_from_energy = total / (robot.profile.battery_capacity * 3600.0);
    let soc_drop = robot.soc_start - robot.soc;
    let soc_err = if robot.soc <= 0.0 { 0.0 } else { (soc_drop - soc_from_energy).abs() };
    Conservation { energy_rel_err: (parts - total).abs() / total.max(1.0), soc_abs_err: soc_err }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotReport {
    pub robot: RobotId,
    pub name: String,
    pub is_host: bool,
    pub chains: usize,
    pub completed: usize,
    pub dropped: usize,
    pub failed: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    pub mean_latency_ms: Option<f64>,
    pub offload_rate: f64,
    pub cpu_pct: f64,
    pub gpu_pct: f64,
    pub energy_wh: f64,
    pub soc_drop_pct: f64,
    pub conservation: Conservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub scenario: String,
    pub scheduler: String,
    pub seed: u64,
    pub config_hash: String,
    pub horizon_s: f64,
    /// Chains that arrived early enough to finish within the horizon.
    pub eligible_chains: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub offload_rate: f64,
    pub energy_wh: f64,
    /// Mean shaped reward per stage decision.
    pub mean_reward: f64,
    pub robots: Vec<RobotReport>,
}

/// Chains that had a full latency budget before the horizon.
pub fn eligible<'a>(chains: &'a [ChainRecord], horizon_ms: f64) -> Vec<&'a ChainRecord> {
    chains.iter().filter(|c| c.start_ms + c.budget_ms <= horizon_ms).collect()
}

pub fn build_report(world: &World, scheduler: &str, seed: u64) -> Result<RunReport> {
    let cfg = world.config();
    let horizon = world.horizon_ms();
    let crit = SuccessCriteria::new(cfg.workload.goal_fps, cfg.workload.latency_budget_ms)?;
    let mut chains: Vec<ChainRecord> = world.chain_log.clone();
    chains.sort_by_key(|c| c.chain_id);
    let elig = eligible(&chains, horizon);
    let n = world.robots.len();
    let offload = offload_rate(&chains, n);
    let mut robots = Vec::with_capacity(n);
    for (slot, r) in world.robots.iter().enumerate() {
        let mine: Vec<&ChainRecord> = elig.iter().copied().filter(|c| c.host == slot).collect();
        let lat: Vec<f64> = mine.iter().filter_map(|c| c.latency_ms).collect();
        let res = resource_summary(r, 0.0, horizon)?;
        robots.push(RobotReport {
            robot: slot,
            name: r.profile.name.clone(),
            is_host: r.profile.is_host,
            chains: mine.len(),
            completed: mine.iter().filter(|c| c.completed).count(),
            dropped: mine.iter().filter(|c| c.dropped).count(),
            failed: mine.iter().filter(|c| c.failed).count(),
            successes: mine.iter().filter(|c| c.succeeded(&crit)).count(),
            success_rate: if mine.is_empty() { None } else { Some(success_rate(&mine, &crit)?) },
            mean_latency_ms: if lat.is_empty() { None } else { Some(lat.iter().sum::<f64>() / lat.len() as f64) },
            offload_rate: offload[slot],
            cpu_pct: res.cpu_pct,
            gpu_pct: res.gpu_pct,
            energy_wh: res.energy_wh,
            soc_drop_pct: res.soc_drop_pct,
            conservation: conservation(r),
        });
    }
    let successes: usize = robots.iter().map(|r| r.successes).sum();
    let stages: usize = chains.iter().map(|c| c.stages.len()).sum();
    let off: usize = chains.iter().map(|c| c.offloaded_stage_count).sum();
    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.name.clone(),
        scheduler: scheduler.into(),
        seed,
        config_hash: cfg.hash(),
        horizon_s: horizon / 1000.0,
        eligible_chains: elig.len(),
        successes,
        success_rate: if elig.is_empty() { 0.0 } else { successes as f64 / elig.len() as f64 },
        offload_rate: if stages == 0 { 0.0 } else { off as f64 / stages as f64 },
        energy_wh: robots.iter().map(|r| r.energy_wh).sum(),
        mean_reward: if world.reward_count == 0 { 0.0 } else { world.reward_sum / world.reward_count as f64 },
        robots,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// Write `<stem>_chains.csv`, `<stem>_robots.csv` and `<stem>.json`.
pub fn emit_report(dir: &Path, stem: &str, report: &RunReport, chains: &[ChainRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let chains_path = dir.join(format!("{stem}_chains.csv"));
    let mut w = csv::Writer::from_path(&chains_path)?;
    w.write_record([
        "chain_id", "host", "pipeline", "start_ms", "end_ms", "latency_ms", "completed", "dropped", "failed", "fps",
        "stages", "offloaded_stages", "energy_j",
    ])?;
    let mut sorted: Vec<&ChainRecord> = chains.iter().collect();
    sorted.sort_by_key(|c| c.chain_id);
    for c in sorted {
        w.write_record([
            c.chain_id.to_string(),
            c.host.to_string(),
            c.pipeline.clone(),
            format!("{:.6}", c.start_ms),
            opt(c.end_ms),
            opt(c.latency_ms),
            c.completed.to_string(),
            c.dropped.to_string(),
            c.failed.to_string(),
            format!("{:.6}", c.fps),
            c.stages.len().to_string(),
            c.offloaded_stage_count.to_string(),
            format!("{:.6}", c.energy_j),
        ])?;
    }
    w.flush()?;
    let robots_path = dir.join(format!("{stem}_robots.csv"));
    let mut w = csv::Writer::from_path(&robots_path)?;
    w.write_record([
        "robot", "name", "is_host", "chains", "successes", "success_rate", "offload_rate", "mean_latency_ms", "CPU (%)",
        "GPU (%)", "Energy (Wh)", "SoC drop (%)",
    ])?;
    for r in &report.robots {
        w.write_record([
            r.robot.to_string(),
            r.name.clone(),
            r.is_host.to_string(),
            r.chains.to_string(),
            r.successes.to_string(),
            opt(r.success_rate),
            format!("{:.6}", r.offload_rate),
            opt(r.mean_latency_ms),
            format!("{:.4}", r.cpu_pct),
            format!("{:.4}", r.gpu_pct),
            format!("{:.6}", r.energy_wh),
            format!("{:.6}", r.soc_drop_pct),
        ])?;
    }
    w.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    Ok(vec![chains_path, robots_path, json_path])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotAggregate {
    pub robot: RobotId,
    pub name: String,
    pub success_rate: Option<MeanSd>,
    pub offload_rate: MeanSd,
    pub energy_wh: MeanSd,
    pub soc_drop_pct: MeanSd,
    pub cpu_pct: MeanSd,
    pub gpu_pct: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub scenario: String,
    pub scheduler: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub success_rate: MeanSd,
    pub offload_rate: MeanSd,
    pub energy_wh: MeanSd,
    pub mean_reward: MeanSd,
    pub robots: Vec<RobotAggregate>,
}

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports to aggregate".into()))?;
    let col = |f: &dyn Fn(&RunReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let robots = (0..first.robots.len())
        .map(|i| {
            let rc = |f: &dyn Fn(&RobotReport) -> f64| MeanSd::of(&reports.iter().map(|r| f(&r.robots[i])).collect::<Vec<_>>());
            let succ: Vec<f64> = reports.iter().filter_map(|r| r.robots[i].success_rate).collect();
            RobotAggregate {
                robot: i,
                name: first.robots[i].name.clone(),
                success_rate: if succ.is_empty() { None } else { Some(MeanSd::of(&succ)) },
                offload_rate: rc(&|r| r.offload_rate),
                energy_wh: rc(&|r| r.energy_wh),
                soc_drop_pct: rc(&|r| r.soc_drop_pct),
                cpu_pct: rc(&|r| r.cpu_pct),
                gpu_pct: rc(&|r| r.gpu_pct),
            }
        })
        .collect();
    Ok(AggregateReport {
        scenario: first.scenario.clone(),
        scheduler: first.scheduler.clone(),
        config_hash: first.config_hash.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        success_rate: col(&|r| r.success_rate),
        offload_rate: col(&|r| r.offload_rate),
        energy_wh: col(&|r| r.energy_wh),
        mean_reward: col(&|r| r.mean_reward),
        robots,
    })
}
