//! Deterministic discrete-event simulation of robots, queues, links and
//! batteries executing staged perception chains.
//!
//! A [`World`] is owned by one driver and advanced event by event. Stage
//! placement is delegated to a [`Scheduler`]: either per-stage auctions fed by
//! the scheduler's bids, or a whole-chain plan computed at arrival.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::auction::{collect_bids, select_winner, Responder};
use crate::config::{DeviceEventKind, LinkConfig, ScenarioConfig, SimParams};
use crate::domain::{
    battery_horizon, ChainSpec, Mode, NetworkSummary, NetworkTelemetry, Observation, ObservationBuilder,
    ResourceTelemetry, RewardComponents, RewardWeights, RobotAction, RobotId, RobotProfile, StageContext,
    StageKind, TransitionRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{ChainRecord, FpsWindow};
use crate::training::{penalized_reward, shaped_reward, DualVariables};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkLink {
    pub base_rtt: f64,
    pub jitter_sd: f64,
    /// Bytes per millisecond.
    pub bandwidth: f64,
    pub rssi: f64,
    pub up: bool,
}

impl From<&LinkConfig> for NetworkLink {
    fn from(l: &LinkConfig) -> Self {
        Self { base_rtt: l.base_rtt_ms, jitter_sd: l.jitter_sd_ms, bandwidth: l.bandwidth, rssi: l.rssi, up: l.up }
    }
}

impl NetworkLink {
    /// Gaussian jitter around the base RTT, truncated at zero.
    pub fn sample_rtt<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.jitter_sd <= 0.0 {
            return self.base_rtt.max(0.0);
        }
        let z: f64 = StandardNormal.sample(rng);
        (self.base_rtt + self.jitter_sd * z).max(0.0)
    }

    pub fn expected_transfer_ms(&self, payload: f64) -> f64 {
        payload / self.bandwidth + self.base_rtt
    }
}

/// `payload / bandwidth + sampled RTT`.
pub fn sample_transfer_time<R: Rng + ?Sized>(payload: f64, link: &NetworkLink, rng: &mut R) -> Result<f64> {
    if !link.up || link.bandwidth <= 0.0 {
        return Err(Error::Runtime("link down: peer unreachable".into()));
    }
    Ok(payload / link.bandwidth + link.sample_rtt(rng))
}

/// Per-stage compute costs and the contention/noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    gflop: [f64; StageKind::COUNT],
    pub contention: f64,
    pub noise_sd: f64,
}

impl CostModel {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let mut gflop = [0.0; StageKind::COUNT];
        for c in &cfg.stage_costs {
            gflop[c.kind.index()] = c.gflop;
        }
        Self { gflop, contention: cfg.sim.contention, noise_sd: cfg.sim.proc_noise_sd }
    }

    pub fn with_costs(gflop: [f64; StageKind::COUNT], contention: f64, noise_sd: f64) -> Self {
        Self { gflop, contention, noise_sd }
    }

    pub fn gflop(&self, kind: StageKind) -> f64 {
        self.gflop[kind.index()]
    }

    /// Noise-free processing time in ms.
    pub fn expected_proc_ms(&self, profile: &RobotProfile, kind: StageKind, queue_len: usize) -> f64 {
        self.gflop(kind) / profile.compute_throughput * 1000.0 * (1.0 + self.contention * queue_len as f64)
    }

    /// `flops / throughput × (1 + c_q × queue_len) × lognormal noise`, where
    /// `queue_len` counts the stages still waiting in the robot's queue.
    pub fn sample_proc_time<R: Rng + ?Sized>(&self, robot: &RobotState, stage: &StageContext, rng: &mut R) -> Result<f64> {
        if !robot.online {
            return Err(Error::Offline(robot.profile.robot_id));
        }
        let base = self.expected_proc_ms(&robot.profile, stage.stage_kind, robot.queue.len());
        let noise = if self.noise_sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            (self.noise_sd * z).exp()
        } else {
            1.0
        };
        Ok(base * noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageOutcome {
    pub winner: RobotId,
    pub proc_ms: f64,
    pub xfer_ms: f64,
    pub wait_ms: f64,
    pub energy_j: f64,
    pub deadline_miss: bool,
    pub slack_ms: f64,
    pub rtt_ms: f64,
}

impl StageOutcome {
    pub fn elapsed_ms(&self) -> f64 {
        self.xfer_ms + self.wait_ms + self.proc_ms
    }

    pub fn offloaded(&self, host: RobotId) -> bool {
        self.winner != host
    }
}

/// Busy energy and deadline check for one executed stage. `lead_ms` is the
/// time from chain arrival to this stage's decision and `deadline_ms` is
/// the stage's cumulative deadline, so the check is against the chain
/// clock: the last stage misses exactly when the chain overruns its budget.
pub fn stage_outcome(
    winner: &RobotProfile,
    proc_ms: f64,
    xfer_ms: f64,
    wait_ms: f64,
    rtt_ms: f64,
    lead_ms: f64,
    deadline_ms: f64,
) -> StageOutcome {
    let elapsed = lead_ms + proc_ms + xfer_ms + wait_ms;
    StageOutcome {
        winner: winner.robot_id,
        proc_ms,
        xfer_ms,
        wait_ms,
        energy_j: winner.busy_power * proc_ms / 1000.0,
        deadline_miss: elapsed > deadline_ms,
        slack_ms: deadline_ms - elapsed,
        rtt_ms,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueuedStage {
    pub chain_id: u64,
    pub stage_idx: usize,
    pub kind: StageKind,
    pub ready_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStage {
    pub chain_id: u64,
    pub stage_idx: usize,
    pub kind: StageKind,
    pub start_ms: f64,
    pub proc_ms: f64,
    pub wait_ms: f64,
    pub token: u64,
}

/// Cumulative counters sampled whenever a robot's state is advanced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub t_ms: f64,
    pub busy_ms: f64,
    pub cpu_ms: f64,
    pub energy_j: f64,
    pub soc: f64,
}

#[derive(Debug, Clone)]
pub struct RobotState {
    pub profile: RobotProfile,
    pub queue: VecDeque<QueuedStage>,
    pub running: Option<RunningStage>,
    /// Stages in transfer towards this robot.
    pub inbound: u32,
    inbound_gflop: f64,
    pub soc: f64,
    pub soc_start: f64,
    pub cum_energy: f64,
    /// Sum of per-stage busy energy.
    pub stage_energy: f64,
    /// Busy energy of stages that were aborted, orphaned or still running
    /// at the horizon.
    pub unfinished_energy: f64,
    pub idle_ms: f64,
    pub busy_ms: f64,
    pub cpu_ms: f64,
    pub temp: f64,
    pub gpu_ema: f64,
    pub busy_until: f64,
    pub online: bool,
    last_update: f64,
    pub trace: Vec<UsageSample>,
}

impl RobotState {
    fn new(profile: RobotProfile, soc: f64, online: bool, temp: f64) -> Self {
        let mut r = Self {
            profile,
            queue: VecDeque::new(),
            running: None,
            inbound: 0,
            inbound_gflop: 0.0,
            soc,
            soc_start: soc,
            cum_energy: 0.0,
            stage_energy: 0.0,
            unfinished_energy: 0.0,
            idle_ms: 0.0,
            busy_ms: 0.0,
            cpu_ms: 0.0,
            temp,
            gpu_ema: 0.0,
            busy_until: 0.0,
            online,
            last_update: 0.0,
            trace: Vec::new(),
        };
        r.push_trace(0.0);
        r
    }

    /// Stages assigned to this robot and not yet completed.
    pub fn assigned(&self) -> u32 {
        self.inbound + self.queue.len() as u32 + u32::from(self.running.is_some())
    }

    pub fn power(&self) -> f64 {
        if !self.online {
            0.0
        } else if self.running.is_some() {
            self.profile.busy_power
        } else {
            self.profile.idle_power
        }
    }

    fn cpu_fraction(&self, p: &SimParams) -> f64 {
        let busy = if self.running.is_some() { p.cpu_busy_share } else { 0.0 };
        (busy + p.cpu_queue_share * self.queue.len() as f64).min(1.0)
    }

    fn push_trace(&mut self, t: f64) {
        self.trace.push(UsageSample { t_ms: t, busy_ms: self.busy_ms, cpu_ms: self.cpu_ms, energy_j: self.cum_energy, soc: self.soc });
    }

    /// Integrate energy, utilization and temperature up to `now`.
    fn advance(&mut self, now: f64, p: &SimParams) {
        let dt = now - self.last_update;
        if dt <= 0.0 {
            return;
        }
        if self.online {
            let busy = self.running.is_some();
            let energy = self.power() * dt / 1000.0;
            self.cum_energy += energy;
            self.soc = (self.soc - energy / (self.profile.battery_capacity * 3600.0)).max(0.0);
            self.cpu_ms += self.cpu_fraction(p) * dt;
            if busy {
                self.busy_ms += dt;
            } else {
                self.idle_ms += dt;
            }
            let target = if busy { 1.0 } else { 0.0 };
            self.gpu_ema += (target - self.gpu_ema) * (1.0 - (-dt / p.util_tau_ms).exp());
            let setpoint = p.ambient_temp + if busy { p.busy_temp_rise } else { 0.0 };
            self.temp += (setpoint - self.temp) * (1.0 - (-dt / (p.temp_tau_s * 1000.0)).exp());
        }
        self.last_update = now;
        self.push_trace(now);
    }

    pub fn telemetry(&self, p: &SimParams) -> ResourceTelemetry {
        let power = self.power();
        ResourceTelemetry {
            battery_horizon: battery_horizon(self.soc, &self.profile, power),
            soc: self.soc.clamp(0.0, 1.0),
            power,
            temp: self.temp,
            cpu: self.cpu_fraction(p),
            gpu: self.gpu_ema.clamp(0.0, 1.0),
            ram: (p.ram_base + p.ram_queue_share * self.assigned() as f64 + 0.2 * self.gpu_ema).min(1.0),
            queue: self.assigned(),
        }
    }

    /// Noise-free estimate of when all assigned work will be done.
    pub fn expected_free_at(&self, now: f64, costs: &CostModel) -> f64 {
        let queued: f64 = self.queue.iter().map(|q| costs.gflop(q.kind)).sum::<f64>() + self.inbound_gflop;
        self.busy_until.max(now) + queued / self.profile.compute_throughput * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    DeviceLeave { slot: RobotId },
    DeviceJoin { slot: RobotId },
    StageDone { slot: RobotId, token: u64 },
    TransferDone { slot: RobotId, chain_id: u64 },
    PlanReady { chain_id: u64 },
    ChainArrival { host: RobotId },
}

impl EventKind {
    fn order(&self) -> u8 {
        match self {
            EventKind::DeviceLeave { .. } => 0,
            EventKind::DeviceJoin { .. } => 1,
            EventKind::StageDone { .. } => 2,
            EventKind::TransferDone { .. } => 3,
            EventKind::PlanReady { .. } => 4,
            EventKind::ChainArrival { .. } => 5,
        }
    }

    fn robot(&self) -> u64 {
        match *self {
            EventKind::DeviceLeave { slot }
            | EventKind::DeviceJoin { slot }
            | EventKind::StageDone { slot, .. }
            | EventKind::TransferDone { slot, .. } => slot as u64,
            EventKind::ChainArrival { host } => host as u64,
            EventKind::PlanReady { chain_id } => chain_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Queued {
    event: SimEvent,
    seq: u64,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so that BinaryHeap pops the earliest event first.
        other
            .event
            .time
            .total_cmp(&self.event.time)
            .then_with(|| other.event.kind.order().cmp(&self.event.kind.order()))
            .then_with(|| other.event.kind.robot().cmp(&self.event.kind.robot()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A whole-chain placement decided at arrival.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPlan {
    pub assignment: Vec<RobotId>,
    /// Planning latency charged before the first stage is dispatched.
    pub delay_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotSnapshot {
    pub profile: RobotProfile,
    pub online: bool,
    /// Online and reachable from the chain host.
    pub reachable: bool,
    pub free_at_ms: f64,
    pub pending: u32,
    pub link_from_host: Option<NetworkLink>,
}

/// Read-only view handed to planning schedulers.
#[derive(Debug, Clone)]
pub struct WorldSnapshot {
    pub now_ms: f64,
    pub host: RobotId,
    pub host_fps: f64,
    pub robots: Vec<RobotSnapshot>,
    pub costs: CostModel,
    pub reward: RewardWeights,
}

pub trait Scheduler {
    fn name(&self) -> String;

    /// Return a plan to bypass per-stage auctions for this chain.
    fn plan_chain(&mut self, _snapshot: &WorldSnapshot, _chain: &ChainSpec, _rng: &mut ChaCha8Rng) -> Result<Option<ChainPlan>> {
        Ok(None)
    }

    /// Called once before the bids of one auction are requested.
    fn begin_auction(&mut self, _rng: &mut ChaCha8Rng) {}

    /// Bid and head outputs of one responding robot.
    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<RobotAction>;
}

#[derive(Debug, Clone)]
struct Decision {
    observations: Vec<Option<Observation>>,
    mask: Vec<bool>,
    actions: Vec<Option<RobotAction>>,
    winner: RobotId,
    decided_ms: f64,
    xfer_ms: f64,
    rtt_ms: f64,
}

#[derive(Debug, Clone)]
struct ChainState {
    spec: ChainSpec,
    arrival_ms: f64,
    next_stage: usize,
    plan: Option<Vec<RobotId>>,
    decision: Option<Decision>,
    outcomes: Vec<StageOutcome>,
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub new_events: Vec<SimEvent>,
    pub records: Vec<TransitionRecord>,
    pub finished_chains: Vec<u64>,
}

pub struct World {
    cfg: ScenarioConfig,
    pub costs: CostModel,
    builder: ObservationBuilder,
    pub robots: Vec<RobotState>,
    links: Vec<Vec<Option<NetworkLink>>>,
    last_rtt: Vec<Vec<f64>>,
    clock: f64,
    horizon_ms: f64,
    queue: BinaryHeap<Queued>,
    seq: u64,
    chains: BTreeMap<u64, ChainState>,
    inflight: Vec<usize>,
    arrivals_active: Vec<bool>,
    next_chain_id: u64,
    next_token: u64,
    rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    fps: Vec<FpsWindow>,
    pub duals: DualVariables,
    embed_alias: Vec<RobotId>,
    record_transitions: bool,
    records: Vec<TransitionRecord>,
    pub chain_log: Vec<ChainRecord>,
    /// Running sum and count of shaped stage rewards.
    pub reward_sum: f64,
    pub reward_count: usize,
    finished: bool,
}

impl World {
    pub fn new(cfg: &ScenarioConfig, seed: u64, horizon_s: f64) -> Result<Self> {
        cfg.validate()?;
        if !(horizon_s > 0.0 && horizon_s.is_finite()) {
            return Err(Error::Config(format!("horizon must be > 0, got {horizon_s}")));
        }
        let n = cfg.roster.len();
        let mut links = vec![vec![None; n]; n];
        let mut last_rtt = vec![vec![0.0; n]; n];
        for l in &cfg.links {
            let link = NetworkLink::from(l);
            links[l.a][l.b] = Some(link);
            links[l.b][l.a] = Some(link);
            last_rtt[l.a][l.b] = l.base_rtt_ms;
            last_rtt[l.b][l.a] = l.base_rtt_ms;
        }
        let robots = cfg
            .roster
            .iter()
            .map(|r| RobotState::new(r.profile.clone(), r.initial_soc, r.online, cfg.sim.ambient_temp))
            .collect();
        let mut w = Self {
            cfg: cfg.clone(),
            costs: CostModel::from_config(cfg),
            builder: ObservationBuilder::new(cfg.scales.clone(), cfg.max_robots),
            robots,
            links,
            last_rtt,
            clock: 0.0,
            horizon_ms: horizon_s * 1000.0,
            queue: BinaryHeap::new(),
            seq: 0,
            chains: BTreeMap::new(),
            inflight: vec![0; n],
            arrivals_active: vec![false; n],
            next_chain_id: 0,
            next_token: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED),
            fps: vec![FpsWindow::new(cfg.sim.fps_window_s); n],
            duals: DualVariables::zeros(n, cfg),
            embed_alias: (0..n).collect(),
            record_transitions: true,
            records: Vec::new(),
            chain_log: Vec::new(),
            reward_sum: 0.0,
            reward_count: 0,
            finished: false,
        };
        for e in &cfg.events {
            let kind = match e.kind {
                DeviceEventKind::Join => EventKind::DeviceJoin { slot: e.slot },
                DeviceEventKind::Leave => EventKind::DeviceLeave { slot: e.slot },
            };
            w.push(SimEvent { time: e.time_s * 1000.0, kind });
        }
        for slot in 0..n {
            if w.robots[slot].online && w.robots[slot].profile.is_host {
                w.arrivals_active[slot] = true;
                let first = w.rng.random_range(0.0..1000.0 / cfg.workload.arrival_fps);
                w.push(SimEvent { time: first, kind: EventKind::ChainArrival { host: slot } });
            }
        }
        Ok(w)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    pub fn horizon_ms(&self) -> f64 {
        self.horizon_ms
    }

    pub fn set_record_transitions(&mut self, on: bool) {
        self.record_transitions = on;
    }

    /// Make `slot` present `donor`'s identity one-hot to the policy.
    pub fn set_embed_alias(&mut self, slot: RobotId, donor: RobotId) {
        self.embed_alias[slot] = donor;
    }

    pub fn take_records(&mut self) -> Vec<TransitionRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn active_chains(&self) -> usize {
        self.chains.len()
    }

    fn push(&mut self, event: SimEvent) {
        self.seq += 1;
        self.queue.push(Queued { event, seq: self.seq });
    }

    pub fn link(&self, a: RobotId, b: RobotId) -> Option<&NetworkLink> {
        self.links.get(a)?.get(b)?.as_ref()
    }

    fn reachable(&self, host: RobotId, slot: RobotId) -> bool {
        self.robots[slot].online && (slot == host || self.link(host, slot).is_some_and(|l| l.up))
    }

    pub fn network_telemetry(&self, slot: RobotId) -> NetworkTelemetry {
        let mut rtt = BTreeMap::new();
        let mut rssi = Vec::new();
        for peer in 0..self.robots.len() {
            if peer == slot || !self.robots[peer].online {
                continue;
            }
            if let Some(l) = self.link(slot, peer).filter(|l| l.up) {
                rtt.insert(peer, self.last_rtt[slot][peer]);
                rssi.push(l.rssi);
            }
        }
        let rssi = if rssi.is_empty() { -90.0 } else { rssi.iter().sum::<f64>() / rssi.len() as f64 };
        NetworkTelemetry { rssi, rtt }
    }

    pub fn telemetry(&self, slot: RobotId) -> ResourceTelemetry {
        self.robots[slot].telemetry(&self.cfg.sim)
    }

    pub fn observation(&self, slot: RobotId, host: RobotId, ctx: &StageContext) -> Result<Observation> {
        let net = NetworkSummary::from_telemetry(&self.network_telemetry(slot), slot, host)?;
        self.builder.build(&self.telemetry(slot), &net, ctx, slot, self.embed_alias[slot])
    }

    pub fn host_fps(&self, host: RobotId) -> f64 {
        self.fps[host].rate(self.clock)
    }

    pub fn snapshot(&self, host: RobotId) -> WorldSnapshot {
        // Later stages already planned for in-flight chains.
        let mut reserved = vec![0.0; self.robots.len()];
        for c in self.chains.values() {
            if let Some(plan) = &c.plan {
                let from = c.next_stage + usize::from(c.decision.is_some());
                for (ctx, &r) in c.spec.stages.iter().zip(plan).skip(from) {
                    reserved[r] += self.costs.gflop(ctx.stage_kind);
                }
            }
        }
        let robots = self
            .robots
            .iter()
            .enumerate()
            .map(|(slot, r)| RobotSnapshot {
                profile: r.profile.clone(),
                online: r.online,
                reachable: self.reachable(host, slot),
                free_at_ms: r.expected_free_at(self.clock, &self.costs)
                    + reserved[slot] / r.profile.compute_throughput * 1000.0,
                pending: r.assigned(),
                link_from_host: if slot == host { None } else { self.link(host, slot).copied() },
            })
            .collect();
        WorldSnapshot {
            now_ms: self.clock,
            host,
            host_fps: self.host_fps(host),
            robots,
            costs: self.costs.clone(),
            reward: self.cfg.reward.clone(),
        }
    }

    fn advance_all(&mut self, now: f64) {
        let p = self.cfg.sim.clone();
        for r in &mut self.robots {
            r.advance(now, &p);
        }
    }

    /// Pop and process the next event before the horizon. Returns `None`
    /// once the simulation has terminated.
    pub fn step_next(&mut self, sched: &mut dyn Scheduler) -> Result<Option<StepOutput>> {
        let next = match self.queue.peek() {
            Some(q) if q.event.time <= self.horizon_ms => self.queue.pop().unwrap().event,
            _ => {
                self.finish();
                return Ok(None);
            }
        };
        let out = self.step(next, sched)?;
        for e in &out.new_events {
            self.push(*e);
        }
        for r in &out.records {
            self.reward_sum += r.reward;
            self.reward_count += 1;
        }
        if self.record_transitions {
            self.records.extend(out.records.iter().cloned());
        }
        Ok(Some(out))
    }

    pub fn run(&mut self, sched: &mut dyn Scheduler) -> Result<()> {
        while self.step_next(sched)?.is_some() {}
        Ok(())
    }

    /// Close the accounting at the horizon. Idempotent.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let end = self.horizon_ms.max(self.clock);
        self.clock = end;
        self.advance_all(end);
        for r in &mut self.robots {
            if let Some(run) = &r.running {
                r.unfinished_energy += r.profile.busy_power * (end - run.start_ms) / 1000.0;
            }
        }
        let open: Vec<u64> = self.chains.keys().copied().collect();
        for id in open {
            let c = self.chains.remove(&id).unwrap();
            self.chain_log.push(ChainRecord::unfinished(&c.spec, c.arrival_ms, c.outcomes, false));
        }
    }

    /// Process one event; the caller enqueues the returned events.
    pub fn step(&mut self, event: SimEvent, sched: &mut dyn Scheduler) -> Result<StepOutput> {
        if event.time < self.clock {
            return Err(Error::Runtime(format!("event at {} ms precedes clock {} ms", event.time, self.clock)));
        }
        self.clock = event.time;
        self.advance_all(self.clock);
        let mut out = StepOutput::default();
        match event.kind {
            EventKind::ChainArrival { host } => self.on_arrival(host, sched, &mut out)?,
            EventKind::PlanReady { chain_id } => {
                if self.chains.contains_key(&chain_id) {
                    self.decide_stage(chain_id, sched, &mut out)?;
                }
            }
            EventKind::TransferDone { slot, chain_id } => self.on_transfer_done(slot, chain_id, &mut out)?,
            EventKind::StageDone { slot, token } => self.on_stage_done(slot, token, sched, &mut out)?,
            EventKind::DeviceLeave { slot } => self.on_leave(slot, &mut out),
            EventKind::DeviceJoin { slot } => {
                if !self.robots[slot].online {
                    self.robots[slot].online = true;
                    if self.robots[slot].profile.is_host && !self.arrivals_active[slot] {
                        self.arrivals_active[slot] = true;
                        out.new_events.push(SimEvent { time: self.clock, kind: EventKind::ChainArrival { host: slot } });
                    }
                }
            }
        }
        Ok(out)
    }

    fn on_arrival(&mut self, host: RobotId, sched: &mut dyn Scheduler, out: &mut StepOutput) -> Result<()> {
        if !self.robots[host].online {
            self.arrivals_active[host] = false;
            return Ok(());
        }
        let w = &self.cfg.workload;
        let gap = 1000.0 / w.arrival_fps;
        let jitter = if w.arrival_jitter > 0.0 { self.rng.random_range(-w.arrival_jitter..w.arrival_jitter) } else { 0.0 };
        out.new_events.push(SimEvent { time: self.clock + gap * (1.0 + jitter), kind: EventKind::ChainArrival { host } });

        let mut spec = self.cfg.chain_template(host)?;
        spec.chain_id = self.next_chain_id;
        self.next_chain_id += 1;
        if self.inflight[host] >= self.cfg.workload.max_inflight {
            self.chain_log.push(ChainRecord::dropped(&spec, self.clock));
            return Ok(());
        }
        let id = spec.chain_id;
        let plan = sched.plan_chain(&self.snapshot(host), &spec, &mut self.policy_rng)?;
        self.inflight[host] += 1;
        let delay = plan.as_ref().map_or(0.0, |p| p.delay_ms);
        if let Some(p) = &plan {
            if p.assignment.len() != spec.stages.len() {
                return Err(Error::Runtime(format!("plan covers {} of {} stages", p.assignment.len(), spec.stages.len())));
            }
        }
        self.chains.insert(
            id,
            ChainState { spec, arrival_ms: self.clock, next_stage: 0, plan: plan.map(|p| p.assignment), decision: None, outcomes: vec![] },
        );
        if delay > 0.0 {
            out.new_events.push(SimEvent { time: self.clock + delay, kind: EventKind::PlanReady { chain_id: id } });
            Ok(())
        } else {
            self.decide_stage(id, sched, out)
        }
    }

    fn decide_stage(&mut self, chain_id: u64, sched: &mut dyn Scheduler, out: &mut StepOutput) -> Result<()> {
        let (host, idx, ctx, planned) = {
            let c = &self.chains[&chain_id];
            (c.spec.host_id, c.next_stage, c.spec.stages[c.next_stage].clone(), c.plan.as_ref().map(|p| p[c.next_stage]))
        };
        if !self.robots[host].online {
            self.fail_chain(chain_id, out);
            return Ok(());
        }
        let n = self.robots.len();
        // Response latency doubles as the freshest RTT measurement.
        let mut responders = Vec::with_capacity(n);
        for slot in 0..n {
            let response_ms = if slot == host {
                Some(0.0)
            } else if self.reachable(host, slot) {
                let l = *self.link(host, slot).unwrap();
                let rtt = l.sample_rtt(&mut self.rng);
                self.last_rtt[host][slot] = rtt;
                self.last_rtt[slot][host] = rtt;
                Some(rtt)
            } else {
                None
            };
            responders.push(Responder { online: self.robots[slot].online, response_ms });
        }
        let mut observations = vec![None; n];
        for slot in 0..n {
            if self.reachable(host, slot) {
                observations[slot] = Some(self.observation(slot, host, &ctx)?);
            }
        }
        let bounds = self.cfg.auction.bounds;
        let window = self.cfg.sim.bid_window_ms;
        let mut actions: Vec<Option<RobotAction>> = vec![None; n];
        let (winner, mask) = match planned {
            Some(p) => {
                let mask: Vec<bool> =
                    responders.iter().map(|r| r.online && matches!(r.response_ms, Some(ms) if ms <= window)).collect();
                let winner = if mask[p] { p } else { host };
                (winner, mask)
            }
            None => {
                sched.begin_auction(&mut self.policy_rng);
                let rng = &mut self.policy_rng;
                let bidset = collect_bids(&ctx, &responders, window, &bounds, |slot| {
                    let a = sched.act(observations[slot].as_ref().expect("responder has an observation"), rng)?;
                    let bid = a.bid;
                    actions[slot] = Some(a);
                    Ok(bid)
                });
                match bidset {
                    Ok(set) => (select_winner(&set)?.winner_id, set.mask.available),
                    Err(Error::AuctionFailed) => {
                        let mut m = vec![false; n];
                        m[host] = true;
                        (host, m)
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        for (slot, a) in actions.iter_mut().enumerate() {
            if let Some(a) = a {
                if slot == host {
                    a.mode = if winner == host { Mode::Local } else { Mode::Offload };
                    a.target = Some(winner);
                } else {
                    a.mode = if winner == slot { Mode::Accept } else { Mode::Local };
                    a.target = None;
                }
            }
        }
        let (xfer_ms, rtt_ms) = if winner == host {
            (0.0, 0.0)
        } else {
            let link = *self.link(host, winner).ok_or(Error::Unreachable { from: host, to: winner })?;
            (sample_transfer_time(ctx.tensor_bytes, &link, &mut self.rng)?, self.last_rtt[host][winner])
        };
        let decision = Decision { observations, mask, actions, winner, decided_ms: self.clock, xfer_ms, rtt_ms };
        self.chains.get_mut(&chain_id).unwrap().decision = Some(decision);
        let kind = ctx.stage_kind;
        if winner == host {
            self.enqueue(winner, chain_id, idx, kind, out)?;
        } else {
            let r = &mut self.robots[winner];
            r.inbound += 1;
            r.inbound_gflop += self.costs.gflop(kind);
            out.new_events.push(SimEvent { time: self.clock + xfer_ms, kind: EventKind::TransferDone { slot: winner, chain_id } });
        }
        Ok(())
    }

    fn enqueue(&mut self, slot: RobotId, chain_id: u64, stage_idx: usize, kind: StageKind, out: &mut StepOutput) -> Result<()> {
        self.robots[slot].queue.push_back(QueuedStage { chain_id, stage_idx, kind, ready_ms: self.clock });
        self.try_start(slot, out)
    }

    fn try_start(&mut self, slot: RobotId, out: &mut StepOutput) -> Result<()> {
        if self.robots[slot].running.is_some() || !self.robots[slot].online {
            return Ok(());
        }
        let Some(next) = self.robots[slot].queue.pop_front() else {
            return Ok(());
        };
        let ctx = self.chains[&next.chain_id].spec.stages[next.stage_idx].clone();
        let proc_ms = self.costs.sample_proc_time(&self.robots[slot], &ctx, &mut self.rng)?;
        self.next_token += 1;
        let token = self.next_token;
        let r = &mut self.robots[slot];
        r.running = Some(RunningStage {
            chain_id: next.chain_id,
            stage_idx: next.stage_idx,
            kind: next.kind,
            start_ms: self.clock,
            proc_ms,
            wait_ms: self.clock - next.ready_ms,
            token,
        });
        r.busy_until = self.clock + proc_ms;
        out.new_events.push(SimEvent { time: self.clock + proc_ms, kind: EventKind::StageDone { slot, token } });
        Ok(())
    }

    fn on_transfer_done(&mut self, slot: RobotId, chain_id: u64, out: &mut StepOutput) -> Result<()> {
        if !self.chains.contains_key(&chain_id) {
            return Ok(());
        }
        if !self.robots[slot].online {
            self.fail_chain(chain_id, out);
            return Ok(());
        }
        let (idx, kind) = {
            let c = &self.chains[&chain_id];
            (c.next_stage, c.spec.stages[c.next_stage].stage_kind)
        };
        let r = &mut self.robots[slot];
        r.inbound = r.inbound.saturating_sub(1);
        r.inbound_gflop = (r.inbound_gflop - self.costs.gflop(kind)).max(0.0);
        self.enqueue(slot, chain_id, idx, kind, out)
    }

    fn on_stage_done(&mut self, slot: RobotId, token: u64, sched: &mut dyn Scheduler, out: &mut StepOutput) -> Result<()> {
        let running = match &self.robots[slot].running {
            Some(r) if r.token == token => r.clone(),
            _ => return Ok(()),
        };
        self.robots[slot].running = None;
        let chain_id = running.chain_id;
        let Some(chain) = self.chains.get_mut(&chain_id) else {
            let r = &mut self.robots[slot];
            r.unfinished_energy += r.profile.busy_power * running.proc_ms / 1000.0;
            return self.try_start(slot, out);
        };
        let decision = chain.decision.take().expect("stage completed without a decision");
        let since_arrival = self.clock - chain.arrival_ms;
        let lead = (since_arrival - decision.xfer_ms - running.wait_ms - running.proc_ms).max(0.0);
        let outcome = stage_outcome(
            &self.robots[slot].profile,
            running.proc_ms,
            decision.xfer_ms,
            running.wait_ms,
            decision.rtt_ms,
            lead,
            chain.spec.cumulative_deadline(running.stage_idx),
        );
        self.robots[slot].stage_energy += outcome.energy_j;
        chain.outcomes.push(outcome);
        chain.next_stage += 1;
        let host = chain.spec.host_id;
        let last = chain.next_stage == chain.spec.stages.len();
        if last {
            // The frame counts towards FPS as soon as it completes.
            self.fps[host].record(self.clock);
        }
        let fps = self.fps[host].rate_at(self.clock);
        let record = self.make_record(chain_id, running.stage_idx, decision, &outcome, fps, last, false);
        out.records.push(record);
        if last {
            let c = self.chains.remove(&chain_id).unwrap();
            self.inflight[host] -= 1;
            self.chain_log.push(ChainRecord::completed(&c.spec, c.arrival_ms, self.clock, c.outcomes, fps));
            out.finished_chains.push(chain_id);
        } else {
            self.decide_stage(chain_id, sched, out)?;
        }
        self.try_start(slot, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn make_record(
        &self,
        chain_id: u64,
        t: usize,
        decision: Decision,
        outcome: &StageOutcome,
        fps: f64,
        done: bool,
        failed: bool,
    ) -> TransitionRecord {
        let chain = &self.chains[&chain_id];
        let components = RewardComponents {
            fps,
            slack_ms: outcome.slack_ms,
            rtt_ms: outcome.rtt_ms,
            proc_ms: outcome.proc_ms,
            xfer_ms: outcome.xfer_ms,
            wait_ms: outcome.wait_ms,
            energy_j: outcome.energy_j,
            deadline_miss: outcome.deadline_miss,
        };
        let powers: Vec<f64> = self.robots.iter().map(|r| r.power()).collect();
        let reward = shaped_reward(&components, &self.cfg.reward);
        let penalized = penalized_reward(reward, &powers, components.deadline_miss, &self.duals);
        TransitionRecord {
            t,
            chain_id,
            robot_id: chain.spec.host_id,
            time_ms: self.clock,
            chain_len: chain.spec.stages.len(),
            observations: decision.observations,
            mask: decision.mask,
            actions: decision.actions,
            winner_id: decision.winner,
            reward,
            penalized_reward: penalized,
            powers,
            components,
            done,
            failed,
        }
    }

    fn fail_chain(&mut self, chain_id: u64, out: &mut StepOutput) {
        let Some(mut chain) = self.chains.remove(&chain_id) else {
            return;
        };
        let host = chain.spec.host_id;
        self.inflight[host] -= 1;
        if let Some(decision) = chain.decision.take() {
            let outcome = StageOutcome {
                winner: decision.winner,
                xfer_ms: decision.xfer_ms,
                wait_ms: self.clock - decision.decided_ms,
                deadline_miss: true,
                slack_ms: chain.spec.cumulative_deadline(chain.next_stage) - (self.clock - chain.arrival_ms),
                rtt_ms: decision.rtt_ms,
                ..Default::default()
            };
            let fps = self.fps[host].rate_at(self.clock);
            let t = chain.next_stage;
            self.chains.insert(chain_id, chain.clone());
            let rec = self.make_record(chain_id, t, decision, &outcome, fps, true, true);
            self.chains.remove(&chain_id);
            out.records.push(rec);
        }
        self.chain_log.push(ChainRecord::unfinished(&chain.spec, chain.arrival_ms, chain.outcomes, true));
        out.finished_chains.push(chain_id);
    }

    fn on_leave(&mut self, slot: RobotId, out: &mut StepOutput) {
        if !self.robots[slot].online {
            return;
        }
        let r = &mut self.robots[slot];
        r.online = false;
        let mut doomed: Vec<u64> = r.queue.drain(..).map(|q| q.chain_id).collect();
        if let Some(run) = r.running.take() {
            r.unfinished_energy += r.profile.busy_power * (self.clock - run.start_ms) / 1000.0;
            doomed.push(run.chain_id);
        }
        r.inbound = 0;
        r.inbound_gflop = 0.0;
        r.busy_until = self.clock;
        for (id, c) in &self.chains {
            let executing_here = c.decision.as_ref().is_some_and(|d| d.winner == slot);
            if c.spec.host_id == slot || executing_here {
                doomed.push(*id);
            }
        }
        doomed.sort_unstable();
        doomed.dedup();
        for id in doomed {
            self.fail_chain(id, out);
        }
    }

    /// Assigned-but-not-completed stages per robot, recomputed from chain state.
    pub fn recount_assigned(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.robots.len()];
        for c in self.chains.values() {
            if let Some(d) = &c.decision {
                counts[d.winner] += 1;
            }
        }
        counts
    }
}
