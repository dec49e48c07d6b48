//! Comparison schedulers: fully local execution, the heuristic auction
//! bidder, a per-chain genetic algorithm, and the learned policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::auction::{heuristic_bid, heuristic_capacity};
use crate::config::HeuristicCoefficients;
use crate::domain::{BidBounds, ChainSpec, Mode, Observation, RewardComponents, RobotAction, RobotId};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Actor;
use crate::sim::{stage_outcome, ChainPlan, Scheduler, WorldSnapshot};
use crate::training::shaped_reward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism_count: usize,
    pub tournament_size: usize,
    /// Chains optimized per planning call.
    pub fitness_window: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 24,
            generations: 30,
            crossover_rate: 0.9,
            mutation_rate: 0.15,
            elitism_count: 2,
            tournament_size: 3,
            fitness_window: 1,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ga: {m}")));
        if self.population_size < 2 {
            return bad("population_size must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("rates must be in [0,1]");
        }
        if self.elitism_count >= self.population_size || self.tournament_size == 0 {
            return bad("elitism_count must be below the population size and tournament_size > 0");
        }
        if self.fitness_window != 1 {
            return bad("only per-chain planning (fitness_window = 1) is supported");
        }
        Ok(())
    }
}

/// Every stage runs on its chain host.
#[derive(Debug, Clone, Default)]
pub struct LocalScheduler;

impl Scheduler for LocalScheduler {
    fn name(&self) -> String {
        "baseline".into()
    }

    fn plan_chain(&mut self, snap: &WorldSnapshot, chain: &ChainSpec, _rng: &mut ChaCha8Rng) -> Result<Option<ChainPlan>> {
        Ok(Some(ChainPlan { assignment: vec![snap.host; chain.stages.len()], delay_ms: 0.0 }))
    }

    fn act(&mut self, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<RobotAction> {
        Err(Error::Runtime("the local scheduler never bids".into()))
    }
}

/// Telemetry-driven linear bidder. Optional Gaussian bid noise and a
/// fraction of auctions with uniformly random bids produce degraded
/// behavior data.
#[derive(Debug, Clone)]
pub struct HeuristicScheduler {
    pub coefficients: HeuristicCoefficients,
    pub bounds: BidBounds,
    pub bid_noise_sd: f64,
    pub degraded_fraction: f64,
    degraded: bool,
}

impl HeuristicScheduler {
    pub fn new(coefficients: HeuristicCoefficients, bounds: BidBounds) -> Self {
        Self { coefficients, bounds, bid_noise_sd: 0.0, degraded_fraction: 0.0, degraded: false }
    }

    pub fn with_noise(mut self, bid_noise_sd: f64, degraded_fraction: f64) -> Self {
        self.bid_noise_sd = bid_noise_sd;
        self.degraded_fraction = degraded_fraction;
        self
    }
}

impl Scheduler for HeuristicScheduler {
    fn name(&self) -> String {
        "auction".into()
    }

    fn begin_auction(&mut self, rng: &mut ChaCha8Rng) {
        self.degraded = self.degraded_fraction > 0.0 && rng.random::<f64>() < self.degraded_fraction;
    }

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<RobotAction> {
        let bid = if self.degraded {
            rng.random_range(self.bounds.a_min..=self.bounds.a_max)
        } else {
            let b = heuristic_bid(obs, &self.coefficients, &self.bounds)?;
            if self.bid_noise_sd > 0.0 {
                let n = Normal::new(0.0, self.bid_noise_sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
                self.bounds.clip_bid(b + n.sample(rng))?
            } else {
                b
            }
        };
        Ok(RobotAction { bid, mode: Mode::Local, target: None, capacity: heuristic_capacity(obs), latent: None, log_prob: None })
    }
}

/// Bids from the shared actor; sampled during training, greedy otherwise.
#[derive(Debug, Clone)]
pub struct PolicyScheduler {
    pub actor: Actor,
    pub stochastic: bool,
}

impl PolicyScheduler {
    pub fn new(actor: Actor, stochastic: bool) -> Self {
        Self { actor, stochastic }
    }
}

impl Scheduler for PolicyScheduler {
    fn name(&self) -> String {
        "rl".into()
    }

    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<RobotAction> {
        self.actor.act(&obs.features, self.stochastic, rng)
    }
}

/// Expected shaped reward of running `chain` with the given placement,
/// using noise-free costs from the snapshot.
pub fn predict_chain_reward(snap: &WorldSnapshot, chain: &ChainSpec, assignment: &[RobotId], delay_ms: f64) -> Result<f64> {
    if assignment.len() != chain.stages.len() {
        return Err(Error::Shape { expected: chain.stages.len(), got: assignment.len() });
    }
    let mut free_at: Vec<f64> = snap.robots.iter().map(|r| r.free_at_ms).collect();
    let mut pending: Vec<u32> = snap.robots.iter().map(|r| r.pending).collect();
    let mut t = snap.now_ms + delay_ms;
    let mut total = 0.0;
    for (idx, (stage, &r)) in chain.stages.iter().zip(assignment).enumerate() {
        let robot = snap.robots.get(r).ok_or(Error::Offline(r))?;
        if !robot.reachable {
            return Err(Error::Unreachable { from: snap.host, to: r });
        }
        let (xfer, rtt) = match (r == snap.host, robot.link_from_host) {
            (true, _) => (0.0, 0.0),
            (false, Some(l)) => (l.expected_transfer_ms(stage.tensor_bytes), l.base_rtt),
            (false, None) => return Err(Error::Unreachable { from: snap.host, to: r }),
        };
        let ready = t + xfer;
        let start = ready.max(free_at[r]);
        let queue_ahead = if free_at[r] > ready { pending[r] as usize } else { 0 };
        let proc = snap.costs.expected_proc_ms(&robot.profile, stage.stage_kind, queue_ahead);
        let out = stage_outcome(&robot.profile, proc, xfer, start - ready, rtt, t - snap.now_ms, chain.cumulative_deadline(idx));
        let c = RewardComponents {
            fps: snap.host_fps,
            slack_ms: out.slack_ms,
            rtt_ms: rtt,
            proc_ms: proc,
            xfer_ms: xfer,
            wait_ms: out.wait_ms,
            energy_j: out.energy_j,
            deadline_miss: out.deadline_miss,
        };
        total += shaped_reward(&c, &snap.reward);
        t = start + proc;
        free_at[r] = t;
        pending[r] += 1;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub assignment: Vec<RobotId>,
    pub fitness: f64,
    /// Best fitness among the initial population.
    pub initial_best: f64,
}

/// Genetic search over per-stage placements for one chain. `seeds` are
/// injected into the initial population before random members.
pub fn ga_schedule(
    snap: &WorldSnapshot,
    chain: &ChainSpec,
    cfg: &GaConfig,
    delay_ms: f64,
    seeds: &[Vec<RobotId>],
    rng: &mut ChaCha8Rng,
    exec: Exec,
) -> Result<GaResult> {
    let genes: Vec<RobotId> = (0..snap.robots.len()).filter(|&r| snap.robots[r].reachable).collect();
    if genes.is_empty() {
        return Err(Error::Runtime("no robot online for planning".into()));
    }
    let len = chain.stages.len();
    let fitness = |c: &Vec<RobotId>| predict_chain_reward(snap, chain, c, delay_ms).unwrap_or(f64::NEG_INFINITY);
    let mut pop: Vec<Vec<RobotId>> = seeds
        .iter()
        .filter(|s| s.len() == len && s.iter().all(|g| genes.contains(g)))
        .take(cfg.population_size)
        .cloned()
        .collect();
    while pop.len() < cfg.population_size {
        pop.push((0..len).map(|_| genes[rng.random_range(0..genes.len())]).collect());
    }
    let mut scores = exec.map(&pop, fitness);
    let best_of = |pop: &[Vec<RobotId>], scores: &[f64]| {
        let mut b = 0;
        for i in 1..pop.len() {
            if scores[i] > scores[b] {
                b = i;
            }
        }
        b
    };
    let b0 = best_of(&pop, &scores);
    let initial_best = scores[b0];
    let mut best = (pop[b0].clone(), scores[b0]);
    for _ in 0..cfg.generations {
        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut next: Vec<Vec<RobotId>> = ranked[..cfg.elitism_count].iter().map(|&i| pop[i].clone()).collect();
        let tournament = |rng: &mut ChaCha8Rng| {
            let mut w = rng.random_range(0..pop.len());
            for _ in 1..cfg.tournament_size {
                let c = rng.random_range(0..pop.len());
                if scores[c] > scores[w] {
                    w = c;
                }
            }
            w
        };
        while next.len() < cfg.population_size {
            let (pa, pb) = (tournament(rng), tournament(rng));
            let mut child = pop[pa].clone();
            if len > 1 && rng.random::<f64>() < cfg.crossover_rate {
                let cut = rng.random_range(1..len);
                child[cut..].copy_from_slice(&pop[pb][cut..]);
            }
            for g in child.iter_mut() {
                if rng.random::<f64>() < cfg.mutation_rate {
                    *g = genes[rng.random_range(0..genes.len())];
                }
            }
            next.push(child);
        }
        pop = next;
        scores = exec.map(&pop, fitness);
        let b = best_of(&pop, &scores);
        if scores[b] > best.1 {
            best = (pop[b].clone(), scores[b]);
        }
    }
    Ok(GaResult { assignment: best.0, fitness: best.1, initial_best })
}

/// Plans each chain at arrival and charges the planning delay.
#[derive(Debug, Clone)]
pub struct GaScheduler {
    pub cfg: GaConfig,
    pub delay_ms: f64,
    pub exec: Exec,
}

impl GaScheduler {
    pub fn new(cfg: GaConfig, delay_ms: f64) -> Self {
        Self { cfg, delay_ms, exec: Exec::Sequential }
    }
}

impl Scheduler for GaScheduler {
    fn name(&self) -> String {
        "ga".into()
    }

    fn plan_chain(&mut self, snap: &WorldSnapshot, chain: &ChainSpec, rng: &mut ChaCha8Rng) -> Result<Option<ChainPlan>> {
        let local = vec![snap.host; chain.stages.len()];
        let r = ga_schedule(snap, chain, &self.cfg, self.delay_ms, &[local], rng, self.exec)?;
        Ok(Some(ChainPlan { assignment: r.assignment, delay_ms: self.delay_ms }))
    }

    fn act(&mut self, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<RobotAction> {
        Err(Error::Runtime("the GA scheduler plans whole chains and never bids".into()))
    }
}
