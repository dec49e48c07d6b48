//! Command line driver and the experiment entry points it wraps.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{GaScheduler, HeuristicScheduler, LocalScheduler, PolicyScheduler};
use crate::config::ScenarioConfig;
use crate::domain::{read_jsonl, write_jsonl, TransitionRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{aggregate, build_report, emit_report, AggregateReport, ChainRecord, RunReport};
use crate::nn::Checkpoint;
use crate::sim::{Scheduler, World};
use crate::training::{dataset_prepare, parse_phases, policy_mask_init, three_phase_train, CurveRow, TrainOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    /// Every stage on its host.
    Baseline,
    /// Heuristic per-stage auction.
    Auction,
    /// Genetic planner per chain.
    Ga,
    /// Learned bidding policy.
    Rl,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Baseline => "baseline",
            SchedulerKind::Auction => "auction",
            SchedulerKind::Ga => "ga",
            SchedulerKind::Rl => "rl",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fleetsched", version, about = "Multi-robot staged-inference scheduling simulator and trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log heuristic-auction transitions for offline training.
    Collect {
        /// Scenario TOML file or built-in template name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds (defaults to the scenario's collect horizon).
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value = "runs/collect")]
        out: PathBuf,
    },
    /// Run training phases A (imitation), B (critic + AWR) and C (PPO).
    Train {
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "A,B,C")]
        phases: String,
        /// Transitions file written by `collect`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Starting checkpoint when resuming at B or C.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate one scheduler over several seeds.
    Evaluate {
        #[arg(long)]
        config: String,
        #[arg(long, value_enum)]
        scheduler: SchedulerKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated seeds (defaults to the scenario's list).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Write a built-in scenario template as TOML.
    Scenario {
        /// default3, executor4, failure2 or extratask.
        #[arg(long)]
        template: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Load a scenario from a TOML path, falling back to a template name.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return ScenarioConfig::load(path);
    }
    if ScenarioConfig::TEMPLATES.contains(&spec) {
        return ScenarioConfig::template(spec);
    }
    Err(Error::Config(format!("no scenario file or template named '{spec}'")))
}

/// Heuristic-auction rollout with transition logging.
pub fn collect(cfg: &ScenarioConfig, seed: u64, horizon_s: f64) -> Result<(Vec<TransitionRecord>, World)> {
    let mut world = World::new(cfg, seed, horizon_s)?;
    world.set_record_transitions(true);
    let mut sched = HeuristicScheduler::new(cfg.auction.coefficients.clone(), cfg.auction.bounds)
        .with_noise(cfg.collect.bid_noise_sd, cfg.collect.degraded_fraction);
    world.run(&mut sched)?;
    world.finish();
    Ok((world.take_records(), world))
}

/// Build the scheduler for `kind`. For the learned policy, roster slots
/// beyond the checkpoint's get a donor identity; the returned pairs are
/// `(slot, donor)` aliases to install on the world.
pub fn make_scheduler(
    kind: SchedulerKind,
    cfg: &ScenarioConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<(Box<dyn Scheduler>, Vec<(usize, usize)>)> {
    Ok(match kind {
        SchedulerKind::Baseline => (Box::new(LocalScheduler), vec![]),
        SchedulerKind::Auction => {
            (Box::new(HeuristicScheduler::new(cfg.auction.coefficients.clone(), cfg.auction.bounds)), vec![])
        }
        SchedulerKind::Ga => (Box::new(GaScheduler::new(cfg.ga.clone(), cfg.sim.planning_delay_ms)), vec![]),
        SchedulerKind::Rl => {
            let ck = checkpoint.ok_or_else(|| Error::MissingArtifact("the rl scheduler needs --checkpoint".into()))?;
            if ck.max_robots != cfg.max_robots {
                return Err(Error::Config(format!(
                    "checkpoint has {} policy slots, scenario expects {}",
                    ck.max_robots, cfg.max_robots
                )));
            }
            if ck.config_hash != cfg.hash() {
                log::info!("checkpoint was trained on a different scenario ({})", &ck.config_hash[..12.min(ck.config_hash.len())]);
            }
            let mut ck = ck.clone();
            while ck.slot_throughput.len() < cfg.roster.len() {
                let slot = ck.slot_throughput.len();
                let (next, donor) = policy_mask_init(&ck, cfg.roster[slot].profile.compute_throughput)?;
                log::info!("slot {slot} ({}) borrows the identity of slot {donor}", cfg.roster[slot].profile.name);
                ck = next;
            }
            let aliases = ck.embed_alias.iter().copied().enumerate().filter(|(s, d)| s != d).collect();
            (Box::new(PolicyScheduler::new(ck.actor()?, false)), aliases)
        }
    })
}

/// One evaluation episode.
pub fn evaluate_once(
    kind: SchedulerKind,
    cfg: &ScenarioConfig,
    checkpoint: Option<&Checkpoint>,
    seed: u64,
    horizon_s: f64,
) -> Result<(RunReport, Vec<ChainRecord>)> {
    let (mut sched, aliases) = make_scheduler(kind, cfg, checkpoint)?;
    let mut world = World::new(cfg, seed, horizon_s)?;
    world.set_record_transitions(false);
    for (slot, donor) in aliases {
        world.set_embed_alias(slot, donor);
    }
    world.run(sched.as_mut())?;
    world.finish();
    let report = build_report(&world, kind.name(), seed)?;
    Ok((report, world.chain_log.clone()))
}

/// Seeds are evaluated independently, so they fan out over the pool.
pub fn evaluate(
    kind: SchedulerKind,
    cfg: &ScenarioConfig,
    checkpoint: Option<&Checkpoint>,
    seeds: &[u64],
    horizon_s: f64,
    exec: Exec,
) -> Result<Vec<(RunReport, Vec<ChainRecord>)>> {
    exec.map(seeds, |&s| evaluate_once(kind, cfg, checkpoint, s, horizon_s)).into_iter().collect()
}

pub fn write_curves(path: &Path, rows: &[CurveRow], n_robots: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> =
        ["phase", "update_step", "actor_loss", "critic_loss", "mean_reward", "metric", "lambda_d"].map(String::from).into();
    header.extend((0..n_robots).map(|i| format!("lambda_e_{i}")));
    header.extend((0..n_robots).map(|i| format!("reward_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.phase.to_string(),
            r.update_step.to_string(),
            format!("{:.6}", r.actor_loss),
            format!("{:.6}", r.critic_loss),
            format!("{:.6}", r.mean_reward),
            format!("{:.6}", r.metric),
            format!("{:.6}", r.lambda_d),
        ];
        rec.extend((0..n_robots).map(|i| r.lambda_e.get(i).map_or_else(String::new, |v| format!("{v:.6}"))));
        rec.extend((0..n_robots).map(|i| r.robot_reward.get(i).map_or_else(String::new, |v| format!("{v:.6}"))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    scenario: &'a str,
    config_hash: String,
    seed: u64,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    records: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase_a_agreement: Option<f64>,
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = Exec::auto();
    match cli.command {
        Command::Collect { config, seed, horizon, out } => {
            let cfg = load_scenario(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            let horizon = horizon.unwrap_or(cfg.collect.horizon_s);
            let (records, _) = collect(&cfg, seed, horizon)?;
            std::fs::create_dir_all(&out)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("transitions.jsonl"))?);
            write_jsonl(&mut f, &records)?;
            std::io::Write::flush(&mut f)?;
            write_meta(
                &out,
                &RunMeta {
                    command: "collect",
                    scenario: &cfg.name,
                    config_hash: cfg.hash(),
                    seed,
                    version: env!("CARGO_PKG_VERSION"),
                    records: Some(records.len()),
                    phase_a_agreement: None,
                },
            )?;
            println!("collected {} transitions -> {}", records.len(), out.join("transitions.jsonl").display());
        }
        Command::Train { config, phases, dataset, checkpoint, seed, out } => {
            let mut cfg = load_scenario(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let phases = parse_phases(&phases)?;
            let ds = match &dataset {
                Some(p) => {
                    let f = std::fs::File::open(p)
                        .map_err(|e| Error::MissingArtifact(format!("dataset {}: {e}", p.display())))?;
                    let recs: Vec<TransitionRecord> = read_jsonl(std::io::BufReader::new(f))?;
                    Some(dataset_prepare(recs, cfg.max_robots, &cfg.auction.bounds)?)
                }
                None => None,
            };
            let init = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let TrainOutputs { checkpoints, curves, phase_a_agreement } =
                three_phase_train(&cfg, ds.as_ref(), init.as_ref(), &phases, exec)?;
            std::fs::create_dir_all(&out)?;
            for (phase, ck) in &checkpoints {
                ck.save(&out.join(format!("policy_{phase}.json")))?;
            }
            if let Some((_, last)) = checkpoints.last() {
                last.save(&out.join("policy.json"))?;
            }
            write_curves(&out.join("curves.csv"), &curves, cfg.roster.len())?;
            write_meta(
                &out,
                &RunMeta {
                    command: "train",
                    scenario: &cfg.name,
                    config_hash: cfg.hash(),
                    seed: cfg.seed,
                    version: env!("CARGO_PKG_VERSION"),
                    records: ds.as_ref().map(|d| d.record_count()),
                    phase_a_agreement,
                },
            )?;
            if let Some(a) = phase_a_agreement {
                println!("phase A held-out agreement: {:.3}", a);
            }
            println!("checkpoint -> {}", out.join("policy.json").display());
        }
        Command::Evaluate { config, scheduler, checkpoint, seeds, horizon, out } => {
            let cfg = load_scenario(&config)?;
            let seeds = seeds.unwrap_or_else(|| cfg.evaluation.seeds.clone());
            if seeds.is_empty() {
                return Err(Error::Config("no evaluation seeds".into()));
            }
            let horizon = horizon.unwrap_or(cfg.evaluation.horizon_s);
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let runs = evaluate(scheduler, &cfg, ck.as_ref(), &seeds, horizon, exec)?;
            std::fs::create_dir_all(&out)?;
            for (report, chains) in &runs {
                emit_report(&out, &format!("{}_seed{}", scheduler.name(), report.seed), report, chains)?;
            }
            let reports: Vec<RunReport> = runs.into_iter().map(|(r, _)| r).collect();
            let agg: AggregateReport = aggregate(&reports)?;
            std::fs::write(out.join(format!("{}_summary.json", scheduler.name())), serde_json::to_string_pretty(&agg)?)?;
            println!(
                "{} on {}: success {:.3} ± {:.3}, reward {:.3}, offload {:.3}, energy {:.2} Wh over {} seeds",
                scheduler.name(),
                cfg.name,
                agg.success_rate.mean,
                agg.success_rate.sd,
                agg.mean_reward.mean,
                agg.offload_rate.mean,
                agg.energy_wh.mean,
                seeds.len()
            );
        }
        Command::Scenario { template, out } => {
            let cfg = ScenarioConfig::template(&template)?;
            let text = cfg.to_toml()?;
            match out {
                Some(p) => std::fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
