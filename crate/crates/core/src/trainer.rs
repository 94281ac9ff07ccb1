//! Actor-learner training loop.
//!
//! Each update, a fixed number of episodes is spread over the actors, each
//! with its own exploration rate from the epsilon ladder. The learner folds
//! the collected trajectories into the highway graph, re-solves the values
//! and publishes a new policy snapshot.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::splitmix64;
use crate::env::{EnvKind, EnvSpec, Environment, Obs};
use crate::error::{Error, Result};
use crate::highway_graph::HighwayGraph;
use crate::policy::{epsilon_ladder, PolicySnapshot};
use crate::transition_model::{StateId, Trajectory, TransitionSample, DEFAULT_DELTA};
use crate::value_iteration::{default_max_iter, value_update_loop_from, ValueTables};

pub const DEFAULT_PATIENCE: usize = 3;
pub const DEFAULT_GAMMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub actors: usize,
    /// Episodes collected per update, over all actors together.
    pub episodes_per_update: usize,
    pub frame_budget: u64,
    pub gamma: f64,
    pub delta: f64,
    /// Sweep cap per solve; `None` means ten sweeps per intersection.
    pub max_iter: Option<usize>,
    pub convergence_patience: usize,
    pub run_seed: u64,
    /// Episode length cap; `None` uses the environment default.
    pub max_episode_steps: Option<usize>,
    /// Greedy evaluation episodes recorded in each metrics row.
    pub eval_episodes: usize,
    pub stop_on_convergence: bool,
}

impl TrainConfig {
    pub fn new(env: EnvSpec) -> Self {
        let toy_text = matches!(env.kind, EnvKind::CliffWalking | EnvKind::Taxi);
        Self {
            env,
            actors: 4,
            episodes_per_update: if toy_text { 20 } else { 10 },
            frame_budget: 1_000_000,
            gamma: DEFAULT_GAMMA,
            delta: DEFAULT_DELTA,
            max_iter: None,
            convergence_patience: DEFAULT_PATIENCE,
            run_seed: 0,
            max_episode_steps: None,
            eval_episodes: if matches!(env.kind, EnvKind::Taxi) {
                20
            } else {
                1
            },
            stop_on_convergence: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.actors == 0 {
            return Err(Error::Config("actors must be at least 1".into()));
        }
        if self.episodes_per_update == 0 {
            return Err(Error::Config(
                "episodes_per_update must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} is outside [0, 1)",
                self.gamma
            )));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::Config(format!(
                "delta {} must be non-negative",
                self.delta
            )));
        }
        if self.max_iter == Some(0) {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if self.max_episode_steps == Some(0) {
            return Err(Error::Config("max_episode_steps must be at least 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: usize,
    pub frames_so_far: u64,
    pub wall_ms: f64,
    pub expected_discounted_return: f64,
    pub total_reward: f64,
    pub intersections: usize,
    pub highways: usize,
    pub z: f64,
    pub vi_sweeps: usize,
    pub topology_changed: bool,
    pub policy_changed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub converged_at_update: Option<usize>,
    /// Updates from the last topology change up to and including convergence.
    pub learning_iterations: Option<usize>,
    pub frames_at_convergence: Option<u64>,
}

impl RunMetrics {
    fn refresh_convergence(&mut self, patience: usize) {
        self.converged_at_update = detect_convergence(&self.rows, patience);
        self.learning_iterations = self
            .converged_at_update
            .map(|c| learning_iterations(&self.rows, c));
        self.frames_at_convergence = self.converged_at_update.map(|c| self.rows[c].frames_so_far);
    }
}

/// First update `c` followed by `patience` updates that changed neither the
/// graph topology nor any greedy action.
pub fn detect_convergence(rows: &[MetricsRow], patience: usize) -> Option<usize> {
    (0..rows.len()).find(|&c| {
        c + patience < rows.len()
            && rows[c + 1..=c + patience]
                .iter()
                .all(|r| !r.topology_changed && !r.policy_changed)
    })
}

fn learning_iterations(rows: &[MetricsRow], converged: usize) -> usize {
    let last_change = (0..=converged)
        .rev()
        .find(|&i| rows[i].topology_changed)
        .unwrap_or(0);
    converged - last_change + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub start_seed: u64,
    pub total_reward: f64,
    pub discounted_return: f64,
    pub steps: usize,
    pub reached_terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_total_reward: f64,
    pub mean_discounted_return: f64,
    pub episodes: Vec<EpisodeResult>,
}

/// Start seeds used for `n` evaluation episodes: the environment's own seed
/// repeated for fixed-start environments, consecutive seeds otherwise.
pub fn eval_start_seeds(env: &Environment, n: usize) -> Vec<u64> {
    let base = env.spec().seed;
    if env.has_random_starts() {
        (0..n as u64).map(|i| base.wrapping_add(i)).collect()
    } else {
        vec![base; n]
    }
}

/// Greedy rollouts. Unknown states draw from the snapshot generator keyed by
/// the episode's start seed, so repeated evaluations agree exactly.
pub fn evaluate(
    snapshot: &PolicySnapshot,
    env: &Environment,
    start_seeds: &[u64],
    gamma: f64,
    max_steps: usize,
) -> Result<EvalResult> {
    let mut episodes = Vec::with_capacity(start_seeds.len());
    for (k, &seed) in start_seeds.iter().enumerate() {
        let mut rng = snapshot.rng(splitmix64(seed) ^ k as u64);
        let mut obs = env.reset_with_seed(seed);
        let (mut total, mut discounted, mut discount) = (0.0, 0.0, 1.0);
        let mut steps = 0;
        let mut done = env.is_terminal(&obs);
        while !done && steps < max_steps {
            let a = snapshot.select_action(obs.state_id(), &mut rng);
            let r = env.step(&obs, a)?;
            total += r.reward;
            discounted += discount * r.reward;
            discount *= gamma;
            obs = r.next_obs;
            done = r.done;
            steps += 1;
        }
        episodes.push(EpisodeResult {
            start_seed: seed,
            total_reward: total,
            discounted_return: discounted,
            steps,
            reached_terminal: done,
        });
    }
    let n = episodes.len().max(1) as f64;
    Ok(EvalResult {
        mean_total_reward: episodes.iter().map(|e| e.total_reward).sum::<f64>() / n,
        mean_discounted_return: episodes.iter().map(|e| e.discounted_return).sum::<f64>() / n,
        episodes,
    })
}

pub fn episode_seed(run_seed: u64, actor: usize, episode_index: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64((actor as u64) ^ splitmix64(episode_index)))
}

struct Episode {
    trajectory: Trajectory,
    observations: Vec<Obs>,
}

fn run_episode(
    snapshot: &PolicySnapshot,
    env: &Environment,
    epsilon: f64,
    seed: u64,
    max_steps: usize,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset_with_seed(if env.has_random_starts() {
        seed
    } else {
        env.spec().seed
    });
    let mut observations = vec![obs];
    let mut samples = Vec::new();
    let mut done = false;
    while !done && samples.len() < max_steps {
        let from = obs.state_id();
        let a = snapshot.epsilon_greedy(from, epsilon, &mut rng);
        let r = env.step(&obs, a)?;
        samples.push(TransitionSample::new(
            from,
            a,
            r.next_obs.state_id(),
            r.reward,
        ));
        observations.push(r.next_obs);
        obs = r.next_obs;
        done = r.done;
    }
    Ok(Episode {
        trajectory: Trajectory::new(samples, done, seed)?,
        observations,
    })
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    pub graph: HighwayGraph,
    pub tables: ValueTables,
    /// Observation behind every state id the run has seen.
    pub observations: BTreeMap<StateId, Obs>,
}

impl TrainOutcome {
    pub fn snapshot(&self) -> Result<PolicySnapshot> {
        PolicySnapshot::new(
            Arc::new(self.graph.clone()),
            Arc::new(self.tables.clone()),
            self.config.env.action_count(),
            self.config.run_seed,
        )
    }

    pub fn frames(&self) -> u64 {
        self.metrics.rows.last().map_or(0, |r| r.frames_so_far)
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let env = config.env.build()?;
    let action_count = env.action_count();
    let max_steps = config
        .max_episode_steps
        .unwrap_or_else(|| env.default_max_steps());
    let eval_seeds = eval_start_seeds(&env, config.eval_episodes);
    let started = Instant::now();

    let mut graph = HighwayGraph::new(config.gamma);
    let mut tables = value_update_loop_from(&graph, 1, config.delta, &BTreeMap::new());
    let mut snapshot = PolicySnapshot::new(
        Arc::new(graph.clone()),
        Arc::new(tables.clone()),
        action_count,
        config.run_seed,
    )?;
    let mut greedy = snapshot.greedy_table();
    let mut observations = BTreeMap::new();
    let mut metrics = RunMetrics::default();
    let mut frames = 0u64;
    let mut update = 0usize;

    while frames < config.frame_budget {
        let first = (update * config.episodes_per_update) as u64;
        let episodes: Vec<Result<Episode>> = (0..config.episodes_per_update)
            .into_par_iter()
            .map(|e| {
                let actor = e % config.actors;
                let seed = episode_seed(config.run_seed, actor, first + e as u64);
                run_episode(
                    &snapshot,
                    &env,
                    epsilon_ladder(actor, config.actors),
                    seed,
                    max_steps,
                )
            })
            .collect();

        let revision = graph.revision();
        for ep in episodes {
            let ep = ep?;
            frames += ep.trajectory.len() as u64;
            graph.assemble_one(&ep.trajectory)?;
            for o in ep.observations {
                observations.entry(o.state_id()).or_insert(o);
            }
        }
        let topology_changed = graph.revision() != revision;

        let max_iter = config.max_iter.unwrap_or_else(|| default_max_iter(&graph));
        tables = value_update_loop_from(&graph, max_iter, config.delta, &tables.v);
        snapshot = PolicySnapshot::new(
            Arc::new(graph.clone()),
            Arc::new(tables.clone()),
            action_count,
            splitmix64(config.run_seed ^ update as u64),
        )?;
        let new_greedy = snapshot.greedy_table();
        let policy_changed = new_greedy != greedy;
        greedy = new_greedy;

        let eval = evaluate(&snapshot, &env, &eval_seeds, config.gamma, max_steps)?;
        let stats = graph.graph_stats();
        metrics.rows.push(MetricsRow {
            update,
            frames_so_far: frames,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            expected_discounted_return: eval.mean_discounted_return,
            total_reward: eval.mean_total_reward,
            intersections: stats.intersections,
            highways: stats.highways,
            z: stats.z,
            vi_sweeps: tables.iterations_run,
            topology_changed,
            policy_changed,
        });
        metrics.refresh_convergence(config.convergence_patience);
        update += 1;
        if config.stop_on_convergence && metrics.converged_at_update.is_some() {
            break;
        }
    }

    Ok(TrainOutcome {
        config: config.clone(),
        metrics,
        graph,
        tables,
        observations,
    })
}

/// Builds a graph from recorded transitions instead of a live environment.
/// Each trajectory is assembled in order; the first conflicting outcome for a
/// `(state, action)` pair aborts with a determinism violation.
pub fn replay(
    trajectories: &[Trajectory],
    gamma: f64,
    delta: f64,
) -> Result<(HighwayGraph, ValueTables)> {
    let mut graph = HighwayGraph::new(gamma);
    graph.assemble(trajectories)?;
    let tables = value_update_loop_from(
        &graph,
        default_max_iter(&graph).max(10_000),
        delta,
        &BTreeMap::new(),
    );
    Ok((graph, tables))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(update: usize, topology_changed: bool, policy_changed: bool) -> MetricsRow {
        MetricsRow {
            update,
            frames_so_far: 10 * (update as u64 + 1),
            wall_ms: 0.0,
            expected_discounted_return: 0.0,
            total_reward: 0.0,
            intersections: 0,
            highways: 0,
            z: 0.0,
            vi_sweeps: 0,
            topology_changed,
            policy_changed,
        }
    }

    #[test]
    fn convergence_after_quiet_updates() {
        let rows: Vec<_> = [
            (true, true),
            (true, false),
            (false, false),
            (false, false),
            (false, false),
        ]
        .iter()
        .enumerate()
        .map(|(i, (t, p))| row(i, *t, *p))
        .collect();
        assert_eq!(detect_convergence(&rows, 3), Some(1));
        assert_eq!(learning_iterations(&rows, 1), 1);
        assert_eq!(detect_convergence(&rows[..4], 3), None);
    }

    #[test]
    fn growing_graph_never_converges() {
        let rows: Vec<_> = (0..10).map(|i| row(i, true, false)).collect();
        assert_eq!(detect_convergence(&rows, 3), None);
    }

    #[test]
    fn late_policy_change_counts_extra_iterations() {
        let flags = [
            (true, true),
            (false, true),
            (false, true),
            (false, false),
            (false, false),
            (false, false),
        ];
        let rows: Vec<_> = flags
            .iter()
            .enumerate()
            .map(|(i, (t, p))| row(i, *t, *p))
            .collect();
        assert_eq!(detect_convergence(&rows, 3), Some(2));
        assert_eq!(learning_iterations(&rows, 2), 3);
    }

    #[test]
    fn zero_budget_is_a_cold_start() {
        let mut cfg = TrainConfig::new(EnvSpec::cliff_walking());
        cfg.frame_budget = 0;
        let out = train(&cfg).unwrap();
        assert!(out.graph.is_empty());
        assert!(out.metrics.rows.is_empty());
        let snap = out.snapshot().unwrap();
        assert_eq!(
            snap.known_action(EnvSpec::cliff_walking().build().unwrap().reset().state_id()),
            None
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = TrainConfig::new(EnvSpec::maze(3, 3, 0));
        cfg.actors = 0;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
        let mut cfg = TrainConfig::new(EnvSpec::maze(3, 3, 0));
        cfg.gamma = 1.0;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn maze_run_is_reproducible_and_accounts_frames() {
        let mut cfg = TrainConfig::new(EnvSpec::maze(5, 5, 3));
        cfg.run_seed = 11;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let strip = |m: &RunMetrics| -> Vec<MetricsRow> {
            m.rows
                .iter()
                .cloned()
                .map(|mut r| {
                    r.wall_ms = 0.0;
                    r
                })
                .collect()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.graph.highways(), b.graph.highways());
        assert_eq!(a.tables, b.tables);
        assert!(a
            .metrics
            .rows
            .windows(2)
            .all(|w| w[0].frames_so_far < w[1].frames_so_far));
        let expanded = a.graph.expand_to_empirical();
        let total_samples: u64 = expanded.edges().values().map(|e| e.count).sum();
        // every distinct transition is counted once in the expanded graph
        assert!(total_samples <= a.frames());
        assert!(a.metrics.converged_at_update.is_some());
        a.graph.check_invariants().unwrap();
    }

    #[test]
    fn maze_return_never_drops_once_goal_is_known() {
        for seed in 0..4 {
            let mut cfg = TrainConfig::new(EnvSpec::maze(5, 5, seed));
            cfg.frame_budget = 30_000;
            cfg.stop_on_convergence = false;
            let rows = train(&cfg).unwrap().metrics.rows;
            let first = rows
                .iter()
                .position(|r| r.expected_discounted_return > 0.0)
                .unwrap();
            for w in rows[first..].windows(2) {
                assert!(
                    w[1].expected_discounted_return >= w[0].expected_discounted_return - 1e-12,
                    "seed {seed}: {} then {}",
                    w[0].expected_discounted_return,
                    w[1].expected_discounted_return
                );
            }
        }
    }

    #[test]
    fn single_actor_uses_lowest_epsilon() {
        let mut cfg = TrainConfig::new(EnvSpec::maze(3, 3, 1));
        cfg.actors = 1;
        let out = train(&cfg).unwrap();
        assert!(!out.metrics.rows.is_empty());
    }

    #[test]
    fn greedy_evaluation_is_deterministic() {
        let mut cfg = TrainConfig::new(EnvSpec::cliff_walking());
        cfg.frame_budget = 2_000;
        cfg.stop_on_convergence = false;
        let out = train(&cfg).unwrap();
        let env = cfg.env.build().unwrap();
        let snap = out.snapshot().unwrap();
        let seeds = eval_start_seeds(&env, 3);
        assert_eq!(
            evaluate(&snap, &env, &seeds, 0.99, 500).unwrap(),
            evaluate(&snap, &env, &seeds, 0.99, 500).unwrap()
        );
    }

    #[test]
    fn untrained_cliff_policy_scores_badly() {
        let env = EnvSpec::cliff_walking().build().unwrap();
        let snap = PolicySnapshot::empty(0.99, 4, 0).unwrap();
        let r = evaluate(&snap, &env, &[0], 0.99, 500).unwrap();
        assert!(r.mean_total_reward < -100.0);
    }

    #[test]
    fn replay_rejects_stochastic_stream() {
        let s = |i| StateId(i);
        let a = crate::transition_model::ActionId(0);
        let t1 = Trajectory::new(vec![TransitionSample::new(s(0), a, s(1), 0.0)], true, 0).unwrap();
        let t2 = Trajectory::new(vec![TransitionSample::new(s(0), a, s(2), 0.0)], true, 1).unwrap();
        assert!(matches!(
            replay(&[t1, t2], 0.99, 1e-6),
            Err(Error::DeterminismViolation { .. })
        ));
    }
}
