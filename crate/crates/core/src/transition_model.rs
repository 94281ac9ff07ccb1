//! Empirical state-transition graph built from sampled transitions, plus the
//! plain value-iteration solver that serves as the reference for everything
//! the highway graph computes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Canonical 64-bit identity of an environment state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub u64);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Index into an environment's discrete action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub from: StateId,
    pub action: ActionId,
    pub next: StateId,
    pub reward: f64,
}

impl TransitionSample {
    pub fn new(from: StateId, action: ActionId, next: StateId, reward: f64) -> Self {
        Self {
            from,
            action,
            next,
            reward,
        }
    }
}

/// One episode worth of consecutive samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TransitionSample>,
    /// The episode ended in a terminal state rather than being truncated.
    pub terminal: bool,
    pub episode_seed: u64,
}

impl Trajectory {
    pub fn new(samples: Vec<TransitionSample>, terminal: bool, episode_seed: u64) -> Result<Self> {
        let traj = Self {
            samples,
            terminal,
            episode_seed,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidTrajectory("trajectory has no samples".into()));
        }
        for (k, pair) in self.samples.windows(2).enumerate() {
            if pair[0].next != pair[1].from {
                return Err(Error::InvalidTrajectory(format!(
                    "sample {} ends in {} but sample {} starts in {}",
                    k,
                    pair[0].next,
                    k + 1,
                    pair[1].from
                )));
            }
        }
        if let Some(bad) = self.samples.iter().position(|s| !s.reward.is_finite()) {
            return Err(Error::InvalidTrajectory(format!(
                "sample {bad} has a non-finite reward"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// States visited in order: `s_0, s_1, ..., s_T` (one more than the sample count).
    pub fn states(&self) -> Vec<StateId> {
        let mut out = Vec::with_capacity(self.samples.len() + 1);
        if let Some(first) = self.samples.first() {
            out.push(first.from);
        }
        out.extend(self.samples.iter().map(|s| s.next));
        out
    }

    pub fn total_reward(&self) -> f64 {
        self.samples.iter().map(|s| s.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for s in &self.samples {
            total += discount * s.reward;
            discount *= gamma;
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub next: StateId,
    pub reward: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalGraph {
    nodes: BTreeSet<StateId>,
    edges: BTreeMap<(StateId, ActionId), EdgeRecord>,
    gamma: f64,
}

impl EmpiricalGraph {
    pub fn new(gamma: f64) -> Self {
        assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
        Self {
            nodes: BTreeSet::new(),
            edges: BTreeMap::new(),
            gamma,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nodes(&self) -> &BTreeSet<StateId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<(StateId, ActionId), EdgeRecord> {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge(&self, from: StateId, action: ActionId) -> Option<&EdgeRecord> {
        self.edges.get(&(from, action))
    }

    pub fn add_node(&mut self, s: StateId) {
        self.nodes.insert(s);
    }

    /// Records a single sample, rejecting any outcome that disagrees with an
    /// earlier sample of the same `(from, action)` pair.
    pub fn record_sample(&mut self, sample: &TransitionSample) -> Result<()> {
        check_sample(
            self.edge(sample.from, sample.action)
                .map(|e| (e.next, e.reward)),
            sample,
        )?;
        self.nodes.insert(sample.from);
        self.nodes.insert(sample.next);
        self.edges
            .entry((sample.from, sample.action))
            .and_modify(|e| e.count += 1)
            .or_insert(EdgeRecord {
                next: sample.next,
                reward: sample.reward,
                count: 1,
            });
        Ok(())
    }

    /// Adds every state and edge of `traj`. On a determinism violation the
    /// graph is left untouched.
    pub fn record_trajectory(&mut self, traj: &Trajectory) -> Result<()> {
        traj.validate()?;
        let mut staged: BTreeMap<(StateId, ActionId), (StateId, f64)> = BTreeMap::new();
        for s in &traj.samples {
            let known = self
                .edge(s.from, s.action)
                .map(|e| (e.next, e.reward))
                .or_else(|| staged.get(&(s.from, s.action)).copied());
            check_sample(known, s)?;
            staged.insert((s.from, s.action), (s.next, s.reward));
        }
        for s in &traj.samples {
            self.record_sample(s)?;
        }
        Ok(())
    }

    /// `1.0` when `(from, action)` was sampled and led to `next`, otherwise `0.0`.
    pub fn empirical_transition(&self, next: StateId, action: ActionId, from: StateId) -> f64 {
        match self.edge(from, action) {
            Some(e) if e.next == next => 1.0,
            _ => 0.0,
        }
    }

    /// Stored reward of a sampled pair, `0.0` for unsampled pairs.
    pub fn empirical_reward(&self, from: StateId, action: ActionId) -> f64 {
        self.edge(from, action).map_or(0.0, |e| e.reward)
    }

    pub fn out_degree(&self, s: StateId) -> usize {
        self.edges
            .range((s, ActionId(0))..=(s, ActionId(u8::MAX)))
            .count()
    }

    /// Number of sampled `(from, action)` edges entering each state.
    pub fn in_degrees(&self) -> BTreeMap<StateId, usize> {
        let mut deg = BTreeMap::new();
        for e in self.edges.values() {
            *deg.entry(e.next).or_insert(0) += 1;
        }
        deg
    }

    pub fn compile(&self) -> CompiledGraph {
        CompiledGraph::from_graph(self)
    }

    /// Synchronous value iteration over the sampled edges. States without
    /// outgoing edges keep a value of zero.
    pub fn vanilla_value_iteration(&self, max_iter: usize, delta: f64) -> VanillaValues {
        let compiled = self.compile();
        let run = compiled.solve(max_iter, delta);
        VanillaValues {
            values: compiled.states.iter().copied().zip(run.values).collect(),
            sweeps: run.sweeps,
            final_delta: run.final_delta,
            converged: run.converged,
        }
    }
}

fn check_sample(known: Option<(StateId, f64)>, s: &TransitionSample) -> Result<()> {
    match known {
        Some((next, reward)) if next != s.next || reward != s.reward => {
            Err(Error::DeterminismViolation {
                state: s.from,
                action: s.action,
                recorded_next: next,
                recorded_reward: reward,
                observed_next: s.next,
                observed_reward: s.reward,
            })
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaValues {
    pub values: BTreeMap<StateId, f64>,
    pub sweeps: usize,
    pub final_delta: f64,
    pub converged: bool,
}

/// Index-based adjacency of an [`EmpiricalGraph`] used by the solver and the
/// benchmarks.
#[derive(Clone, Debug)]
pub struct CompiledGraph {
    pub states: Vec<StateId>,
    /// CSR offsets: edges of state `i` are `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug)]
pub struct SolveRun {
    pub values: Vec<f64>,
    pub sweeps: usize,
    pub final_delta: f64,
    pub converged: bool,
}

impl CompiledGraph {
    pub fn from_graph(g: &EmpiricalGraph) -> Self {
        let states: Vec<StateId> = g.nodes.iter().copied().collect();
        let index: std::collections::HashMap<StateId, usize> =
            states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut offsets = Vec::with_capacity(states.len() + 1);
        let mut targets = Vec::with_capacity(g.edges.len());
        let mut rewards = Vec::with_capacity(g.edges.len());
        offsets.push(0);
        let mut edges = g.edges.iter().peekable();
        for s in &states {
            while let Some(((from, _), e)) = edges.peek() {
                if from != s {
                    break;
                }
                targets.push(index[&e.next]);
                rewards.push(e.reward);
                edges.next();
            }
            offsets.push(targets.len());
        }
        Self {
            states,
            offsets,
            targets,
            rewards,
            gamma: g.gamma,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    /// One Jacobi sweep; returns the max-norm change.
    pub fn sweep(&self, prev: &[f64], next: &mut [f64]) -> f64 {
        let mut change: f64 = 0.0;
        for i in 0..self.states.len() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            let v = if lo == hi {
                0.0
            } else {
                let mut best = f64::NEG_INFINITY;
                for e in lo..hi {
                    let q = self.rewards[e] + self.gamma * prev[self.targets[e]];
                    if q > best {
                        best = q;
                    }
                }
                best
            };
            change = change.max((v - prev[i]).abs());
            next[i] = v;
        }
        change
    }

    pub fn solve(&self, max_iter: usize, delta: f64) -> SolveRun {
        self.solve_from(vec![0.0; self.states.len()], max_iter, delta)
    }

    pub fn solve_from(&self, init: Vec<f64>, max_iter: usize, delta: f64) -> SolveRun {
        let mut prev = init;
        let mut next = vec![0.0; prev.len()];
        let mut final_delta = f64::INFINITY;
        let mut sweeps = 0;
        while sweeps < max_iter {
            final_delta = self.sweep(&prev, &mut next);
            std::mem::swap(&mut prev, &mut next);
            sweeps += 1;
            if final_delta < delta {
                break;
            }
        }
        SolveRun {
            values: prev,
            sweeps,
            final_delta,
            converged: final_delta < delta,
        }
    }
}
