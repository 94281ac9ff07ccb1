//! Value iteration on the highway graph.
//!
//! Only intersections carry a value; each highway contributes one Q entry
//! `gamma^L * V(to) + R_h`. Sweeps are synchronous: every update reads the
//! previous sweep's V.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::highway_graph::{HighwayGraph, HighwayId};
use crate::transition_model::{ActionId, CompiledGraph, EmpiricalGraph, StateId};

/// Intersections per sweep above which the sweep is spread over threads.
const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub v: BTreeMap<StateId, f64>,
    pub q: BTreeMap<(StateId, ActionId), f64>,
    pub iterations_run: usize,
    pub final_delta: f64,
    pub converged: bool,
    /// Revision of the graph these tables were computed on.
    pub graph_revision: u64,
}

impl ValueTables {
    pub fn value(&self, s: StateId) -> Option<f64> {
        self.v.get(&s).copied()
    }
}

pub fn default_max_iter(graph: &HighwayGraph) -> usize {
    10 * graph.intersections().len().max(1)
}

/// Index form of a highway graph: intersections in id order, highways in CSR
/// layout grouped by source and sorted by first action.
#[derive(Clone, Debug)]
pub struct HighwayProgram {
    pub states: Vec<StateId>,
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub discounts: Vec<f64>,
    pub rewards: Vec<f64>,
    pub actions: Vec<ActionId>,
    pub lengths: Vec<usize>,
    pub highway_ids: Vec<HighwayId>,
    /// Sum of the discounts of all highways entering each intersection.
    pub in_weights: Vec<f64>,
}

impl HighwayProgram {
    pub fn new(graph: &HighwayGraph) -> Self {
        let states: Vec<StateId> = graph.intersections().iter().copied().collect();
        let index: HashMap<StateId, usize> =
            states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let gamma = graph.gamma();
        let mut p = Self {
            offsets: vec![0],
            targets: Vec::new(),
            discounts: Vec::new(),
            rewards: Vec::new(),
            actions: Vec::new(),
            lengths: Vec::new(),
            highway_ids: Vec::new(),
            in_weights: vec![0.0; states.len()],
            states,
        };
        for s in &p.states {
            for (a, h) in graph.outgoing(*s) {
                let target = index[&h.to];
                p.targets.push(target);
                p.discounts.push(h.discount(gamma));
                p.in_weights[target] += h.discount(gamma);
                p.rewards.push(h.cached_reward);
                p.actions.push(a);
                p.lengths.push(h.length());
                p.highway_ids.push(h.id);
            }
            p.offsets.push(p.targets.len());
        }
        p
    }

    pub fn highway_count(&self) -> usize {
        self.targets.len()
    }

    /// Single-step transitions covered by one full sweep.
    pub fn expanded_ops_per_sweep(&self) -> u64 {
        self.lengths.iter().map(|l| *l as u64).sum()
    }

    fn best_value(&self, i: usize, v_prev: &[f64]) -> f64 {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        if lo == hi {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for e in lo..hi {
            let q = self.discounts[e] * v_prev[self.targets[e]] + self.rewards[e];
            if q > best {
                best = q;
            }
        }
        best
    }

    /// V half of one synchronous sweep: `v_next(s) = max_h gamma^L v_prev(to) + R_h`.
    pub fn sweep_values(&self, v_prev: &[f64], v_next: &mut [f64]) {
        if self.states.len() >= PARALLEL_THRESHOLD {
            v_next
                .par_iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = self.best_value(i, v_prev));
        } else {
            for (i, v) in v_next.iter_mut().enumerate() {
                *v = self.best_value(i, v_prev);
            }
        }
    }

    /// Q half of one sweep, one entry per highway in CSR order.
    pub fn q_values(&self, v_prev: &[f64]) -> Vec<f64> {
        (0..self.highway_count())
            .map(|e| self.discounts[e] * v_prev[self.targets[e]] + self.rewards[e])
            .collect()
    }

    /// `sum |Q(v_a) - Q(v_b)|` over all highways. Each highway's Q moves by
    /// its discount times the change at its destination, so the sum is
    /// accumulated per intersection.
    fn q_change(&self, v_a: &[f64], v_b: &[f64]) -> f64 {
        self.in_weights
            .iter()
            .zip(v_a.iter().zip(v_b))
            .map(|(w, (a, b))| w * (a - b).abs())
            .sum()
    }

    /// Sweeps from `v_init` (with Q starting at zero) until the summed Q
    /// change of a sweep drops below `delta` or `max_iter` sweeps have run.
    pub fn solve_from(&self, v_init: Vec<f64>, max_iter: usize, delta: f64) -> ProgramRun {
        let n = v_init.len();
        // v_prev2 holds the input of the previous sweep, v_prev its output
        let mut v_prev2 = v_init;
        let mut v_prev = vec![0.0; n];
        let mut v_next = vec![0.0; n];
        if max_iter == 0 {
            return ProgramRun {
                v: v_prev2,
                q: vec![0.0; self.highway_count()],
                sweeps: 0,
                final_delta: f64::INFINITY,
                converged: false,
            };
        }
        let mut final_delta = self.q_values(&v_prev2).iter().map(|q| q.abs()).sum::<f64>();
        self.sweep_values(&v_prev2, &mut v_prev);
        let mut sweeps = 1;
        while final_delta >= delta && sweeps < max_iter {
            final_delta = self.q_change(&v_prev, &v_prev2);
            self.sweep_values(&v_prev, &mut v_next);
            std::mem::swap(&mut v_prev2, &mut v_prev);
            std::mem::swap(&mut v_prev, &mut v_next);
            sweeps += 1;
        }
        // the last sweep's Q was computed from its input, now in v_prev2
        let q = self.q_values(&v_prev2);
        ProgramRun {
            v: v_prev,
            q,
            sweeps,
            final_delta,
            converged: final_delta < delta,
        }
    }

    fn tables(&self, run: ProgramRun, graph_revision: u64) -> ValueTables {
        let v = self.states.iter().copied().zip(run.v).collect();
        let mut q = BTreeMap::new();
        for i in 0..self.states.len() {
            for e in self.offsets[i]..self.offsets[i + 1] {
                q.insert((self.states[i], self.actions[e]), run.q[e]);
            }
        }
        ValueTables {
            v,
            q,
            iterations_run: run.sweeps,
            final_delta: run.final_delta,
            converged: run.converged,
            graph_revision,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProgramRun {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub sweeps: usize,
    pub final_delta: f64,
    pub converged: bool,
}

/// One synchronous application of the graph Bellman operator. Intersections
/// missing from `v_prev` read as zero.
pub fn bellman_sweep(
    graph: &HighwayGraph,
    v_prev: &BTreeMap<StateId, f64>,
) -> (BTreeMap<StateId, f64>, BTreeMap<(StateId, ActionId), f64>) {
    let gamma = graph.gamma();
    let mut v_next = BTreeMap::new();
    let mut q_next = BTreeMap::new();
    for s in graph.intersections() {
        let mut best: Option<f64> = None;
        for (a, h) in graph.outgoing(*s) {
            let q = h.discount(gamma) * v_prev.get(&h.to).copied().unwrap_or(0.0) + h.cached_reward;
            q_next.insert((*s, a), q);
            best = Some(best.map_or(q, |b: f64| b.max(q)));
        }
        v_next.insert(*s, best.unwrap_or(0.0));
    }
    (v_next, q_next)
}

pub fn value_update_loop(graph: &HighwayGraph, max_iter: usize, delta: f64) -> ValueTables {
    value_update_loop_from(graph, max_iter, delta, &BTreeMap::new())
}

/// Like [`value_update_loop`] but starts V from `warm` where an intersection
/// already has a value (zero elsewhere). Q always restarts from zero.
pub fn value_update_loop_from(
    graph: &HighwayGraph,
    max_iter: usize,
    delta: f64,
    warm: &BTreeMap<StateId, f64>,
) -> ValueTables {
    let program = HighwayProgram::new(graph);
    let init = program
        .states
        .iter()
        .map(|s| warm.get(s).copied().unwrap_or(0.0))
        .collect();
    let run = program.solve_from(init, max_iter, delta);
    program.tables(run, graph.revision())
}

/// Values of every state in the graph: intersections take their V entry,
/// interior states the discounted remainder of their highway.
pub fn interior_values(graph: &HighwayGraph, tables: &ValueTables) -> BTreeMap<StateId, f64> {
    let gamma = graph.gamma();
    let mut out: BTreeMap<StateId, f64> = graph
        .intersections()
        .iter()
        .map(|s| (*s, tables.value(*s).unwrap_or(0.0)))
        .collect();
    for h in graph.highways().values() {
        let mut value = tables.value(h.to).unwrap_or(0.0);
        for k in (1..h.length()).rev() {
            value = h.step_rewards[k] + gamma * value;
            out.insert(h.interior[k - 1], value);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub min_dist: f64,
    pub max_dist: f64,
    pub avg_dist: f64,
    pub completeness_pct: f64,
}

pub fn completeness_report(
    values: &BTreeMap<StateId, f64>,
    ground_truth: &BTreeMap<StateId, f64>,
    tol: f64,
) -> Result<CompletenessReport> {
    let missing = ground_truth
        .keys()
        .filter(|k| !values.contains_key(k))
        .count();
    let extra = values
        .keys()
        .filter(|k| !ground_truth.contains_key(k))
        .count();
    if missing > 0 || extra > 0 {
        return Err(Error::KeyMismatch { missing, extra });
    }
    if values.is_empty() {
        return Ok(CompletenessReport {
            min_dist: 0.0,
            max_dist: 0.0,
            avg_dist: 0.0,
            completeness_pct: 100.0,
        });
    }
    let dists: Vec<f64> = values
        .iter()
        .map(|(k, v)| (v - ground_truth[k]).abs())
        .collect();
    let within = dists.iter().filter(|d| **d <= tol).count();
    Ok(CompletenessReport {
        min_dist: dists.iter().copied().fold(f64::INFINITY, f64::min),
        max_dist: dists.iter().copied().fold(0.0, f64::max),
        avg_dist: dists.iter().sum::<f64>() / dists.len() as f64,
        completeness_pct: 100.0 * within as f64 / dists.len() as f64,
    })
}

/// Completeness over every ground-truth state, scoring states missing from
/// `values` at 0 (nothing is known about them). Also returns how many were
/// missing. States outside the ground truth are an error.
pub fn completeness_over_truth(
    values: &BTreeMap<StateId, f64>,
    ground_truth: &BTreeMap<StateId, f64>,
    tol: f64,
) -> Result<(CompletenessReport, usize)> {
    let mut filled = values.clone();
    let mut missing = 0;
    for k in ground_truth.keys() {
        filled.entry(*k).or_insert_with(|| {
            missing += 1;
            0.0
        });
    }
    Ok((completeness_report(&filled, ground_truth, tol)?, missing))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractionProbe {
    pub lhs: f64,
    pub rhs: f64,
}

fn max_norm_distance(a: &BTreeMap<StateId, f64>, b: &BTreeMap<StateId, f64>) -> f64 {
    a.keys()
        .chain(b.keys())
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

pub fn contraction_probe(
    graph: &HighwayGraph,
    w: &BTreeMap<StateId, f64>,
    v: &BTreeMap<StateId, f64>,
) -> ContractionProbe {
    let (gw, _) = bellman_sweep(graph, w);
    let (gv, _) = bellman_sweep(graph, v);
    ContractionProbe {
        lhs: max_norm_distance(&gw, &gv),
        rhs: graph.gamma() * max_norm_distance(w, v),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub sweeps: usize,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_sec: f64,
}

impl BenchResult {
    fn new(sweeps: usize, ops: u64, seconds: f64) -> Self {
        let ops_per_sec = if seconds > 0.0 {
            ops as f64 / seconds
        } else {
            f64::INFINITY
        };
        Self {
            sweeps,
            ops,
            seconds,
            ops_per_sec,
        }
    }
}

/// Runs exactly `sweeps` sweeps and counts one operation per single-step
/// transition covered by each highway update.
pub fn ops_per_second_benchmark(graph: &HighwayGraph, sweeps: usize) -> BenchResult {
    let program = HighwayProgram::new(graph);
    let start = Instant::now();
    let run = program.solve_from(vec![0.0; program.states.len()], sweeps, -1.0);
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(&run.v);
    BenchResult::new(
        run.sweeps,
        run.sweeps as u64 * program.expanded_ops_per_sweep(),
        seconds,
    )
}

/// The same measurement for plain value iteration, one operation per edge.
pub fn vanilla_ops_per_second(graph: &EmpiricalGraph, sweeps: usize) -> BenchResult {
    let compiled = graph.compile();
    let start = Instant::now();
    let run = compiled.solve(sweeps, -1.0);
    let seconds = start.elapsed().as_secs_f64();
    std::hint::black_box(&run.values);
    BenchResult::new(
        run.sweeps,
        run.sweeps as u64 * compiled.edge_count() as u64,
        seconds,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveTiming {
    pub sweeps: usize,
    pub seconds: f64,
    pub converged: bool,
}

/// Wall time of one converged solve from zero, best of `repeats`.
pub fn time_highway_solve(
    graph: &HighwayGraph,
    max_iter: usize,
    delta: f64,
    repeats: usize,
) -> SolveTiming {
    let program = HighwayProgram::new(graph);
    best_of(repeats, || {
        let run = program.solve_from(vec![0.0; program.states.len()], max_iter, delta);
        (run.sweeps, run.converged)
    })
}

pub fn time_vanilla_solve(
    graph: &CompiledGraph,
    max_iter: usize,
    delta: f64,
    repeats: usize,
) -> SolveTiming {
    best_of(repeats, || {
        let run = graph.solve(max_iter, delta);
        (run.sweeps, run.converged)
    })
}

fn best_of(repeats: usize, mut f: impl FnMut() -> (usize, bool)) -> SolveTiming {
    let mut best = SolveTiming {
        sweeps: 0,
        seconds: f64::INFINITY,
        converged: false,
    };
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let (sweeps, converged) = std::hint::black_box(f());
        let seconds = start.elapsed().as_secs_f64();
        if seconds < best.seconds {
            best = SolveTiming {
                sweeps,
                seconds,
                converged,
            };
        }
    }
    best
}

/// Update counts of the two solvers under the work model `nodes * actions * nodes`:
/// each sweep touches every node's actions, and values need up to one sweep
/// per node to propagate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkComparison {
    pub highway_updates_per_sweep: usize,
    pub expanded_updates_per_sweep: usize,
    pub highway_work: f64,
    pub vanilla_work: f64,
    pub work_ratio: f64,
    pub z: f64,
}

pub fn work_comparison(graph: &HighwayGraph) -> WorkComparison {
    let stats = graph.graph_stats();
    let actions = graph.max_out_degree().max(1) as f64;
    let n_h = stats.intersections as f64;
    let n_e = stats.expanded_states as f64;
    let highway_work = n_h * actions * n_h;
    let vanilla_work = n_e * actions * n_e;
    WorkComparison {
        highway_updates_per_sweep: stats.highways,
        expanded_updates_per_sweep: stats.expanded_edges,
        highway_work,
        vanilla_work,
        work_ratio: if vanilla_work > 0.0 {
            highway_work / vanilla_work
        } else {
            1.0
        },
        z: stats.z,
    }
}
