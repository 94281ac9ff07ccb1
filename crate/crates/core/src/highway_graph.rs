//! Highway graph: the empirical graph with every non-branching path between
//! intersection states collapsed into a single edge.
//!
//! The graph is grown incrementally from trajectories. Each new trajectory is
//! scanned twice for states that must become intersections: once against its
//! own visited prefix (forks, merges, crossings within the episode) and once
//! against the existing graph (exits, entries, new links between known
//! states). Existing highways that contain a new intersection are split, and
//! the trajectory is then cut at every intersection it passes through.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transition_model::{ActionId, EmpiricalGraph, StateId, Trajectory, TransitionSample};

pub type HighwayId = u64;

/// A maximal non-branching path between two intersections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Highway {
    pub id: HighwayId,
    pub from: StateId,
    pub to: StateId,
    /// States strictly between `from` and `to`; `length() - 1` entries.
    pub interior: Vec<StateId>,
    /// Action taken at each step; `actions[0]` is the first action out of `from`.
    pub actions: Vec<ActionId>,
    pub step_rewards: Vec<f64>,
    /// Discounted sum of `step_rewards` for the graph's gamma.
    pub cached_reward: f64,
}

impl Highway {
    pub fn length(&self) -> usize {
        self.actions.len()
    }

    pub fn first_action(&self) -> ActionId {
        self.actions[0]
    }

    /// State at `offset` steps from `from` (`0` is `from`, `length()` is `to`).
    pub fn state_at(&self, offset: usize) -> StateId {
        if offset == 0 {
            self.from
        } else if offset == self.length() {
            self.to
        } else {
            self.interior[offset - 1]
        }
    }

    /// `gamma^length`, the discount applied to the value at `to`.
    pub fn discount(&self, gamma: f64) -> f64 {
        gamma.powi(self.length() as i32)
    }

    pub fn transitions(&self) -> impl Iterator<Item = TransitionSample> + '_ {
        (0..self.length()).map(move |k| {
            TransitionSample::new(
                self.state_at(k),
                self.actions[k],
                self.state_at(k + 1),
                self.step_rewards[k],
            )
        })
    }

    fn is_consistent(&self) -> bool {
        !self.actions.is_empty()
            && self.step_rewards.len() == self.actions.len()
            && self.interior.len() + 1 == self.actions.len()
    }
}

/// Discounted reward collected along a highway. The reward of the `t`-th step
/// (1-based) is discounted by `gamma^(t-1)`, which keeps highway values equal
/// to step-by-step Bellman backups over the same path.
pub fn highway_reward(step_rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in step_rewards {
        total += r * discount;
        discount *= gamma;
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Intersection,
    /// Interior state at `offset` in `[1, length - 1]` of the highway.
    OnHighway {
        highway: HighwayId,
        offset: usize,
    },
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub intersections: usize,
    pub highways: usize,
    pub expanded_states: usize,
    pub expanded_edges: usize,
    /// `intersections / expanded_states`; `0` for an empty graph.
    pub z: f64,
}

#[derive(Clone, Debug, Default)]
pub struct HighwayGraph {
    gamma: f64,
    intersections: BTreeSet<StateId>,
    highways: BTreeMap<HighwayId, Highway>,
    out_edges: BTreeMap<StateId, BTreeMap<ActionId, HighwayId>>,
    membership: HashMap<StateId, (HighwayId, usize)>,
    next_id: HighwayId,
    /// Bumped on every structural change; value tables remember the revision
    /// they were computed for.
    revision: u64,
}

impl HighwayGraph {
    pub fn new(gamma: f64) -> Self {
        assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
        Self {
            gamma,
            ..Default::default()
        }
    }

    /// Rebuilds a graph from its persistent parts (used by deserialization).
    pub fn from_parts(
        gamma: f64,
        intersections: BTreeSet<StateId>,
        highways: Vec<Highway>,
        next_id: HighwayId,
        revision: u64,
    ) -> Result<Self> {
        let mut g = Self {
            gamma,
            intersections,
            next_id,
            revision,
            ..Default::default()
        };
        for h in highways {
            if !h.is_consistent() {
                return Err(Error::Format(format!(
                    "highway {} has inconsistent step lists",
                    h.id
                )));
            }
            if !g.intersections.contains(&h.from) || !g.intersections.contains(&h.to) {
                return Err(Error::Format(format!(
                    "highway {} has a non-intersection endpoint",
                    h.id
                )));
            }
            if h.id >= g.next_id {
                return Err(Error::Format(format!(
                    "highway id {} is not below next id {}",
                    h.id, g.next_id
                )));
            }
            g.index_highway(&h);
            g.highways.insert(h.id, h);
        }
        Ok(g)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Changes the discount and recomputes every cached highway reward.
    pub fn set_gamma(&mut self, gamma: f64) {
        assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
        self.gamma = gamma;
        for h in self.highways.values_mut() {
            h.cached_reward = highway_reward(&h.step_rewards, gamma);
        }
        self.revision += 1;
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn next_id(&self) -> HighwayId {
        self.next_id
    }

    pub fn intersections(&self) -> &BTreeSet<StateId> {
        &self.intersections
    }

    pub fn highways(&self) -> &BTreeMap<HighwayId, Highway> {
        &self.highways
    }

    pub fn highway(&self, id: HighwayId) -> Option<&Highway> {
        self.highways.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.intersections.is_empty()
    }

    /// Outgoing highways of `s` keyed by their first action.
    pub fn outgoing(&self, s: StateId) -> impl Iterator<Item = (ActionId, &Highway)> + '_ {
        self.out_edges
            .get(&s)
            .into_iter()
            .flat_map(|m| m.iter())
            .map(move |(a, id)| (*a, &self.highways[id]))
    }

    pub fn outgoing_by_action(&self, s: StateId, a: ActionId) -> Option<&Highway> {
        self.out_edges
            .get(&s)
            .and_then(|m| m.get(&a))
            .map(|id| &self.highways[id])
    }

    pub fn contains(&self, s: StateId) -> bool {
        self.intersections.contains(&s) || self.membership.contains_key(&s)
    }

    pub fn locate(&self, s: StateId) -> Location {
        if self.intersections.contains(&s) {
            Location::Intersection
        } else if let Some(&(highway, offset)) = self.membership.get(&s) {
            Location::OnHighway { highway, offset }
        } else {
            Location::Unknown
        }
    }

    /// Recorded outcome `(next, reward)` of taking `a` in `s`, if sampled.
    pub fn edge(&self, s: StateId, a: ActionId) -> Option<(StateId, f64)> {
        match self.locate(s) {
            Location::Intersection => self
                .outgoing_by_action(s, a)
                .map(|h| (h.state_at(1), h.step_rewards[0])),
            Location::OnHighway { highway, offset } => {
                let h = &self.highways[&highway];
                (h.actions[offset] == a).then(|| (h.state_at(offset + 1), h.step_rewards[offset]))
            }
            Location::Unknown => None,
        }
    }

    /// Intersections created by the trajectory revisiting its own prefix:
    /// forks (leaving a visited state towards a new one), merges (entering a
    /// visited state from a new one) and crossings (a new transition between
    /// two visited states).
    pub fn detect_intersections_within(traj: &Trajectory) -> BTreeSet<StateId> {
        let mut flagged = BTreeSet::new();
        let mut visited: HashSet<StateId> = HashSet::new();
        let mut seen: HashSet<(StateId, ActionId, StateId)> = HashSet::new();
        for s in &traj.samples {
            let from_visited = visited.contains(&s.from);
            let next_visited = visited.contains(&s.next);
            match (from_visited, next_visited) {
                (true, false) => {
                    flagged.insert(s.from);
                }
                (false, true) => {
                    flagged.insert(s.next);
                }
                (true, true) if !seen.contains(&(s.next, s.action, s.from)) => {
                    flagged.insert(s.from);
                    flagged.insert(s.next);
                }
                _ => {}
            }
            visited.insert(s.from);
            seen.insert((s.next, s.action, s.from));
        }
        flagged
    }

    /// Intersections created where the trajectory meets the existing graph:
    /// exits from the graph, entries into it, and transitions between graph
    /// states that the graph has not recorded.
    pub fn detect_intersections_against(&self, traj: &Trajectory) -> BTreeSet<StateId> {
        let mut flagged = BTreeSet::new();
        for s in &traj.samples {
            match (self.contains(s.from), self.contains(s.next)) {
                (true, false) => {
                    flagged.insert(s.from);
                }
                (false, true) => {
                    flagged.insert(s.next);
                }
                (true, true) if self.edge(s.from, s.action).is_none() => {
                    flagged.insert(s.from);
                    flagged.insert(s.next);
                }
                _ => {}
            }
        }
        flagged
    }

    /// Incrementally merges trajectories into the graph. Trajectories are
    /// ingested in order; a determinism violation stops ingestion before the
    /// offending trajectory touches the graph.
    pub fn assemble(&mut self, trajs: &[Trajectory]) -> Result<()> {
        for traj in trajs {
            self.assemble_one(traj)?;
        }
        Ok(())
    }

    pub fn assemble_one(&mut self, traj: &Trajectory) -> Result<()> {
        traj.validate()?;
        self.check_determinism(traj)?;

        let states = traj.states();
        let mut flagged = Self::detect_intersections_within(traj);
        flagged.extend(self.detect_intersections_against(traj));
        flagged.insert(states[0]);
        flagged.insert(states[states.len() - 1]);

        // Promote in order of first appearance so highway ids are reproducible.
        let mut promoted = HashSet::new();
        for &s in &states {
            if flagged.contains(&s) && promoted.insert(s) {
                self.promote(s)?;
            }
        }

        let mut start = 0;
        for (end, s) in states.iter().enumerate().skip(1) {
            if self.intersections.contains(s) {
                self.insert_segment(&traj.samples[start..end]);
                start = end;
            }
        }
        debug_assert_eq!(start, traj.samples.len());
        Ok(())
    }

    fn check_determinism(&self, traj: &Trajectory) -> Result<()> {
        let mut local: HashMap<(StateId, ActionId), (StateId, f64)> = HashMap::new();
        for s in &traj.samples {
            let known = self
                .edge(s.from, s.action)
                .or_else(|| local.get(&(s.from, s.action)).copied());
            if let Some((next, reward)) = known {
                if next != s.next || reward != s.reward {
                    return Err(Error::DeterminismViolation {
                        state: s.from,
                        action: s.action,
                        recorded_next: next,
                        recorded_reward: reward,
                        observed_next: s.next,
                        observed_reward: s.reward,
                    });
                }
            }
            local.insert((s.from, s.action), (s.next, s.reward));
        }
        Ok(())
    }

    /// Makes `s` an intersection, splitting the highway it lies on if needed.
    fn promote(&mut self, s: StateId) -> Result<()> {
        match self.locate(s) {
            Location::Intersection => {}
            Location::OnHighway { highway, .. } => {
                self.split_highway(highway, s)?;
            }
            Location::Unknown => {
                self.intersections.insert(s);
                self.revision += 1;
            }
        }
        Ok(())
    }

    /// Adds the highway for one segment between consecutive intersections
    /// unless an identical highway is already recorded.
    fn insert_segment(&mut self, segment: &[TransitionSample]) {
        let from = segment[0].from;
        let first_action = segment[0].action;
        if let Some(existing) = self.outgoing_by_action(from, first_action) {
            debug_assert_eq!(existing.length(), segment.len());
            debug_assert_eq!(existing.to, segment[segment.len() - 1].next);
            return;
        }
        let id = self.next_id;
        self.next_id += 1;
        let step_rewards: Vec<f64> = segment.iter().map(|s| s.reward).collect();
        let h = Highway {
            id,
            from,
            to: segment[segment.len() - 1].next,
            interior: segment[1..].iter().map(|s| s.from).collect(),
            actions: segment.iter().map(|s| s.action).collect(),
            cached_reward: highway_reward(&step_rewards, self.gamma),
            step_rewards,
        };
        debug_assert!(h.interior.iter().all(|s| !self.contains(*s)));
        self.index_highway(&h);
        self.highways.insert(id, h);
        self.revision += 1;
    }

    fn index_highway(&mut self, h: &Highway) {
        self.out_edges
            .entry(h.from)
            .or_default()
            .insert(h.first_action(), h.id);
        for (k, s) in h.interior.iter().enumerate() {
            self.membership.insert(*s, (h.id, k + 1));
        }
    }

    /// Splits highway `id` at its interior state `at`, which becomes an
    /// intersection. The old id is retired.
    pub fn split_highway(&mut self, id: HighwayId, at: StateId) -> Result<(HighwayId, HighwayId)> {
        let offset = match self.membership.get(&at) {
            Some(&(h, k)) if h == id => k,
            _ => {
                return Err(Error::NotInterior {
                    highway: id,
                    state: at,
                })
            }
        };
        let old = self.highways.remove(&id).ok_or(Error::NotInterior {
            highway: id,
            state: at,
        })?;
        self.membership.remove(&at);

        let head_rewards = old.step_rewards[..offset].to_vec();
        let tail_rewards = old.step_rewards[offset..].to_vec();
        let head = Highway {
            id: self.next_id,
            from: old.from,
            to: at,
            interior: old.interior[..offset - 1].to_vec(),
            actions: old.actions[..offset].to_vec(),
            cached_reward: highway_reward(&head_rewards, self.gamma),
            step_rewards: head_rewards,
        };
        let tail = Highway {
            id: self.next_id + 1,
            from: at,
            to: old.to,
            interior: old.interior[offset..].to_vec(),
            actions: old.actions[offset..].to_vec(),
            cached_reward: highway_reward(&tail_rewards, self.gamma),
            step_rewards: tail_rewards,
        };
        self.next_id += 2;

        if let Some(m) = self.out_edges.get_mut(&old.from) {
            m.remove(&old.first_action());
        }
        self.intersections.insert(at);
        let ids = (head.id, tail.id);
        self.index_highway(&head);
        self.index_highway(&tail);
        self.highways.insert(head.id, head);
        self.highways.insert(tail.id, tail);
        self.revision += 1;
        Ok(ids)
    }

    /// Unrolls every highway back into single-step transitions.
    pub fn expand_to_empirical(&self) -> EmpiricalGraph {
        let mut g = EmpiricalGraph::new(self.gamma);
        for s in &self.intersections {
            g.add_node(*s);
        }
        for h in self.highways.values() {
            for t in h.transitions() {
                g.record_sample(&t)
                    .expect("highway graph holds one outcome per (state, action)");
            }
        }
        g
    }

    pub fn interior_count(&self) -> usize {
        self.membership.len()
    }

    pub fn graph_stats(&self) -> GraphStats {
        let expanded_states = self.intersections.len() + self.membership.len();
        let expanded_edges = self.highways.values().map(Highway::length).sum();
        GraphStats {
            intersections: self.intersections.len(),
            highways: self.highways.len(),
            expanded_states,
            expanded_edges,
            z: if expanded_states == 0 {
                0.0
            } else {
                self.intersections.len() as f64 / expanded_states as f64
            },
        }
    }

    /// Highest number of sampled actions out of any single state.
    pub fn max_out_degree(&self) -> usize {
        let at_intersections = self
            .out_edges
            .values()
            .map(BTreeMap::len)
            .max()
            .unwrap_or(0);
        if self.membership.is_empty() {
            at_intersections
        } else {
            at_intersections.max(1)
        }
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut interior_seen = HashSet::new();
        for h in self.highways.values() {
            if !h.is_consistent() {
                return Err(format!("highway {} has inconsistent lists", h.id));
            }
            if !self.intersections.contains(&h.from) || !self.intersections.contains(&h.to) {
                return Err(format!("highway {} endpoint is not an intersection", h.id));
            }
            let recomputed = highway_reward(&h.step_rewards, self.gamma);
            if (recomputed - h.cached_reward).abs() > 1e-12 {
                return Err(format!("highway {} cached reward is stale", h.id));
            }
            if self
                .out_edges
                .get(&h.from)
                .and_then(|m| m.get(&h.first_action()))
                != Some(&h.id)
            {
                return Err(format!("highway {} missing from out-edge index", h.id));
            }
            for (k, s) in h.interior.iter().enumerate() {
                if self.intersections.contains(s) {
                    return Err(format!(
                        "state {s} is both an intersection and interior to {}",
                        h.id
                    ));
                }
                if !interior_seen.insert(*s) {
                    return Err(format!("state {s} is interior to more than one highway"));
                }
                if self.membership.get(s) != Some(&(h.id, k + 1)) {
                    return Err(format!("membership of {s} is wrong"));
                }
            }
        }
        if interior_seen.len() != self.membership.len() {
            return Err("membership index has stale entries".into());
        }
        let expanded = self.expand_to_empirical();
        let in_deg = expanded.in_degrees();
        for s in expanded.nodes() {
            let is_branching =
                expanded.out_degree(*s) >= 2 || in_deg.get(s).copied().unwrap_or(0) >= 2;
            if is_branching && !self.intersections.contains(s) {
                return Err(format!("branching state {s} is not an intersection"));
            }
        }
        Ok(())
    }
}

/// Random deterministic graphs for property checks and benchmarks.
pub mod fixtures {
    use std::ops::Range;

    use rand::Rng;

    use super::HighwayGraph;
    use crate::transition_model::{ActionId, StateId, Trajectory, TransitionSample};

    pub fn random_graph<R: Rng>(rng: &mut R, core: usize, gamma: f64) -> HighwayGraph {
        random_graph_with_rewards(rng, core, gamma, -1.0..1.0)
    }

    /// `core` branch states, each with one to three actions. Every action
    /// leads to a random core state (self-loops included) through a private
    /// chain of up to three pass-through states. The graph is assembled from
    /// random walks over this environment.
    pub fn random_graph_with_rewards<R: Rng>(
        rng: &mut R,
        core: usize,
        gamma: f64,
        rewards: Range<f64>,
    ) -> HighwayGraph {
        let core = core.max(1);
        let mut next_chain = core as u64;
        // paths[c][a] = sequence of (next_state, reward) steps to the target core state
        let mut paths: Vec<Vec<Vec<(StateId, f64)>>> = Vec::with_capacity(core);
        for _ in 0..core {
            let actions = rng.gen_range(1..=3);
            let mut out = Vec::with_capacity(actions);
            for _ in 0..actions {
                let target = StateId(rng.gen_range(0..core as u64));
                let hops = rng.gen_range(0..=3);
                let mut steps = Vec::with_capacity(hops + 1);
                for _ in 0..hops {
                    steps.push((StateId(next_chain), rng.gen_range(rewards.clone())));
                    next_chain += 1;
                }
                steps.push((target, rng.gen_range(rewards.clone())));
                out.push(steps);
            }
            paths.push(out);
        }
        let mut g = HighwayGraph::new(gamma);
        let walks = 1 + core / 2;
        for _ in 0..walks {
            let mut at = rng.gen_range(0..core);
            let mut samples = Vec::new();
            for _ in 0..rng.gen_range(1..=2 * core) {
                let a = rng.gen_range(0..paths[at].len());
                let mut from = StateId(at as u64);
                for (k, &(next, r)) in paths[at][a].iter().enumerate() {
                    let action = if k == 0 {
                        ActionId(a as u8)
                    } else {
                        ActionId(0)
                    };
                    samples.push(TransitionSample::new(from, action, next, r));
                    from = next;
                }
                at = from.0 as usize;
            }
            let traj = Trajectory::new(samples, false, 0).expect("walk is chained");
            g.assemble_one(&traj)
                .expect("fixture environment is deterministic");
        }
        g
    }
}
