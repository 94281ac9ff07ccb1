//! Action selection from a highway graph and its value tables.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::splitmix64;
use crate::error::{Error, Result};
use crate::highway_graph::{HighwayGraph, Location};
use crate::transition_model::{ActionId, StateId};
use crate::value_iteration::ValueTables;

/// Q values closer than this are treated as tied, so floating-point noise
/// between solves cannot flip the choice between equally good actions.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Immutable pairing of a graph with the tables computed on it. Cheap to
/// clone and safe to share between actors.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    graph: Arc<HighwayGraph>,
    tables: Arc<ValueTables>,
    action_count: usize,
    rng_seed: u64,
}

impl PolicySnapshot {
    pub fn new(
        graph: Arc<HighwayGraph>,
        tables: Arc<ValueTables>,
        action_count: usize,
        rng_seed: u64,
    ) -> Result<Self> {
        if action_count == 0 || action_count > usize::from(u8::MAX) + 1 {
            return Err(Error::Config(format!(
                "action count {action_count} is out of range"
            )));
        }
        if tables.graph_revision != graph.revision() {
            return Err(Error::Config(format!(
                "value tables were computed on graph revision {} but the graph is at revision {}",
                tables.graph_revision,
                graph.revision()
            )));
        }
        Ok(Self {
            graph,
            tables,
            action_count,
            rng_seed,
        })
    }

    /// A snapshot of an empty graph: every state is unknown.
    pub fn empty(gamma: f64, action_count: usize, rng_seed: u64) -> Result<Self> {
        let graph = HighwayGraph::new(gamma);
        let tables = crate::value_iteration::value_update_loop(&graph, 1, 0.0);
        Self::new(Arc::new(graph), Arc::new(tables), action_count, rng_seed)
    }

    pub fn graph(&self) -> &HighwayGraph {
        &self.graph
    }

    pub fn tables(&self) -> &ValueTables {
        &self.tables
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Generator for one consumer (an actor episode, an evaluation run),
    /// derived from the snapshot seed and a stream number.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.rng_seed ^ splitmix64(stream)))
    }

    /// The action the policy prescribes when it has one: the best highway at
    /// an intersection or the recorded action inside a highway.
    pub fn known_action(&self, s: StateId) -> Option<ActionId> {
        match self.graph.locate(s) {
            Location::Intersection => {
                let mut best: Option<(ActionId, f64)> = None;
                for (a, _) in self.graph.outgoing(s) {
                    let q = self.tables.q.get(&(s, a)).copied().unwrap_or(0.0);
                    if best.is_none_or(|(_, b)| q > b + TIE_TOLERANCE) {
                        best = Some((a, q));
                    }
                }
                best.map(|(a, _)| a)
            }
            Location::OnHighway { highway, offset } => {
                self.graph.highway(highway).map(|h| h.actions[offset])
            }
            Location::Unknown => None,
        }
    }

    pub fn random_action<R: Rng>(&self, rng: &mut R) -> ActionId {
        ActionId(rng.gen_range(0..self.action_count) as u8)
    }

    pub fn select_action<R: Rng>(&self, s: StateId, rng: &mut R) -> ActionId {
        self.known_action(s)
            .unwrap_or_else(|| self.random_action(rng))
    }

    pub fn epsilon_greedy<R: Rng>(&self, s: StateId, epsilon: f64, rng: &mut R) -> ActionId {
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            self.random_action(rng)
        } else {
            self.select_action(s, rng)
        }
    }

    /// Greedy action at every intersection that has one.
    pub fn greedy_table(&self) -> BTreeMap<StateId, ActionId> {
        self.graph
            .intersections()
            .iter()
            .filter_map(|s| self.known_action(*s).map(|a| (*s, a)))
            .collect()
    }
}

/// Exploration rate of actor `k` out of `n`: evenly spaced from 0.1 to 1.0.
pub fn epsilon_ladder(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.1
    } else {
        0.1 + 0.9 * k as f64 / (n - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::highway_graph::fixtures::random_graph;
    use crate::transition_model::{Trajectory, TransitionSample};
    use crate::value_iteration::{value_update_loop, value_update_loop_from};

    fn s(i: u64) -> StateId {
        StateId(i)
    }

    fn traj(steps: &[(u64, u8, u64, f64)]) -> Trajectory {
        Trajectory::new(
            steps
                .iter()
                .map(|&(f, a, n, r)| TransitionSample::new(s(f), ActionId(a), s(n), r))
                .collect(),
            true,
            0,
        )
        .unwrap()
    }

    fn snapshot(trajs: &[Trajectory]) -> PolicySnapshot {
        let mut g = HighwayGraph::new(0.99);
        g.assemble(trajs).unwrap();
        let t = value_update_loop(&g, 1000, 1e-12);
        PolicySnapshot::new(Arc::new(g), Arc::new(t), 4, 17).unwrap()
    }

    #[test]
    fn argmax_at_intersection() {
        let p = snapshot(&[traj(&[(0, 0, 1, 0.5)]), traj(&[(0, 1, 2, 0.9)])]);
        assert_eq!(p.select_action(s(0), &mut p.rng(0)), ActionId(1));
    }

    #[test]
    fn ties_go_to_lowest_action() {
        let p = snapshot(&[
            traj(&[(0, 2, 1, 0.5)]),
            traj(&[(0, 1, 2, 0.5)]),
            traj(&[(0, 3, 3, 0.5)]),
        ]);
        assert_eq!(p.select_action(s(0), &mut p.rng(0)), ActionId(1));
        let p = snapshot(&[traj(&[(0, 2, 1, 0.5 + 1e-12)]), traj(&[(0, 1, 2, 0.5)])]);
        assert_eq!(p.select_action(s(0), &mut p.rng(0)), ActionId(1));
    }

    #[test]
    fn recorded_action_inside_highway() {
        let p = snapshot(&[traj(&[
            (0, 3, 1, 0.0),
            (1, 0, 2, 0.0),
            (2, 2, 3, 0.0),
            (3, 1, 4, 1.0),
        ])]);
        assert_eq!(
            p.graph().locate(s(2)),
            Location::OnHighway {
                highway: 0,
                offset: 2
            }
        );
        assert_eq!(p.select_action(s(2), &mut p.rng(0)), ActionId(2));
    }

    #[test]
    fn unknown_state_is_uniform() {
        let p = snapshot(&[traj(&[(0, 0, 1, 0.0)])]);
        let mut rng = p.rng(3);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[p.select_action(s(99), &mut rng).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_extremes() {
        let p = snapshot(&[traj(&[(0, 0, 1, 0.5)]), traj(&[(0, 1, 2, 0.9)])]);
        let mut rng = p.rng(0);
        for _ in 0..100 {
            assert_eq!(p.epsilon_greedy(s(0), 0.0, &mut rng), ActionId(1));
        }
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[p.epsilon_greedy(s(0), 1.0, &mut rng).index()] += 1;
        }
        assert!(
            counts
                .iter()
                .all(|c| (*c as f64 / 10_000.0 - 0.25).abs() <= 0.02),
            "{counts:?}"
        );
    }

    #[test]
    fn epsilon_half_frequency() {
        let p = snapshot(&[traj(&[(0, 0, 1, 0.5)]), traj(&[(0, 1, 2, 0.9)])]);
        let mut rng = p.rng(1);
        let hits = (0..10_000)
            .filter(|_| p.epsilon_greedy(s(0), 0.5, &mut rng) == ActionId(1))
            .count();
        assert!(
            (hits as f64 / 10_000.0 - (0.5 + 0.5 / 4.0)).abs() <= 0.02,
            "{hits}"
        );
    }

    #[test]
    fn ladder_endpoints() {
        assert_eq!(epsilon_ladder(0, 1), 0.1);
        assert_eq!(epsilon_ladder(0, 4), 0.1);
        assert!((epsilon_ladder(3, 4) - 1.0).abs() < 1e-15);
        assert!((epsilon_ladder(1, 4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stale_tables_are_rejected() {
        let mut g = HighwayGraph::new(0.99);
        g.assemble(&[traj(&[(0, 0, 1, 0.0)])]).unwrap();
        let t = value_update_loop(&g, 10, 1e-6);
        g.assemble(&[traj(&[(0, 1, 2, 0.0)])]).unwrap();
        assert!(PolicySnapshot::new(Arc::new(g), Arc::new(t), 4, 0).is_err());
    }

    #[test]
    fn greedy_actions_ignore_constant_value_shift() {
        use rand::SeedableRng;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 12, 0.9);
            let base = value_update_loop(&g, 10_000, 1e-12);
            // one sweep from V + c; all highways out of a state share the same c
            // only when they have equal length, so compare within equal-length groups
            let shifted: BTreeMap<StateId, f64> =
                base.v.iter().map(|(k, v)| (*k, v + 3.0)).collect();
            let one = value_update_loop_from(&g, 1, 0.0, &shifted);
            for st in g.intersections() {
                let lengths: Vec<usize> = g.outgoing(*st).map(|(_, h)| h.length()).collect();
                if lengths.windows(2).all(|w| w[0] == w[1]) {
                    let pick = |t: &ValueTables| {
                        let mut best: Option<(ActionId, f64)> = None;
                        for (a, _) in g.outgoing(*st) {
                            let q = t.q[&(*st, a)];
                            if best.is_none_or(|(_, b)| q > b) {
                                best = Some((a, q));
                            }
                        }
                        best.map(|(a, _)| a)
                    };
                    let one_step = value_update_loop_from(&g, 1, 0.0, &base.v);
                    assert_eq!(pick(&one), pick(&one_step));
                }
            }
        }
    }
}
