//! Distils highway-graph Q values into a feed-forward approximator.
//!
//! The network maps state features to one Q value per action. Training uses
//! a squared error on the actions that have a graph target; outputs for
//! actions never taken from a state get no gradient.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::splitmix64;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::highway_graph::HighwayGraph;
use crate::policy::PolicySnapshot;
use crate::trainer::{EpisodeResult, EvalResult, TrainOutcome};
use crate::transition_model::{ActionId, StateId};
use crate::value_iteration::ValueTables;

pub const LOSS_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QRow {
    pub state: StateId,
    pub features: Vec<f64>,
    pub action: ActionId,
    pub target_q: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QDataset {
    pub feature_dim: usize,
    pub action_count: usize,
    pub rows: Vec<QRow>,
}

impl QDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Features of every state that has at least one row.
    pub fn states(&self) -> BTreeMap<StateId, Vec<f64>> {
        self.rows
            .iter()
            .map(|r| (r.state, r.features.clone()))
            .collect()
    }
}

/// One row per Q entry of `tables`, in key order. `features` supplies the
/// input vector for each intersection.
pub fn extract_dataset<F>(
    graph: &HighwayGraph,
    tables: &ValueTables,
    action_count: usize,
    feature_dim: usize,
    mut features: F,
) -> Result<QDataset>
where
    F: FnMut(StateId) -> Option<Vec<f64>>,
{
    if tables.graph_revision != graph.revision() {
        return Err(Error::Config(format!(
            "value tables belong to graph revision {} but the graph is at revision {}",
            tables.graph_revision,
            graph.revision()
        )));
    }
    let mut cache: BTreeMap<StateId, Vec<f64>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(tables.q.len());
    for (&(state, action), &q) in &tables.q {
        if action.index() >= action_count {
            return Err(Error::InvalidAction {
                action,
                action_count,
            });
        }
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(state) {
            let f = features(state)
                .ok_or_else(|| Error::Config(format!("no features for state {state}")))?;
            if f.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: f.len(),
                });
            }
            e.insert(f);
        }
        rows.push(QRow {
            state,
            features: cache[&state].clone(),
            action,
            target_q: q,
        });
    }
    Ok(QDataset {
        feature_dim,
        action_count,
        rows,
    })
}

/// Dataset of a finished training run, with the environment's features.
pub fn dataset_for_run(outcome: &TrainOutcome) -> Result<QDataset> {
    let env = outcome.config.env.build()?;
    extract_dataset(
        &outcome.graph,
        &outcome.tables,
        env.action_count(),
        env.feature_dim(),
        |s| outcome.observations.get(&s).map(|o| env.features(o)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_seed: u64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            hidden_units: 512,
            learning_rate: 1e-3,
            momentum: 0.9,
            epochs: 2000,
            batch_size: 32,
            init_seed: 0,
        }
    }
}

/// Fully connected layer, `y = x · wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// Two ReLU hidden layers and a linear output with one unit per action.
#[derive(Clone, Debug, PartialEq)]
pub struct QApproximator {
    pub config: ApproxConfig,
    pub input_dim: usize,
    pub action_count: usize,
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
    pub loss_non_increasing: bool,
}

impl QApproximator {
    pub fn new(input_dim: usize, action_count: usize, config: ApproxConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let h = config.hidden_units;
        let shapes = [(h, input_dim), (h, h), (action_count, h)];
        let layers = shapes
            .iter()
            .map(|&(out, inp)| {
                let bound = (6.0 / inp.max(1) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_simple_fn((out, inp), || rng.gen_range(-bound..bound)),
                    b: Array1::zeros(out),
                }
            })
            .collect();
        Self {
            config,
            input_dim,
            action_count,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn param(&self, i: usize) -> f64 {
        *self.params().nth(i).expect("parameter index in range")
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let p = self
            .layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
            .nth(i)
            .expect("parameter index in range");
        *p = v;
    }

    /// Output and the input of every layer.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w.t()) + &layer.b;
            inputs.push(a);
            a = if k + 1 < self.layers.len() {
                z.mapv(|v| v.max(0.0))
            } else {
                z
            };
        }
        (a, inputs)
    }

    /// Masked mean squared error over `(row, action)` targets and its gradient.
    pub fn loss_and_grad(
        &self,
        x: &Array2<f64>,
        actions: &[usize],
        targets: &[f64],
    ) -> (f64, Vec<Dense>) {
        let (y, inputs) = self.forward(x);
        let n = actions.len().max(1) as f64;
        let mut dy = Array2::zeros(y.raw_dim());
        let mut loss = 0.0;
        for (i, (&a, &t)) in actions.iter().zip(targets).enumerate() {
            let d = y[[i, a]] - t;
            loss += d * d;
            dy[[i, a]] = 2.0 * d / n;
        }
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut delta = dy;
        for k in (0..self.layers.len()).rev() {
            grads[k].w = delta.t().dot(&inputs[k]);
            grads[k].b = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.layers[k].w);
                delta.zip_mut_with(&inputs[k], |d, a| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
        }
        (loss / n, grads)
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: features.len(),
            });
        }
        let x = Array2::from_shape_vec((1, self.input_dim), features.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(self.forward(&x).0.row(0).to_vec())
    }

    /// Greedy action; ties go to the lowest action.
    pub fn act(&self, features: &[f64]) -> Result<ActionId> {
        let q = self.predict(features)?;
        let mut best = 0;
        for (a, v) in q.iter().enumerate() {
            if *v > q[best] {
                best = a;
            }
        }
        Ok(ActionId(best as u8))
    }
}

fn design_matrix(dataset: &QDataset) -> Result<(Array2<f64>, Vec<usize>, Vec<f64>)> {
    let flat: Vec<f64> = dataset
        .rows
        .iter()
        .flat_map(|r| r.features.iter().copied())
        .collect();
    let x = Array2::from_shape_vec((dataset.len(), dataset.feature_dim), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    let actions = dataset.rows.iter().map(|r| r.action.index()).collect();
    let targets = dataset.rows.iter().map(|r| r.target_q).collect();
    Ok((x, actions, targets))
}

/// Mini-batch SGD with momentum. Deterministic for a fixed config.
pub fn fit(dataset: &QDataset, config: &ApproxConfig) -> Result<(QApproximator, FitReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot fit an empty dataset".into()));
    }
    if config.batch_size == 0 || config.hidden_units == 0 {
        return Err(Error::Config(
            "batch_size and hidden_units must be positive".into(),
        ));
    }
    let (x, actions, targets) = design_matrix(dataset)?;
    let mut model = QApproximator::new(dataset.feature_dim, dataset.action_count, config.clone());
    let mut velocity: Vec<Dense> = model.layers.iter().map(Dense::zeros_like).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.init_seed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let ab: Vec<usize> = batch.iter().map(|&i| actions[i]).collect();
            let tb: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = model.loss_and_grad(&xb, &ab, &tb);
            epoch_loss += loss * batch.len() as f64;
            for ((layer, vel), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                vel.w
                    .zip_mut_with(&g.w, |v, g| *v = config.momentum * *v + g);
                vel.b
                    .zip_mut_with(&g.b, |v, g| *v = config.momentum * *v + g);
                layer.w.scaled_add(-config.learning_rate, &vel.w);
                layer.b.scaled_add(-config.learning_rate, &vel.b);
            }
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    let loss_non_increasing = moving_average_non_increasing(&history, LOSS_WINDOW, 1e-3);
    Ok((
        model,
        FitReport {
            loss_history: history,
            loss_non_increasing,
        },
    ))
}

/// Losses this far below the first epoch's are rounding noise.
const LOSS_FLOOR: f64 = 1e-12;

/// Whether the `window`-epoch moving average of `history` never rises by
/// more than `rel_tol` of its previous value, ignoring movement below
/// `LOSS_FLOOR` times the initial loss.
pub fn moving_average_non_increasing(history: &[f64], window: usize, rel_tol: f64) -> bool {
    if window == 0 || history.len() < window {
        return true;
    }
    let avg: Vec<f64> = history
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let floor = LOSS_FLOOR * history[0].abs();
    avg.windows(2)
        .all(|p| p[1] <= p[0] * (1.0 + rel_tol) + floor)
}

/// Largest relative error between the analytic gradient and central finite
/// differences, over `probes` parameters drawn with `seed`.
pub fn gradient_check(
    model: &QApproximator,
    dataset: &QDataset,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (x, actions, targets) = design_matrix(dataset)?;
    let (_, grads) = model.loss_and_grad(&x, &actions, &targets);
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.w.iter().chain(g.b.iter()).copied())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let eps = 1e-6;
    for _ in 0..probes {
        let i = rng.gen_range(0..model.param_count());
        let p = model.param(i);
        probe.set_param(i, p + eps);
        let up = probe.loss_and_grad(&x, &actions, &targets).0;
        probe.set_param(i, p - eps);
        let down = probe.loss_and_grad(&x, &actions, &targets).0;
        probe.set_param(i, p);
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Fraction of dataset states where the approximator picks the same action as
/// the graph policy. States the policy has no action for are skipped.
pub fn policy_agreement(
    model: &QApproximator,
    snapshot: &PolicySnapshot,
    dataset: &QDataset,
) -> Result<f64> {
    let (mut agree, mut total) = (0usize, 0usize);
    for (s, f) in dataset.states() {
        if let Some(a) = snapshot.known_action(s) {
            total += 1;
            if model.act(&f)? == a {
                agree += 1;
            }
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    })
}

/// Greedy rollouts of the approximator from the given start seeds.
pub fn evaluate_approximator(
    model: &QApproximator,
    env: &Environment,
    start_seeds: &[u64],
    gamma: f64,
    max_steps: usize,
) -> Result<EvalResult> {
    let mut episodes = Vec::with_capacity(start_seeds.len());
    for &seed in start_seeds {
        let mut obs = env.reset_with_seed(seed);
        let (mut total, mut discounted, mut discount) = (0.0, 0.0, 1.0);
        let mut steps = 0;
        let mut done = env.is_terminal(&obs);
        while !done && steps < max_steps {
            let r = env.step(&obs, model.act(&env.features(&obs))?)?;
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
