//! On-disk formats: versioned binary files for graphs, value tables,
//! approximators and projectors; CSV for metrics, values and replays; DOT for
//! graph drawings; a JSON manifest with content digests; a key=value config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::RandomProjector;
use crate::env::{EnvKind, EnvSpec, Obs};
use crate::error::{Error, Result};
use crate::highway_graph::{Highway, HighwayGraph};
use crate::reparam::{ApproxConfig, Dense, QApproximator};
use crate::trainer::{MetricsRow, RunMetrics, TrainConfig};
use crate::transition_model::{ActionId, EmpiricalGraph, StateId, Trajectory, TransitionSample};
use crate::value_iteration::ValueTables;

pub const FORMAT_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

const GRAPH_MAGIC: &[u8; 4] = b"HGRG";
const TABLES_MAGIC: &[u8; 4] = b"HGVT";
const APPROX_MAGIC: &[u8; 4] = b"HGQA";
const PROJECTOR_MAGIC: &[u8; 4] = b"HGRP";

pub const GRAPH_FILE: &str = "graph.bin";
pub const TABLES_FILE: &str = "tables.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const VALUES_FILE: &str = "values.csv";
pub const Q_FILE: &str = "q.csv";
pub const OBSERVATIONS_FILE: &str = "observations.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const APPROX_FILE: &str = "approximator.bin";

fn header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4], what: &str) -> Result<Self> {
        let mut r = Self {
            cur: Cursor::new(bytes),
        };
        let mut m = [0u8; 4];
        r.cur
            .read_exact(&mut m)
            .map_err(|_| Error::Format(format!("{what}: file too short")))?;
        if &m != magic {
            return Err(Error::Format(format!("{what}: bad magic {m:?}")));
        }
        let v = r.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{what}: unsupported format version {v}"
            )));
        }
        Ok(r)
    }

    fn eof(e: std::io::Error) -> Error {
        Error::Format(format!("truncated file: {e}"))
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(Self::eof)
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(Self::eof)
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(Self::eof)
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(Self::eof)
    }

    /// A length prefix, checked against the bytes left so corrupt input
    /// cannot trigger a huge allocation.
    fn len(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n.saturating_mul(item_bytes.max(1)) > left {
            return Err(Error::Format(format!(
                "length {n} exceeds remaining {left} bytes"
            )));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<()> {
        if (self.cur.position() as usize) != self.cur.get_ref().len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.write_u64::<LE>(v.len() as u64).unwrap();
    for x in v {
        out.write_f64::<LE>(*x).unwrap();
    }
}

pub fn encode_graph(g: &HighwayGraph) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, GRAPH_MAGIC);
    out.write_f64::<LE>(g.gamma()).unwrap();
    out.write_u64::<LE>(g.next_id()).unwrap();
    out.write_u64::<LE>(g.revision()).unwrap();
    out.write_u64::<LE>(g.intersections().len() as u64).unwrap();
    for s in g.intersections() {
        out.write_u64::<LE>(s.0).unwrap();
    }
    out.write_u64::<LE>(g.highways().len() as u64).unwrap();
    for h in g.highways().values() {
        out.write_u64::<LE>(h.id).unwrap();
        out.write_u64::<LE>(h.from.0).unwrap();
        out.write_u64::<LE>(h.to.0).unwrap();
        out.write_u64::<LE>(h.actions.len() as u64).unwrap();
        for a in &h.actions {
            out.write_u8(a.0).unwrap();
        }
        for s in &h.interior {
            out.write_u64::<LE>(s.0).unwrap();
        }
        for r in &h.step_rewards {
            out.write_f64::<LE>(*r).unwrap();
        }
        out.write_f64::<LE>(h.cached_reward).unwrap();
    }
    out
}

pub fn decode_graph(bytes: &[u8]) -> Result<HighwayGraph> {
    let mut r = Reader::open(bytes, GRAPH_MAGIC, "graph")?;
    let gamma = r.f64()?;
    let next_id = r.u64()?;
    let revision = r.u64()?;
    let n = r.len(8)?;
    let intersections: BTreeSet<StateId> = (0..n)
        .map(|_| r.u64().map(StateId))
        .collect::<Result<_>>()?;
    let m = r.len(40)?;
    let mut highways = Vec::with_capacity(m);
    for _ in 0..m {
        let id = r.u64()?;
        let from = StateId(r.u64()?);
        let to = StateId(r.u64()?);
        let len = r.len(17)?;
        if len == 0 {
            return Err(Error::Format(format!("highway {id} has length 0")));
        }
        let actions = (0..len)
            .map(|_| r.u8().map(ActionId))
            .collect::<Result<_>>()?;
        let interior = (0..len - 1)
            .map(|_| r.u64().map(StateId))
            .collect::<Result<_>>()?;
        let step_rewards = (0..len).map(|_| r.f64()).collect::<Result<_>>()?;
        let cached_reward = r.f64()?;
        highways.push(Highway {
            id,
            from,
            to,
            interior,
            actions,
            step_rewards,
            cached_reward,
        });
    }
    r.finish()?;
    HighwayGraph::from_parts(gamma, intersections, highways, next_id, revision)
}

pub fn encode_tables(t: &ValueTables) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, TABLES_MAGIC);
    out.write_u64::<LE>(t.graph_revision).unwrap();
    out.write_u64::<LE>(t.iterations_run as u64).unwrap();
    out.write_f64::<LE>(t.final_delta).unwrap();
    out.write_u8(u8::from(t.converged)).unwrap();
    out.write_u64::<LE>(t.v.len() as u64).unwrap();
    for (s, v) in &t.v {
        out.write_u64::<LE>(s.0).unwrap();
        out.write_f64::<LE>(*v).unwrap();
    }
    out.write_u64::<LE>(t.q.len() as u64).unwrap();
    for ((s, a), q) in &t.q {
        out.write_u64::<LE>(s.0).unwrap();
        out.write_u8(a.0).unwrap();
        out.write_f64::<LE>(*q).unwrap();
    }
    out
}

pub fn decode_tables(bytes: &[u8]) -> Result<ValueTables> {
    let mut r = Reader::open(bytes, TABLES_MAGIC, "value tables")?;
    let graph_revision = r.u64()?;
    let iterations_run = r.u64()? as usize;
    let final_delta = r.f64()?;
    let converged = r.u8()? != 0;
    let n = r.len(16)?;
    let mut v = BTreeMap::new();
    for _ in 0..n {
        let s = StateId(r.u64()?);
        v.insert(s, r.f64()?);
    }
    let n = r.len(17)?;
    let mut q = BTreeMap::new();
    for _ in 0..n {
        let s = StateId(r.u64()?);
        let a = ActionId(r.u8()?);
        q.insert((s, a), r.f64()?);
    }
    r.finish()?;
    Ok(ValueTables {
        v,
        q,
        iterations_run,
        final_delta,
        converged,
        graph_revision,
    })
}

pub fn encode_approximator(m: &QApproximator) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, APPROX_MAGIC);
    let c = &m.config;
    out.write_u64::<LE>(c.hidden_units as u64).unwrap();
    out.write_f64::<LE>(c.learning_rate).unwrap();
    out.write_f64::<LE>(c.momentum).unwrap();
    out.write_u64::<LE>(c.epochs as u64).unwrap();
    out.write_u64::<LE>(c.batch_size as u64).unwrap();
    out.write_u64::<LE>(c.init_seed).unwrap();
    out.write_u64::<LE>(m.input_dim as u64).unwrap();
    out.write_u64::<LE>(m.action_count as u64).unwrap();
    out.write_u64::<LE>(m.layers.len() as u64).unwrap();
    for l in &m.layers {
        let (rows, cols) = l.w.dim();
        out.write_u64::<LE>(rows as u64).unwrap();
        out.write_u64::<LE>(cols as u64).unwrap();
        for x in l.w.iter() {
            out.write_f64::<LE>(*x).unwrap();
        }
        put_f64s(&mut out, &l.b.to_vec());
    }
    out
}

pub fn decode_approximator(bytes: &[u8]) -> Result<QApproximator> {
    let mut r = Reader::open(bytes, APPROX_MAGIC, "approximator")?;
    let config = ApproxConfig {
        hidden_units: r.u64()? as usize,
        learning_rate: r.f64()?,
        momentum: r.f64()?,
        epochs: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        init_seed: r.u64()?,
    };
    let input_dim = r.u64()? as usize;
    let action_count = r.u64()? as usize;
    let n = r.len(16)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("layer shape overflows".into()))?;
        let left = bytes.len() - r.cur.position() as usize;
        if count.saturating_mul(8) > left {
            return Err(Error::Format("layer larger than file".into()));
        }
        let w: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
        let b = r.f64s()?;
        if b.len() != rows {
            return Err(Error::Format("bias length does not match layer".into()));
        }
        layers.push(Dense {
            w: Array2::from_shape_vec((rows, cols), w).map_err(|e| Error::Format(e.to_string()))?,
            b: Array1::from(b),
        });
    }
    r.finish()?;
    let shapes_ok = layers.len() == 3
        && layers[0].w.dim() == (config.hidden_units, input_dim)
        && layers[1].w.dim() == (config.hidden_units, config.hidden_units)
        && layers[2].w.dim() == (action_count, config.hidden_units);
    if !shapes_ok {
        return Err(Error::Format(
            "approximator layer shapes do not match its header".into(),
        ));
    }
    Ok(QApproximator {
        config,
        input_dim,
        action_count,
        layers,
    })
}

pub fn encode_projector(p: &RandomProjector) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, PROJECTOR_MAGIC);
    out.write_u64::<LE>(p.obs_dim as u64).unwrap();
    out.write_u64::<LE>(p.hidden_dim as u64).unwrap();
    out.write_u64::<LE>(p.output_dim as u64).unwrap();
    out.write_u64::<LE>(p.init_seed).unwrap();
    out.write_f64::<LE>(p.quantization_scale).unwrap();
    put_f64s(&mut out, &p.weight);
    put_f64s(&mut out, &p.bias);
    put_f64s(&mut out, &p.initial_hidden);
    out
}

pub fn decode_projector(bytes: &[u8]) -> Result<RandomProjector> {
    let mut r = Reader::open(bytes, PROJECTOR_MAGIC, "projector")?;
    let p = RandomProjector {
        obs_dim: r.u64()? as usize,
        hidden_dim: r.u64()? as usize,
        output_dim: r.u64()? as usize,
        init_seed: r.u64()?,
        quantization_scale: r.f64()?,
        weight: r.f64s()?,
        bias: r.f64s()?,
        initial_hidden: r.f64s()?,
    };
    r.finish()?;
    let rows = p.output_dim + p.hidden_dim;
    if p.weight.len() != rows * (p.obs_dim + p.hidden_dim)
        || p.bias.len() != rows
        || p.initial_hidden.len() != p.hidden_dim
    {
        return Err(Error::Format(
            "projector sizes do not match its dimensions".into(),
        ));
    }
    Ok(p)
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_graph(path: &Path) -> Result<HighwayGraph> {
    decode_graph(&read_artifact(path)?)
}

pub fn load_tables(path: &Path) -> Result<ValueTables> {
    decode_tables(&read_artifact(path)?)
}

pub fn load_approximator(path: &Path) -> Result<QApproximator> {
    decode_approximator(&read_artifact(path)?)
}

pub fn load_projector(path: &Path) -> Result<RandomProjector> {
    decode_projector(&read_artifact(path)?)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Highway graph as DOT: one node per intersection (annotated with its value
/// when tables are given) and one edge per highway.
pub fn graph_to_dot(g: &HighwayGraph, tables: Option<&ValueTables>) -> String {
    let mut s = String::from("digraph highway {\n");
    for st in g.intersections() {
        let label = match tables.and_then(|t| t.v.get(st)) {
            Some(v) => format!("{st}\\nV={v:.6}"),
            None => st.to_string(),
        };
        let _ = writeln!(s, "  \"{st}\" [label=\"{}\"];", dot_escape(&label));
    }
    for h in g.highways().values() {
        let _ = writeln!(
            s,
            "  \"{}\" -> \"{}\" [label=\"{} len={} R={:.6}\"];",
            h.from,
            h.to,
            h.first_action(),
            h.length(),
            h.cached_reward
        );
    }
    s.push_str("}\n");
    s
}

/// Empirical graph as DOT, one edge per recorded transition.
pub fn empirical_to_dot(g: &EmpiricalGraph, values: Option<&BTreeMap<StateId, f64>>) -> String {
    let mut s = String::from("digraph empirical {\n");
    for st in g.nodes() {
        let label = match values.and_then(|v| v.get(st)) {
            Some(v) => format!("{st}\\nV={v:.6}"),
            None => st.to_string(),
        };
        let _ = writeln!(s, "  \"{st}\" [label=\"{}\"];", dot_escape(&label));
    }
    for ((from, a), e) in g.edges() {
        let _ = writeln!(
            s,
            "  \"{from}\" -> \"{}\" [label=\"{a} r={:.6}\"];",
            e.next, e.reward
        );
    }
    s.push_str("}\n");
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct ValueRow {
    state_id: String,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QCsvRow {
    state_id: String,
    action: u8,
    q: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_values_csv(path: &Path, t: &ValueTables) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (s, v) in &t.v {
        w.serialize(ValueRow {
            state_id: s.to_string(),
            value: *v,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_q_csv(path: &Path, t: &ValueTables) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for ((s, a), q) in &t.q {
        w.serialize(QCsvRow {
            state_id: s.to_string(),
            action: a.0,
            q: *q,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_state_id(s: &str) -> Result<StateId> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None if s.len() == 16 => u64::from_str_radix(s, 16),
        None => s.parse(),
    };
    parsed
        .map(StateId)
        .map_err(|_| Error::Format(format!("bad state id {s:?}")))
}

#[derive(Debug, Deserialize)]
struct ReplayRow {
    episode: u64,
    from: String,
    action: u8,
    next: String,
    reward: f64,
    terminal: u8,
}

/// Reads recorded transitions with columns
/// `episode,from,action,next,reward,terminal`. Consecutive rows sharing an
/// episode number form one trajectory; its `terminal` flag comes from the
/// last row. State ids are decimal, `0x` hex, or 16-digit hex.
pub fn read_replay_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let bytes = read_artifact(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut out = Vec::new();
    let mut current: Option<(u64, Vec<TransitionSample>, bool)> = None;
    for row in reader.deserialize() {
        let row: ReplayRow = row?;
        let sample = TransitionSample::new(
            parse_state_id(&row.from)?,
            ActionId(row.action),
            parse_state_id(&row.next)?,
            row.reward,
        );
        match &mut current {
            Some((ep, samples, terminal)) if *ep == row.episode => {
                samples.push(sample);
                *terminal = row.terminal != 0;
            }
            _ => {
                if let Some((ep, samples, terminal)) = current.take() {
                    out.push(Trajectory::new(samples, terminal, ep)?);
                }
                current = Some((row.episode, vec![sample], row.terminal != 0));
            }
        }
    }
    if let Some((ep, samples, terminal)) = current {
        out.push(Trajectory::new(samples, terminal, ep)?);
    }
    Ok(out)
}

pub fn write_replay_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "from", "action", "next", "reward", "terminal"])?;
    for (i, t) in trajectories.iter().enumerate() {
        for (k, s) in t.samples.iter().enumerate() {
            let last = k + 1 == t.samples.len();
            w.write_record([
                i.to_string(),
                s.from.to_string(),
                s.action.0.to_string(),
                s.next.to_string(),
                s.reward.to_string(),
                u8::from(last && t.terminal).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

/// Applies config-file settings on top of `cfg`.
pub fn apply_config(cfg: &mut TrainConfig, settings: &BTreeMap<String, String>) -> Result<()> {
    for (k, v) in settings {
        match k.as_str() {
            "env" => cfg.env.kind = parse_value::<EnvKind>(k, v)?,
            "seed" | "env_seed" => cfg.env.seed = parse_value(k, v)?,
            "run_seed" => cfg.run_seed = parse_value(k, v)?,
            "actors" => cfg.actors = parse_value(k, v)?,
            "episodes_per_update" => cfg.episodes_per_update = parse_value(k, v)?,
            "frame_budget" | "frames" => cfg.frame_budget = parse_value(k, v)?,
            "gamma" => cfg.gamma = parse_value(k, v)?,
            "delta" => cfg.delta = parse_value(k, v)?,
            "max_iter" => cfg.max_iter = Some(parse_value(k, v)?),
            "convergence_patience" => cfg.convergence_patience = parse_value(k, v)?,
            "max_episode_steps" => cfg.max_episode_steps = Some(parse_value(k, v)?),
            "eval_episodes" => cfg.eval_episodes = parse_value(k, v)?,
            "stop_on_convergence" => cfg.stop_on_convergence = parse_value(k, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
    }
    Ok(())
}

/// The config as a file `parse_config_text` + `apply_config` reproduces.
pub fn config_to_text(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "env = {}", cfg.env.kind);
    let _ = writeln!(s, "env_seed = {}", cfg.env.seed);
    let _ = writeln!(s, "run_seed = {}", cfg.run_seed);
    let _ = writeln!(s, "actors = {}", cfg.actors);
    let _ = writeln!(s, "episodes_per_update = {}", cfg.episodes_per_update);
    let _ = writeln!(s, "frame_budget = {}", cfg.frame_budget);
    let _ = writeln!(s, "gamma = {}", cfg.gamma);
    let _ = writeln!(s, "delta = {}", cfg.delta);
    if let Some(m) = cfg.max_iter {
        let _ = writeln!(s, "max_iter = {m}");
    }
    let _ = writeln!(s, "convergence_patience = {}", cfg.convergence_patience);
    if let Some(m) = cfg.max_episode_steps {
        let _ = writeln!(s, "max_episode_steps = {m}");
    }
    let _ = writeln!(s, "eval_episodes = {}", cfg.eval_episodes);
    let _ = writeln!(s, "stop_on_convergence = {}", cfg.stop_on_convergence);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub format_version: u32,
    pub csv_schema_version: u32,
    /// `None` for runs built from a replay file.
    pub config: Option<TrainConfig>,
    pub env: Option<EnvSpec>,
    pub gamma: f64,
    pub converged_at_update: Option<usize>,
    pub learning_iterations: Option<usize>,
    pub frames_at_convergence: Option<u64>,
    pub files: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(config: Option<TrainConfig>, gamma: f64, metrics: Option<&RunMetrics>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: FORMAT_VERSION,
            csv_schema_version: CSV_SCHEMA_VERSION,
            env: config.as_ref().map(|c| c.env),
            config,
            gamma,
            converged_at_update: metrics.and_then(|m| m.converged_at_update),
            learning_iterations: metrics.and_then(|m| m.learning_iterations),
            frames_at_convergence: metrics.and_then(|m| m.frames_at_convergence),
            files: Vec::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digests `names` inside `dir` and writes the manifest next to them.
pub fn write_manifest(dir: &Path, manifest: &mut RunManifest, names: &[&str]) -> Result<()> {
    manifest.files = names
        .iter()
        .map(|n| {
            let bytes = fs::read(dir.join(n))?;
            Ok(FileDigest {
                name: n.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_>>()?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&read_artifact(
        &dir.join(MANIFEST_FILE),
    )?)?)
}

/// Names of files whose digest no longer matches the manifest.
pub fn verify_manifest(dir: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for f in &manifest.files {
        match fs::read(dir.join(&f.name)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            _ => bad.push(f.name.clone()),
        }
    }
    Ok(bad)
}

pub fn write_observations(path: &Path, obs: &BTreeMap<StateId, Obs>) -> Result<()> {
    let list: Vec<(String, &Obs)> = obs.iter().map(|(s, o)| (s.to_string(), o)).collect();
    fs::write(path, serde_json::to_string(&list)?)?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<BTreeMap<StateId, Obs>> {
    let list: Vec<(String, Obs)> = serde_json::from_slice(&read_artifact(path)?)?;
    list.into_iter()
        .map(|(s, o)| Ok((parse_state_id(&s)?, o)))
        .collect()
}

/// Everything `train` or `train --replay` leaves in a run directory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub graph: HighwayGraph,
    pub tables: ValueTables,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        Ok(Self {
            graph: load_graph(&dir.join(GRAPH_FILE))?,
            tables: load_tables(&dir.join(TABLES_FILE))?,
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    pub fn observations(&self) -> Result<BTreeMap<StateId, Obs>> {
        read_observations(&self.dir.join(OBSERVATIONS_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;
    use crate::highway_graph::fixtures::random_graph;
    use crate::reparam::ApproxConfig;
    use crate::value_iteration::value_update_loop;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_graph(seed: u64) -> (HighwayGraph, ValueTables) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 12, 0.95);
        let t = value_update_loop(&g, 10_000, 1e-9);
        (g, t)
    }

    #[test]
    fn graph_and_tables_round_trip() {
        for seed in 0..20 {
            let (g, t) = sample_graph(seed);
            let g2 = decode_graph(&encode_graph(&g)).unwrap();
            assert_eq!(g.highways(), g2.highways());
            assert_eq!(g.intersections(), g2.intersections());
            assert_eq!(g.revision(), g2.revision());
            assert_eq!(g.next_id(), g2.next_id());
            g2.check_invariants().unwrap();
            assert_eq!(decode_tables(&encode_tables(&t)).unwrap(), t);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (g, t) = sample_graph(1);
        let bytes = encode_graph(&g);
        assert!(decode_graph(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_graph(&encode_tables(&t)).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            decode_graph(&wrong_version),
            Err(Error::Format(_))
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_graph(&trailing).is_err());
        assert!(decode_graph(b"HG").is_err());
    }

    #[test]
    fn approximator_round_trip() {
        let m = QApproximator::new(
            5,
            3,
            ApproxConfig {
                hidden_units: 7,
                ..ApproxConfig::default()
            },
        );
        let back = decode_approximator(&encode_approximator(&m)).unwrap();
        assert_eq!(back, m);
        let bytes = encode_approximator(&m);
        assert!(decode_approximator(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn projector_round_trip_keeps_ids() {
        let p = RandomProjector::new(3, 4, 5, 21);
        let back = decode_projector(&encode_projector(&p)).unwrap();
        assert_eq!(back, p);
        let seq = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0]];
        assert_eq!(
            back.encode_sequence(&seq).unwrap(),
            p.encode_sequence(&seq).unwrap()
        );
    }

    #[test]
    fn missing_file_is_reported_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_graph(&dir.path().join("nope.bin")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn state_ids_parse_in_every_notation() {
        let s = StateId(0x00ab_cdef_0123_4567);
        assert_eq!(parse_state_id(&s.to_string()).unwrap(), s);
        assert_eq!(parse_state_id("0x1f").unwrap(), StateId(31));
        assert_eq!(parse_state_id("31").unwrap(), StateId(31));
        assert!(parse_state_id("zz").is_err());
    }

    #[test]
    fn replay_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.csv");
        let a = ActionId(1);
        let t1 = Trajectory::new(
            vec![
                TransitionSample::new(StateId(1), a, StateId(2), 0.5),
                TransitionSample::new(StateId(2), a, StateId(3), -1.0),
            ],
            true,
            0,
        )
        .unwrap();
        let t2 = Trajectory::new(
            vec![TransitionSample::new(
                StateId(1),
                ActionId(0),
                StateId(9),
                0.0,
            )],
            false,
            1,
        )
        .unwrap();
        write_replay_csv(&path, &[t1.clone(), t2.clone()]).unwrap();
        let back = read_replay_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].samples, t1.samples);
        assert!(back[0].terminal);
        assert_eq!(back[1].samples, t2.samples);
        assert!(!back[1].terminal);
    }

    #[test]
    fn hand_written_replay_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(
            &path,
            "episode,from,action,next,reward,terminal\n0, 1, 0, 2, 0.0, 0\n0, 2, 0, 3, 1.0, 1\n",
        )
        .unwrap();
        let t = read_replay_csv(&path).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 2);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::new(EnvSpec::maze(5, 5, 3));
        cfg.run_seed = 77;
        cfg.max_iter = Some(123);
        cfg.gamma = 0.95;
        let text = config_to_text(&cfg);
        let mut back = TrainConfig::new(EnvSpec::cliff_walking());
        apply_config(&mut back, &parse_config_text(&text).unwrap()).unwrap();
        assert_eq!(back.env, cfg.env);
        assert_eq!(back.run_seed, 77);
        assert_eq!(back.max_iter, Some(123));
        assert_eq!(back.gamma, 0.95);
    }

    #[test]
    fn config_errors_are_config_errors() {
        assert!(matches!(
            parse_config_text("nonsense"),
            Err(Error::Config(_))
        ));
        let mut cfg = TrainConfig::new(EnvSpec::cliff_walking());
        let bad = parse_config_text("gamma = lots\n").unwrap();
        assert!(matches!(
            apply_config(&mut cfg, &bad),
            Err(Error::Config(_))
        ));
        let unknown = parse_config_text("# note\ncolour = red\n").unwrap();
        assert!(matches!(
            apply_config(&mut cfg, &unknown),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_digests_detect_changes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let mut m = RunManifest::new(None, 0.99, None);
        write_manifest(dir.path(), &mut m, &["a.txt"]).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            m.files[0].sha256,
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert!(verify_manifest(dir.path(), &back).unwrap().is_empty());
        fs::write(dir.path().join("a.txt"), "hellO").unwrap();
        assert_eq!(verify_manifest(dir.path(), &back).unwrap(), vec!["a.txt"]);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let mut cfg = TrainConfig::new(EnvSpec::maze(3, 3, 0));
        cfg.frame_budget = 500;
        let out = crate::trainer::train(&cfg).unwrap();
        write_metrics_csv(&path, &out.metrics.rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), out.metrics.rows);
    }

    #[test]
    fn dot_lists_every_intersection_and_highway() {
        let (g, t) = sample_graph(2);
        let dot = graph_to_dot(&g, Some(&t));
        assert_eq!(dot.matches(" -> ").count(), g.highways().len());
        assert_eq!(dot.matches("V=").count(), g.intersections().len());
        let e = g.expand_to_empirical();
        let edot = empirical_to_dot(&e, None);
        assert_eq!(edot.matches(" -> ").count(), e.edge_count());
    }
}
