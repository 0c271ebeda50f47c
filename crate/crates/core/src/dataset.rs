//! Scene data model, a deterministic synthetic distribution-shift generator,
//! and the JSON-Lines on-disk format.
//!
//! Scenes hold agent tracks split into an observed history (full state per
//! step) and a ground-truth future (positions only). Each scene carries a
//! binary OOD label and a split tag. The generator produces two motion
//! regimes — in-distribution and shifted — that differ in turn-rate
//! statistics, process noise and speed range, with discrete maneuver
//! branches (straight / left / right) so futures are genuinely multi-modal.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One observed agent state: position, velocity, acceleration, type flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub is_pedestrian: bool,
}

/// One agent: observed history of states plus ground-truth future positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: u64,
    pub history: Vec<AgentState>,
    pub future: Vec<[f64; 2]>,
}

impl AgentTrack {
    pub fn is_pedestrian(&self) -> bool {
        self.history.first().is_some_and(|s| s.is_pedestrian)
    }

    /// Last observed position, the anchor of the agent-relative frame.
    pub fn last_position(&self) -> [f64; 2] {
        let s = self.history.last().expect("history is non-empty");
        [s.x, s.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

/// One traffic scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub agents: Vec<AgentTrack>,
    /// true = out-of-distribution.
    pub ood_label: bool,
    pub split: Split,
}

/// Motion-regime parameters. Angles are radians, speeds m/s.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Turn-rate magnitude range for the left/right maneuver branches (rad/s).
    pub turn_rate_min: f64,
    pub turn_rate_max: f64,
    /// Std of per-step additive heading noise (rad).
    pub heading_noise_std: f64,
    /// Std of per-step speed jitter (m/s).
    pub speed_noise_std: f64,
    pub p_straight: f64,
    pub p_left: f64,
    pub p_right: f64,
}

impl RegimeConfig {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad(format!("{name}: speed range must satisfy 0 < min <= max"));
        }
        if !(self.turn_rate_min >= 0.0 && self.turn_rate_max >= self.turn_rate_min) {
            return bad(format!("{name}: turn-rate range must satisfy 0 <= min <= max"));
        }
        if self.heading_noise_std < 0.0 || self.speed_noise_std < 0.0 {
            return bad(format!("{name}: noise levels must be non-negative"));
        }
        let probs = [self.p_straight, self.p_left, self.p_right];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("{name}: branch probabilities must lie in [0, 1]"));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("{name}: branch probabilities must sum to 1"));
        }
        Ok(())
    }
}

/// Configuration of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub t_h: usize,
    pub t_f: usize,
    pub sample_rate_hz: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub ood_fraction_dev: f64,
    pub ood_fraction_eval: f64,
    pub seed: u64,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Probability that an agent is a pedestrian (zero acceleration, no
    /// maneuver branching).
    pub pedestrian_prob: f64,
    pub id_regime: RegimeConfig,
    pub ood_regime: RegimeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            t_h: 25,
            t_f: 25,
            sample_rate_hz: 5.0,
            n_train: 2000,
            n_dev: 500,
            n_eval: 500,
            ood_fraction_dev: 0.4,
            ood_fraction_eval: 0.4,
            seed: 7,
            agents_min: 1,
            agents_max: 4,
            pedestrian_prob: 0.1,
            id_regime: RegimeConfig {
                speed_min: 2.0,
                speed_max: 20.0,
                turn_rate_min: 0.15,
                turn_rate_max: 0.45,
                heading_noise_std: 0.01,
                speed_noise_std: 0.05,
                p_straight: 0.5,
                p_left: 0.25,
                p_right: 0.25,
            },
            ood_regime: RegimeConfig {
                speed_min: 6.0,
                speed_max: 30.0,
                turn_rate_min: 0.6,
                turn_rate_max: 1.4,
                heading_noise_std: 0.12,
                speed_noise_std: 0.5,
                p_straight: 0.2,
                p_left: 0.4,
                p_right: 0.4,
            },
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_h < 2 {
            return Err(Error::Config("t_h must be >= 2".into()));
        }
        if self.t_f < 1 {
            return Err(Error::Config("t_f must be >= 1".into()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config("sample_rate_hz must be positive".into()));
        }
        for (name, n) in [("n_train", self.n_train), ("n_dev", self.n_dev), ("n_eval", self.n_eval)] {
            if n < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, f) in [
            ("ood_fraction_dev", self.ood_fraction_dev),
            ("ood_fraction_eval", self.ood_fraction_eval),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.agents_min < 1 || self.agents_max < self.agents_min {
            return Err(Error::Config("agent count range must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_prob) {
            return Err(Error::Config("pedestrian_prob must lie in [0, 1]".into()));
        }
        self.id_regime.validate("id_regime")?;
        self.ood_regime.validate("ood_regime")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Maneuver {
    Straight,
    Left,
    Right,
}

/// Generates the full train/dev/eval dataset. Pure function of the config.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<Scene>> {
    Ok(generate_with_maneuvers(config)?.0)
}

/// Same as [`generate_dataset`] but also returns the maneuver branch taken
/// by every vehicle agent, for distribution checks.
pub(crate) fn generate_with_maneuvers(
    config: &DatasetConfig,
) -> Result<(Vec<Scene>, Vec<Maneuver>)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.n_train + config.n_dev + config.n_eval);
    let mut maneuvers = Vec::new();
    let mut next_id = 0u64;
    for (split, n, frac) in [
        (Split::Train, config.n_train, 0.0),
        (Split::Dev, config.n_dev, config.ood_fraction_dev),
        (Split::Eval, config.n_eval, config.ood_fraction_eval),
    ] {
        let n_ood = (frac * n as f64).round() as usize;
        for i in 0..n {
            let ood = i < n_ood;
            scenes.push(gen_scene(config, next_id, split, ood, &mut rng, &mut maneuvers));
            next_id += 1;
        }
    }
    Ok((scenes, maneuvers))
}

fn gen_scene(
    config: &DatasetConfig,
    scene_id: u64,
    split: Split,
    ood: bool,
    rng: &mut ChaCha12Rng,
    maneuvers: &mut Vec<Maneuver>,
) -> Scene {
    let regime = if ood { &config.ood_regime } else { &config.id_regime };
    let n_agents = rng.random_range(config.agents_min..=config.agents_max);
    let agents = (0..n_agents)
        .map(|aid| {
            let is_ped = rng.random_bool(config.pedestrian_prob);
            if is_ped {
                gen_pedestrian(config, aid as u64, rng)
            } else {
                let (track, m) = gen_vehicle(config, regime, aid as u64, rng);
                maneuvers.push(m);
                track
            }
        })
        .collect();
    Scene { scene_id, agents, ood_label: ood, split }
}

/// Unicycle rollout: straight (plus heading noise) over the observed part,
/// then one sampled maneuver branch over the future. Two warm-up steps are
/// simulated so the first history state has finite-difference velocity and
/// acceleration.
fn gen_vehicle(
    config: &DatasetConfig,
    regime: &RegimeConfig,
    agent_id: u64,
    rng: &mut ChaCha12Rng,
) -> (AgentTrack, Maneuver) {
    let dt = 1.0 / config.sample_rate_hz;
    let base_speed = rng.random_range(regime.speed_min..=regime.speed_max);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pos = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];

    let u: f64 = rng.random_range(0.0..1.0);
    let maneuver = if u < regime.p_straight {
        Maneuver::Straight
    } else if u < regime.p_straight + regime.p_left {
        Maneuver::Left
    } else {
        Maneuver::Right
    };
    let turn_mag = if regime.turn_rate_max > regime.turn_rate_min {
        rng.random_range(regime.turn_rate_min..=regime.turn_rate_max)
    } else {
        regime.turn_rate_min
    };
    let omega = match maneuver {
        Maneuver::Straight => 0.0,
        Maneuver::Left => turn_mag,
        Maneuver::Right => -turn_mag,
    };

    let heading_noise = Normal::new(0.0, regime.heading_noise_std).expect("valid std");
    let speed_noise = Normal::new(0.0, regime.speed_noise_std).expect("valid std");

    // Positions 0 .. t_h+1 are warm-up + history (straight phase), the rest
    // the maneuver phase.
    let total = config.t_h + config.t_f + 2;
    let mut positions = Vec::with_capacity(total);
    positions.push(pos);
    for step in 1..total {
        let in_future = step > config.t_h + 1;
        let w = if in_future { omega } else { 0.0 };
        heading += w * dt + heading_noise.sample(rng);
        let speed = (base_speed + speed_noise.sample(rng)).clamp(regime.speed_min, regime.speed_max);
        pos[0] += speed * heading.cos() * dt;
        pos[1] += speed * heading.sin() * dt;
        positions.push(pos);
    }
    (track_from_positions(&positions, config, agent_id, false), maneuver)
}

/// Pedestrians walk a straight constant-velocity line; acceleration is zero
/// by construction and forced to exact zero in the emitted states.
fn gen_pedestrian(config: &DatasetConfig, agent_id: u64, rng: &mut ChaCha12Rng) -> AgentTrack {
    let dt = 1.0 / config.sample_rate_hz;
    let speed = rng.random_range(0.5..2.0);
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let start = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
    let step = [speed * heading.cos() * dt, speed * heading.sin() * dt];
    let total = config.t_h + config.t_f + 2;
    let positions: Vec<[f64; 2]> = (0..total)
        .map(|i| [start[0] + step[0] * i as f64, start[1] + step[1] * i as f64])
        .collect();
    track_from_positions(&positions, config, agent_id, true)
}

/// Builds the track from a position rollout: velocities and accelerations
/// are finite differences at the configured sample rate, and the first two
/// positions are consumed as warm-up.
fn track_from_positions(
    positions: &[[f64; 2]],
    config: &DatasetConfig,
    agent_id: u64,
    is_pedestrian: bool,
) -> AgentTrack {
    let rate = config.sample_rate_hz;
    let vel = |t: usize| {
        [
            (positions[t][0] - positions[t - 1][0]) * rate,
            (positions[t][1] - positions[t - 1][1]) * rate,
        ]
    };
    let history = (2..config.t_h + 2)
        .map(|t| {
            let v = vel(t);
            let vp = vel(t - 1);
            let (ax, ay) = if is_pedestrian {
                (0.0, 0.0)
            } else {
                ((v[0] - vp[0]) * rate, (v[1] - vp[1]) * rate)
            };
            AgentState {
                x: positions[t][0],
                y: positions[t][1],
                vx: v[0],
                vy: v[1],
                ax,
                ay,
                is_pedestrian,
            }
        })
        .collect();
    let future = positions[config.t_h + 2..].to_vec();
    AgentTrack { agent_id, history, future }
}

// ---------------------------------------------------------------------------
// JSON Lines serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetaLine {
    schema: u32,
    t_h: usize,
    t_f: usize,
    rate_hz: f64,
}

#[derive(Serialize, Deserialize)]
struct AgentLine {
    id: u64,
    ped: bool,
    hist: Vec<[f64; 6]>,
    fut: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_id: u64,
    split: Split,
    ood: u8,
    agents: Vec<AgentLine>,
}

/// Dataset-level header stored on the metadata line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub t_h: usize,
    pub t_f: usize,
    pub rate_hz: f64,
}

impl DatasetMeta {
    pub fn of_config(c: &DatasetConfig) -> Self {
        DatasetMeta { t_h: c.t_h, t_f: c.t_f, rate_hz: c.sample_rate_hz }
    }
}

/// Writes scenes as JSON Lines: one metadata line, then one scene per line.
/// Parent directories are created when missing.
pub fn write_dataset(scenes: &[Scene], meta: DatasetMeta, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let meta_line = MetaLine {
        schema: SCHEMA_VERSION,
        t_h: meta.t_h,
        t_f: meta.t_f,
        rate_hz: meta.rate_hz,
    };
    serde_json::to_writer(&mut w, &meta_line).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for scene in scenes {
        let line = SceneLine {
            scene_id: scene.scene_id,
            split: scene.split,
            ood: scene.ood_label as u8,
            agents: scene
                .agents
                .iter()
                .map(|a| AgentLine {
                    id: a.agent_id,
                    ped: a.is_pedestrian(),
                    hist: a
                        .history
                        .iter()
                        .map(|s| [s.x, s.y, s.vx, s.vy, s.ax, s.ay])
                        .collect(),
                    fut: a.future.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dataset file, validating every record. Errors carry the 1-based
/// line number of the offending record.
pub fn read_dataset(path: &Path) -> Result<(Vec<Scene>, DatasetMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(BufReader::new(file), path)
}

/// Reader-based variant of [`read_dataset`]; `origin` only labels errors.
pub fn read_dataset_from(reader: impl BufRead, origin: &Path) -> Result<(Vec<Scene>, DatasetMeta)> {
    let perr = |line: usize, msg: String| Error::Parse { path: origin.to_path_buf(), line, msg };
    let mut lines = reader.lines().enumerate();

    let meta: MetaLine = loop {
        match lines.next() {
            Some((idx, line)) => {
                let line = line.map_err(|e| Error::io(origin, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| perr(idx + 1, e.to_string()))?;
            }
            None => {
                return Err(perr(1, "empty file: missing metadata line".into()));
            }
        }
    };
    if meta.schema != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "dataset schema {} unsupported, expected {SCHEMA_VERSION}",
            meta.schema
        )));
    }
    if meta.t_h < 2 || meta.t_f < 1 || !(meta.rate_hz.is_finite() && meta.rate_hz > 0.0) {
        return Err(Error::Schema("metadata line has invalid horizons or rate".into()));
    }

    let mut scenes = Vec::new();
    let mut seen_ids = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: SceneLine =
            serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        let scene = scene_from_line(record, &meta).map_err(|msg| perr(lineno, msg))?;
        if !seen_ids.insert(scene.scene_id) {
            return Err(perr(lineno, format!("duplicate scene_id {}", scene.scene_id)));
        }
        scenes.push(scene);
    }
    Ok((scenes, DatasetMeta { t_h: meta.t_h, t_f: meta.t_f, rate_hz: meta.rate_hz }))
}

fn scene_from_line(record: SceneLine, meta: &MetaLine) -> std::result::Result<Scene, String> {
    if record.ood > 1 {
        return Err(format!("ood flag must be 0 or 1, got {}", record.ood));
    }
    let ood_label = record.ood == 1;
    if record.split == Split::Train && ood_label {
        return Err("train split must not contain OOD scenes".into());
    }
    if record.agents.is_empty() {
        return Err("scene has no agents".into());
    }
    let mut agent_ids = std::collections::BTreeSet::new();
    let mut agents = Vec::with_capacity(record.agents.len());
    for a in record.agents {
        if !agent_ids.insert(a.id) {
            return Err(format!("duplicate agent id {} within scene", a.id));
        }
        if a.hist.len() != meta.t_h {
            return Err(format!(
                "agent {}: history has {} steps, metadata declares {}",
                a.id,
                a.hist.len(),
                meta.t_h
            ));
        }
        if a.fut.len() != meta.t_f {
            return Err(format!(
                "agent {}: future has {} steps, metadata declares {}",
                a.id,
                a.fut.len(),
                meta.t_f
            ));
        }
        let mut history = Vec::with_capacity(a.hist.len());
        for row in &a.hist {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(format!("agent {}: non-finite history value", a.id));
            }
            if a.ped && (row[4] != 0.0 || row[5] != 0.0) {
                return Err(format!("agent {}: pedestrian with non-zero acceleration", a.id));
            }
            history.push(AgentState {
                x: row[0],
                y: row[1],
                vx: row[2],
                vy: row[3],
                ax: row[4],
                ay: row[5],
                is_pedestrian: a.ped,
            });
        }
        for p in &a.fut {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(format!("agent {}: non-finite future position", a.id));
            }
        }
        agents.push(AgentTrack { agent_id: a.id, history, future: a.fut });
    }
    Ok(Scene { scene_id: record.scene_id, agents, ood_label, split: record.split })
}
