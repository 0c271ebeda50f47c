//! Scene encoder: one translation-invariant latent feature vector per agent.
//!
//! Each agent's history is flattened into consecutive-step displacements plus
//! per-step velocity, acceleration and type flag — absolute positions never
//! enter. A track network embeds the agent itself; a second network embeds
//! the mean-pooled summaries of agents whose last observed position lies
//! inside the neighbor radius, each augmented with its relative offset. The
//! two branch outputs are summed. Agents without neighbors skip the neighbor
//! branch entirely, so a lone agent's feature is exactly the track branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AgentTrack, Scene};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, NetCheckpoint};

/// Hidden width of both encoder branches.
const HIDDEN: usize = 64;

/// Length of a preprocessed track vector for a given history length.
pub const fn preprocessed_len(t_h: usize) -> usize {
    (t_h - 1) * 2 + t_h * 5
}

/// Latent feature vector of one agent in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature {
    pub scene_id: u64,
    pub agent_id: u64,
    pub h: Vec<f64>,
}

/// Flattens a history into displacements and per-step state features.
/// Layout: (t_h - 1) displacement pairs, then t_h blocks of
/// `[vx, vy, ax, ay, is_pedestrian]`.
pub fn preprocess_track(track: &AgentTrack) -> Result<Vec<f64>> {
    let t_h = track.history.len();
    if t_h < 2 {
        return Err(Error::Dim(format!(
            "history of agent {} has {} steps, need at least 2",
            track.agent_id, t_h
        )));
    }
    let mut out = Vec::with_capacity(preprocessed_len(t_h));
    for w in track.history.windows(2) {
        out.push(w[1].x - w[0].x);
        out.push(w[1].y - w[0].y);
    }
    for s in &track.history {
        out.push(s.vx);
        out.push(s.vy);
        out.push(s.ax);
        out.push(s.ay);
        out.push(if s.is_pedestrian { 1.0 } else { 0.0 });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    /// Branch over the agent's own preprocessed history.
    pub track_net: DenseNet,
    /// Branch over the pooled neighbor summary (preprocessed vector plus
    /// relative offset of the neighbor's last position).
    pub neighbor_net: DenseNet,
    /// Neighbor radius in meters; agents strictly inside count.
    pub radius: f64,
    pub t_h: usize,
    pub feature_dim: usize,
}

impl EncoderModel {
    pub fn new<R: Rng>(t_h: usize, feature_dim: usize, radius: f64, rng: &mut R) -> Self {
        let pre = preprocessed_len(t_h);
        let acts = [Activation::Relu, Activation::Identity];
        EncoderModel {
            track_net: DenseNet::new(&[pre, HIDDEN, feature_dim], &acts, rng),
            neighbor_net: DenseNet::new(&[pre + 2, HIDDEN, feature_dim], &acts, rng),
            radius,
            t_h,
            feature_dim,
        }
    }

    /// Encodes every agent of a scene.
    pub fn encode_scene(&self, scene: &Scene) -> Result<Vec<LatentFeature>> {
        let pres = scene
            .agents
            .iter()
            .map(preprocess_track)
            .collect::<Result<Vec<_>>>()?;
        scene
            .agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                let summary = neighbor_summary(scene, &pres, i, self.radius);
                let h = self.encode_agent(&pres[i], summary.as_deref())?;
                Ok(LatentFeature { scene_id: scene.scene_id, agent_id: agent.agent_id, h })
            })
            .collect()
    }

    /// Combines the two branches for one agent given its preprocessed vector
    /// and (optionally) a pooled neighbor summary.
    pub fn encode_agent(&self, pre: &[f64], summary: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut h = self.track_net.forward(pre)?;
        if let Some(s) = summary {
            let nb = self.neighbor_net.forward(s)?;
            for (a, b) in h.iter_mut().zip(&nb) {
                *a += b;
            }
        }
        Ok(h)
    }
}

/// Mean-pooled neighbor summary for agent `idx`, or `None` when no other
/// agent's last observed position lies strictly inside the radius.
pub fn neighbor_summary(
    scene: &Scene,
    pres: &[Vec<f64>],
    idx: usize,
    radius: f64,
) -> Option<Vec<f64>> {
    let anchor = scene.agents[idx].last_position();
    let mut pooled: Option<Vec<f64>> = None;
    let mut count = 0.0;
    for (j, other) in scene.agents.iter().enumerate() {
        if j == idx {
            continue;
        }
        let p = other.last_position();
        let off = [p[0] - anchor[0], p[1] - anchor[1]];
        if (off[0] * off[0] + off[1] * off[1]).sqrt() >= radius {
            continue;
        }
        let acc = pooled.get_or_insert_with(|| vec![0.0; pres[j].len() + 2]);
        for (a, v) in acc.iter_mut().zip(pres[j].iter().chain(off.iter())) {
            *a += v;
        }
        count += 1.0;
    }
    pooled.map(|mut acc| {
        for v in acc.iter_mut() {
            *v /= count;
        }
        acc
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub schema: u32,
    pub kind: String,
    pub t_h: usize,
    pub feature_dim: usize,
    pub radius: f64,
    pub track_net: NetCheckpoint,
    pub neighbor_net: NetCheckpoint,
    pub config_fingerprint: String,
}

impl EncoderModel {
    pub fn checkpoint(&self, fingerprint: &str) -> EncoderCheckpoint {
        EncoderCheckpoint {
            schema: crate::dataset::SCHEMA_VERSION,
            kind: "encoder".into(),
            t_h: self.t_h,
            feature_dim: self.feature_dim,
            radius: self.radius,
            track_net: self.track_net.checkpoint(),
            neighbor_net: self.neighbor_net.checkpoint(),
            config_fingerprint: fingerprint.into(),
        }
    }

    pub fn from_checkpoint(ck: &EncoderCheckpoint) -> Result<Self> {
        if ck.schema != crate::dataset::SCHEMA_VERSION || ck.kind != "encoder" {
            return Err(Error::Schema(format!(
                "not an encoder checkpoint (kind {:?}, schema {})",
                ck.kind, ck.schema
            )));
        }
        if ck.t_h < 2 || ck.feature_dim == 0 || !ck.radius.is_finite() || ck.radius < 0.0 {
            return Err(Error::Schema("encoder checkpoint has invalid dimensions".into()));
        }
        let track_net = DenseNet::from_checkpoint(&ck.track_net)?;
        let neighbor_net = DenseNet::from_checkpoint(&ck.neighbor_net)?;
        if track_net.input_dim() != preprocessed_len(ck.t_h)
            || neighbor_net.input_dim() != preprocessed_len(ck.t_h) + 2
            || track_net.output_dim() != ck.feature_dim
            || neighbor_net.output_dim() != ck.feature_dim
        {
            return Err(Error::Schema("encoder checkpoint nets do not match t_h / feature_dim".into()));
        }
        Ok(EncoderModel {
            track_net,
            neighbor_net,
            radius: ck.radius,
            t_h: ck.t_h,
            feature_dim: ck.feature_dim,
        })
    }
}
