//! Mixture-density trajectory decoder and its negative log-likelihood loss.
//!
//! Three heads sit on the latent feature vector: unnormalized mode logits,
//! per-step mean displacements, and pre-scale values. The decoded prediction
//! is a K-mode mixture of per-step isotropic bivariate Gaussians in the
//! agent-relative frame anchored at the last observed position: mode means
//! are cumulative sums of the displacement outputs, standard deviations are
//! `SIGMA_MIN + softplus(raw)`, and mixing weights are the softmax of the
//! logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, ForwardCache, NetCheckpoint};

/// Floor for predicted standard deviations.
pub const SIGMA_MIN: f64 = 1e-3;
/// Floor applied to mixing weights inside the log-sum-exp so dead modes keep
/// finite gradients.
pub const PI_FLOOR: f64 = 1e-12;

pub const LOG_2PI: f64 = 1.8378770664093453;

/// K-mode mixture output for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    /// Mixing weights, length K, non-negative, summing to 1.
    pub pi: Vec<f64>,
    /// Mean positions per mode and step, meters, agent-relative frame.
    pub mu: Vec<Vec<[f64; 2]>>,
    /// Per-step isotropic standard deviations per mode, >= SIGMA_MIN.
    pub sigma: Vec<Vec<f64>>,
}

impl MixturePrediction {
    pub fn n_modes(&self) -> usize {
        self.pi.len()
    }

    pub fn horizon(&self) -> usize {
        self.mu.first().map_or(0, |m| m.len())
    }

    fn validate(&self, gt_len: Option<usize>) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::Dim("prediction arrays disagree on mode count".into()));
        }
        let t = self.horizon();
        if t == 0 {
            return Err(Error::Dim("prediction has zero horizon".into()));
        }
        if let Some(n) = gt_len {
            if n != t {
                return Err(Error::Dim(format!(
                    "ground truth has {n} steps, prediction {t}"
                )));
            }
        }
        for kk in 0..k {
            if self.mu[kk].len() != t || self.sigma[kk].len() != t {
                return Err(Error::Dim("modes disagree on horizon".into()));
            }
            if self.sigma[kk].iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Numeric("non-positive or non-finite sigma".into()));
            }
            if self.mu[kk].iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite mean".into()));
            }
        }
        if self.pi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Numeric("invalid mixing weight".into()));
        }
        Ok(())
    }
}

/// Decoder heads over the latent feature.
#[derive(Debug, Clone)]
pub struct PredictorModel {
    /// H -> K unnormalized logits (three layers).
    pub weight_head: DenseNet,
    /// H -> K * T_f * 2 per-step mean displacements (two layers).
    pub mean_head: DenseNet,
    /// H -> K * T_f pre-scale values (two layers).
    pub scale_head: DenseNet,
    pub n_modes: usize,
    pub horizon: usize,
    pub feature_dim: usize,
}

const HIDDEN: usize = 64;

impl PredictorModel {
    pub fn new<R: Rng>(feature_dim: usize, n_modes: usize, horizon: usize, rng: &mut R) -> Self {
        let relu = Activation::Relu;
        let id = Activation::Identity;
        PredictorModel {
            weight_head: DenseNet::new(&[feature_dim, HIDDEN, HIDDEN, n_modes], &[relu, relu, id], rng),
            mean_head: DenseNet::new(&[feature_dim, HIDDEN, n_modes * horizon * 2], &[relu, id], rng),
            scale_head: DenseNet::new(&[feature_dim, HIDDEN, n_modes * horizon], &[relu, id], rng),
            n_modes,
            horizon,
            feature_dim,
        }
    }

    /// Decodes one latent feature into a mixture prediction.
    pub fn decode(&self, h: &[f64]) -> Result<MixturePrediction> {
        let logits = self.weight_head.forward(h)?;
        let disp = self.mean_head.forward(h)?;
        let raw = self.scale_head.forward(h)?;
        Ok(self.assemble(&logits, &disp, &raw))
    }

    /// Decode keeping the head caches for backpropagation.
    pub fn decode_cached(&self, h: &[f64]) -> Result<(MixturePrediction, DecodeCache)> {
        let weight = self.weight_head.forward_cached(h)?;
        let mean = self.mean_head.forward_cached(h)?;
        let scale = self.scale_head.forward_cached(h)?;
        let pred = self.assemble(weight.output(), mean.output(), scale.output());
        Ok((pred, DecodeCache { weight, mean, scale }))
    }

    /// Output transforms: softmax over logits, cumulative-sum means,
    /// floored softplus scales.
    pub fn assemble(&self, logits: &[f64], disp: &[f64], raw: &[f64]) -> MixturePrediction {
        let (k, t) = (self.n_modes, self.horizon);
        debug_assert_eq!(logits.len(), k);
        debug_assert_eq!(disp.len(), k * t * 2);
        debug_assert_eq!(raw.len(), k * t);
        let pi = softmax(logits);
        let mut mu = Vec::with_capacity(k);
        let mut sigma = Vec::with_capacity(k);
        for kk in 0..k {
            let mut mode = Vec::with_capacity(t);
            let mut acc = [0.0f64, 0.0];
            for tt in 0..t {
                let base = (kk * t + tt) * 2;
                acc[0] += disp[base];
                acc[1] += disp[base + 1];
                mode.push(acc);
            }
            mu.push(mode);
            sigma.push((0..t).map(|tt| SIGMA_MIN + softplus(raw[kk * t + tt])).collect());
        }
        MixturePrediction { pi, mu, sigma }
    }
}

/// Cached head activations from [`PredictorModel::decode_cached`].
pub struct DecodeCache {
    pub weight: ForwardCache,
    pub mean: ForwardCache,
    pub scale: ForwardCache,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Negative log-likelihood of the ground-truth future under the mixture,
/// computed in log space with a log-sum-exp over modes.
pub fn mixture_nll(pred: &MixturePrediction, gt: &[[f64; 2]]) -> Result<f64> {
    pred.validate(Some(gt.len()))?;
    if gt.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite ground truth".into()));
    }
    let scored = mode_scores(pred, gt);
    Ok(-log_sum_exp(&scored))
}

/// Per-mode log(pi_k) + log-likelihood terms.
fn mode_scores(pred: &MixturePrediction, gt: &[[f64; 2]]) -> Vec<f64> {
    pred.pi
        .iter()
        .enumerate()
        .map(|(k, &pi)| pi.max(PI_FLOOR).ln() + mode_log_likelihood(pred, k, gt))
        .collect()
}

fn mode_log_likelihood(pred: &MixturePrediction, k: usize, gt: &[[f64; 2]]) -> f64 {
    let mut ll = 0.0;
    for (t, y) in gt.iter().enumerate() {
        let mu = pred.mu[k][t];
        let s = pred.sigma[k][t];
        let d2 = (y[0] - mu[0]).powi(2) + (y[1] - mu[1]).powi(2);
        ll += -LOG_2PI - 2.0 * s.ln() - d2 / (2.0 * s * s);
    }
    ll
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Gradients of [`mixture_nll`] with respect to the decoder head outputs:
/// mode logits (through the softmax), mean positions, and pre-scale values
/// (through the floored softplus).
#[derive(Debug, Clone)]
pub struct MixtureNllGrads {
    pub wrt_logits: Vec<f64>,
    pub wrt_mu: Vec<Vec<[f64; 2]>>,
    pub wrt_sigma_raw: Vec<Vec<f64>>,
}

impl MixtureNllGrads {
    /// Gradient with respect to the mean head's flat displacement outputs:
    /// the reverse cumulative sum of the position gradients.
    pub fn displacement_grads(&self) -> Vec<f64> {
        let k = self.wrt_mu.len();
        let t = self.wrt_mu.first().map_or(0, |m| m.len());
        let mut out = vec![0.0; k * t * 2];
        for kk in 0..k {
            let mut acc = [0.0f64, 0.0];
            for tt in (0..t).rev() {
                acc[0] += self.wrt_mu[kk][tt][0];
                acc[1] += self.wrt_mu[kk][tt][1];
                let base = (kk * t + tt) * 2;
                out[base] = acc[0];
                out[base + 1] = acc[1];
            }
        }
        out
    }

    /// Flat pre-scale gradient in scale-head output order.
    pub fn sigma_raw_flat(&self) -> Vec<f64> {
        self.wrt_sigma_raw.iter().flatten().cloned().collect()
    }
}

pub fn mixture_nll_grad(pred: &MixturePrediction, gt: &[[f64; 2]]) -> Result<MixtureNllGrads> {
    pred.validate(Some(gt.len()))?;
    let scored = mode_scores(pred, gt);
    let lse = log_sum_exp(&scored);
    if !lse.is_finite() {
        return Err(Error::Numeric("non-finite mixture likelihood".into()));
    }
    let k = pred.n_modes();
    let t = pred.horizon();
    // Posterior responsibility of each mode.
    let resp: Vec<f64> = scored.iter().map(|&s| (s - lse).exp()).collect();
    // Modes below the pi floor are constant w.r.t. pi, so they drop out of
    // the softmax chain.
    let live_resp: f64 = pred
        .pi
        .iter()
        .zip(&resp)
        .filter(|(p, _)| **p > PI_FLOOR)
        .map(|(_, r)| r)
        .sum();
    let wrt_logits: Vec<f64> = pred
        .pi
        .iter()
        .zip(&resp)
        .map(|(&p, &r)| {
            let direct = if p > PI_FLOOR { r } else { 0.0 };
            p * live_resp - direct
        })
        .collect();

    let mut wrt_mu = vec![vec![[0.0f64; 2]; t]; k];
    let mut wrt_sigma_raw = vec![vec![0.0f64; t]; k];
    for kk in 0..k {
        let r = resp[kk];
        for tt in 0..t {
            let mu = pred.mu[kk][tt];
            let s = pred.sigma[kk][tt];
            let dx = mu[0] - gt[tt][0];
            let dy = mu[1] - gt[tt][1];
            wrt_mu[kk][tt] = [r * dx / (s * s), r * dy / (s * s)];
            let d2 = dx * dx + dy * dy;
            let d_sigma = r * (2.0 / s - d2 / (s * s * s));
            // sigma = SIGMA_MIN + softplus(raw); d sigma / d raw = sigmoid(raw)
            // recovered from sigma itself.
            let dsig_draw = 1.0 - (-(s - SIGMA_MIN)).exp();
            wrt_sigma_raw[kk][tt] = d_sigma * dsig_draw;
        }
    }
    let g = MixtureNllGrads { wrt_logits, wrt_mu, wrt_sigma_raw };
    let finite = g.wrt_logits.iter().all(|v| v.is_finite())
        && g.wrt_mu.iter().flatten().flatten().all(|v| v.is_finite())
        && g.wrt_sigma_raw.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric("non-finite loss gradient".into()));
    }
    Ok(g)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictorCheckpoint {
    pub schema: u32,
    pub kind: String,
    pub feature_dim: usize,
    pub n_modes: usize,
    pub horizon: usize,
    pub weight_head: NetCheckpoint,
    pub mean_head: NetCheckpoint,
    pub scale_head: NetCheckpoint,
    pub config_fingerprint: String,
}

impl PredictorModel {
    pub fn checkpoint(&self, fingerprint: &str) -> PredictorCheckpoint {
        PredictorCheckpoint {
            schema: crate::dataset::SCHEMA_VERSION,
            kind: "predictor".into(),
            feature_dim: self.feature_dim,
            n_modes: self.n_modes,
            horizon: self.horizon,
            weight_head: self.weight_head.checkpoint(),
            mean_head: self.mean_head.checkpoint(),
            scale_head: self.scale_head.checkpoint(),
            config_fingerprint: fingerprint.into(),
        }
    }

    pub fn from_checkpoint(ck: &PredictorCheckpoint) -> Result<Self> {
        if ck.schema != crate::dataset::SCHEMA_VERSION || ck.kind != "predictor" {
            return Err(Error::Schema(format!(
                "not a predictor checkpoint (kind {:?}, schema {})",
                ck.kind, ck.schema
            )));
        }
        if ck.feature_dim == 0 || ck.n_modes == 0 || ck.horizon == 0 {
            return Err(Error::Schema("predictor checkpoint has zero dimensions".into()));
        }
        let weight_head = DenseNet::from_checkpoint(&ck.weight_head)?;
        let mean_head = DenseNet::from_checkpoint(&ck.mean_head)?;
        let scale_head = DenseNet::from_checkpoint(&ck.scale_head)?;
        let ok = weight_head.input_dim() == ck.feature_dim
            && mean_head.input_dim() == ck.feature_dim
            && scale_head.input_dim() == ck.feature_dim
            && weight_head.output_dim() == ck.n_modes
            && mean_head.output_dim() == ck.n_modes * ck.horizon * 2
            && scale_head.output_dim() == ck.n_modes * ck.horizon;
        if !ok {
            return Err(Error::Schema("predictor checkpoint head shapes inconsistent".into()));
        }
        Ok(PredictorModel {
            weight_head,
            mean_head,
            scale_head,
            n_modes: ck.n_modes,
            horizon: ck.horizon,
            feature_dim: ck.feature_dim,
        })
    }
}
