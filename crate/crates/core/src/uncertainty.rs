//! Error-regression uncertainty head and the entropy-based NLL proxy.
//!
//! The regressor is a small network on latent features trained, with the
//! predictor frozen, to output the log of the mixture-weighted displacement
//! error the predictor will make. Its output is used directly as the
//! uncertainty: retention only needs rank order, so nothing is exponentiated
//! back.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::wade;
use crate::nn::{Activation, AdamW, DenseNet, NetCheckpoint, NetGrads};
use crate::predictor::{MixturePrediction, LOG_2PI};

/// Floor on the displacement error before the log transform.
pub const ERROR_FLOOR: f64 = 1e-6;

const TARGET_TRANSFORM: &str = "log_wade";

/// Three-layer regression head over latent features, scalar output.
#[derive(Debug, Clone)]
pub struct ErrorRegressor {
    pub net: DenseNet,
    pub feature_dim: usize,
}

impl ErrorRegressor {
    pub fn new<R: Rng>(feature_dim: usize, rng: &mut R) -> Self {
        let net = DenseNet::new(
            &[feature_dim, 64, 32, 1],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        );
        ErrorRegressor { net, feature_dim }
    }
}

/// Regression target: log of the floored weighted ADE.
pub fn regression_target(pred: &MixturePrediction, gt: &[[f64; 2]]) -> Result<f64> {
    Ok(wade(gt, pred)?.max(ERROR_FLOOR).ln())
}

/// Predicted log-error for one feature vector.
pub fn estimate_uncertainty(regressor: &ErrorRegressor, h: &[f64]) -> Result<f64> {
    Ok(regressor.net.forward(h)?[0])
}

/// Mean squared error between estimates and targets.
pub fn mse(estimates: &[f64], targets: &[f64]) -> f64 {
    estimates
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / estimates.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressorEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

pub struct RegressorTraining {
    pub regressor: ErrorRegressor,
    pub epochs: Vec<RegressorEpoch>,
}

/// Trains the regressor on (feature, target) pairs by mini-batch AdamW with
/// a cosine schedule. Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn train_error_regressor(
    features: &[Vec<f64>],
    targets: &[f64],
    validation: Option<(&[Vec<f64>], &[f64])>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    weight_decay: f64,
    seed: u64,
) -> Result<RegressorTraining> {
    if features.len() != targets.len() || features.is_empty() {
        return Err(Error::Dim("features and targets must be non-empty and equal-length".into()));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("non-finite regression target".into()));
    }
    let dim = features[0].len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut reg = ErrorRegressor::new(dim, &mut rng);
    let batch_size = batch_size.max(1).min(features.len());
    let batches_per_epoch = features.len().div_ceil(batch_size);
    let mut opt = AdamW::new(reg.net.param_count(), lr, weight_decay, epochs * batches_per_epoch);

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut grads = NetGrads::zeros_of(&reg.net);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let cache = reg.net.forward_cached(&features[i])?;
                let err = cache.output()[0] - targets[i];
                batch_loss += err * err;
                // d mse / d output = 2 err / batch
                let (g, _) = reg
                    .net
                    .backward_cached(&cache, &[2.0 * err / chunk.len() as f64])?;
                grads.add_assign(&g);
            }
            loss_sum += batch_loss;
            let mut params = reg.net.flat_params();
            let flat = crate::nn::collect_flat_grads(&[&grads]);
            opt.step(&mut params, &flat).map_err(|e| {
                Error::Numeric(format!("regressor training aborted at epoch {epoch}: {e}"))
            })?;
            reg.net.set_flat_params(&params)?;
        }
        let train_mse = loss_sum / features.len() as f64;
        let val_mse = match validation {
            Some((vf, vt)) if !vf.is_empty() => {
                let est: Vec<f64> = vf
                    .iter()
                    .map(|f| estimate_uncertainty(&reg, f))
                    .collect::<Result<_>>()?;
                Some(mse(&est, vt))
            }
            _ => None,
        };
        log.push(RegressorEpoch { epoch, train_mse, val_mse });
    }
    Ok(RegressorTraining { regressor: reg, epochs: log })
}

fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}

/// Entropy upper bound of the predicted mixture, the training-free
/// uncertainty baseline: per-mode Gaussian entropies weighted by the mixing
/// coefficients plus the categorical entropy.
pub fn nll_proxy_uncertainty(pred: &MixturePrediction) -> f64 {
    let mut total = 0.0;
    for (k, &pi) in pred.pi.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        let mode_entropy: f64 = pred.sigma[k]
            .iter()
            .map(|s| LOG_2PI + 2.0 * s.ln() + 1.0)
            .sum();
        total += pi * (mode_entropy - pi.ln());
    }
    total
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegressorCheckpoint {
    pub schema: u32,
    pub kind: String,
    pub feature_dim: usize,
    pub target_transform: String,
    pub net: NetCheckpoint,
    pub config_fingerprint: String,
}

impl ErrorRegressor {
    pub fn checkpoint(&self, fingerprint: &str) -> RegressorCheckpoint {
        RegressorCheckpoint {
            schema: crate::dataset::SCHEMA_VERSION,
            kind: "regressor".into(),
            feature_dim: self.feature_dim,
            target_transform: TARGET_TRANSFORM.into(),
            net: self.net.checkpoint(),
            config_fingerprint: fingerprint.into(),
        }
    }

    pub fn from_checkpoint(ck: &RegressorCheckpoint) -> Result<Self> {
        if ck.schema != crate::dataset::SCHEMA_VERSION || ck.kind != "regressor" {
            return Err(Error::Schema(format!(
                "not a regressor checkpoint (kind {:?}, schema {})",
                ck.kind, ck.schema
            )));
        }
        if ck.target_transform != TARGET_TRANSFORM {
            return Err(Error::Schema(format!(
                "unsupported target transform {:?}",
                ck.target_transform
            )));
        }
        let net = DenseNet::from_checkpoint(&ck.net)?;
        if net.input_dim() != ck.feature_dim || net.output_dim() != 1 {
            return Err(Error::Schema("regressor checkpoint net shape mismatch".into()));
        }
        Ok(ErrorRegressor { net, feature_dim: ck.feature_dim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_pred(t: usize, sigma: f64, mu: Vec<[f64; 2]>, pi: Vec<f64>) -> MixturePrediction {
        let k = pi.len();
        MixturePrediction {
            pi,
            mu: vec![mu; k],
            sigma: vec![vec![sigma; t]; k],
        }
    }

    #[test]
    fn regression_target_anchors() {
        let t = 4;
        let gt: Vec<[f64; 2]> = (0..t).map(|i| [i as f64, 0.0]).collect();
        // Offset every mean by (1, 0): wade = 1 -> target 0.
        let mu: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let pred = unit_pred(t, 1.0, mu, vec![1.0]);
        assert!(regression_target(&pred, &gt).unwrap().abs() < 1e-12);

        let e = std::f64::consts::E;
        let mu: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + e, p[1]]).collect();
        let pred = unit_pred(t, 1.0, mu, vec![1.0]);
        assert!((regression_target(&pred, &gt).unwrap() - 1.0).abs() < 1e-12);

        let pred = unit_pred(t, 1.0, gt.clone(), vec![1.0]);
        let floor = regression_target(&pred, &gt).unwrap();
        assert!((floor - ERROR_FLOOR.ln()).abs() < 1e-12);
        assert!((floor + 13.8155).abs() < 1e-3);
    }

    #[test]
    fn mse_zero_iff_exact() {
        assert_eq!(mse(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5]), 0.0);
        assert!(mse(&[1.0, 0.0], &[1.0, 0.1]) > 0.0);
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut reg = ErrorRegressor::new(4, &mut rng);
        let zeros = vec![0.0; reg.net.param_count()];
        reg.net.set_flat_params(&zeros).unwrap();
        let n = reg.net.layers.len();
        reg.net.layers[n - 1].b[0] = 0.75;
        for h in [[0.0; 4], [1.0, -1.0, 2.0, 3.0]] {
            assert_eq!(estimate_uncertainty(&reg, &h).unwrap(), 0.75);
        }
    }

    #[test]
    fn estimate_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let reg = ErrorRegressor::new(6, &mut rng);
        let h: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 1.0).collect();
        assert_eq!(
            estimate_uncertainty(&reg, &h).unwrap(),
            estimate_uncertainty(&reg, &h).unwrap()
        );
    }

    #[test]
    fn converges_to_constant_target() {
        let feats = crate::gmm::sample_gaussian_blobs(&[vec![0.0, 0.0, 0.0]], 1.0, 200, 2);
        let targets = vec![1.5; 200];
        let out = train_error_regressor(&feats, &targets, None, 80, 1e-2, 32, 0.0, 3).unwrap();
        for f in &feats {
            let e = estimate_uncertainty(&out.regressor, f).unwrap();
            assert!((e - 1.5).abs() < 0.05, "estimate {e}");
        }
    }

    #[test]
    fn training_loss_windows_non_increasing() {
        // 500-sample toy set with a linear target plus offset.
        let feats = crate::gmm::sample_gaussian_blobs(&[vec![0.0; 4]], 1.0, 500, 4);
        let targets: Vec<f64> = feats.iter().map(|f| 0.7 * f[0] - 0.2 * f[2] + 0.4).collect();
        let out = train_error_regressor(&feats, &targets, None, 30, 5e-3, 32, 0.0, 5).unwrap();
        let losses: Vec<f64> = out.epochs.iter().map(|e| e.train_mse).collect();
        let windows: Vec<f64> = losses
            .chunks(5)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0], "window means increased: {:?}", windows);
        }
    }

    #[test]
    fn nll_proxy_unit_sigma_anchor() {
        let t = 25;
        let gt: Vec<[f64; 2]> = (0..t).map(|i| [i as f64, 0.0]).collect();
        let pred = unit_pred(t, 1.0, gt, vec![1.0]);
        let v = nll_proxy_uncertainty(&pred);
        assert!((v - 25.0 * (LOG_2PI + 1.0)).abs() < 1e-9);
        assert!((v - 70.9469).abs() < 1e-3);
    }

    #[test]
    fn nll_proxy_doubling_sigma_adds_2t_log2() {
        let t = 10;
        let gt: Vec<[f64; 2]> = (0..t).map(|i| [0.0, i as f64]).collect();
        let a = nll_proxy_uncertainty(&unit_pred(t, 1.0, gt.clone(), vec![1.0]));
        let b = nll_proxy_uncertainty(&unit_pred(t, 2.0, gt, vec![1.0]));
        assert!((b - a - 2.0 * t as f64 * 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_proxy_uniform_weights_add_log_k() {
        let t = 5;
        let gt: Vec<[f64; 2]> = (0..t).map(|i| [i as f64, 1.0]).collect();
        let one_hot = nll_proxy_uncertainty(&unit_pred(t, 1.0, gt.clone(), vec![1.0, 0.0, 0.0, 0.0]));
        let uniform = nll_proxy_uncertainty(&unit_pred(t, 1.0, gt, vec![0.25; 4]));
        assert!((uniform - one_hot - 4.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let reg = ErrorRegressor::new(8, &mut rng);
        let json = serde_json::to_string(&reg.checkpoint("fp")).unwrap();
        let ck: RegressorCheckpoint = serde_json::from_str(&json).unwrap();
        let back = ErrorRegressor::from_checkpoint(&ck).unwrap();
        assert_eq!(reg.net.flat_params(), back.net.flat_params());
        let mut bad = reg.checkpoint("fp");
        bad.target_transform = "raw".into();
        assert!(ErrorRegressor::from_checkpoint(&bad).is_err());
    }
}
