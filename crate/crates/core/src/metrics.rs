//! Evaluation battery: displacement metrics, likelihood metrics, OOD AUROC,
//! retention curves and R-AUC, plus the report assembly over the eval split.
//!
//! Conventions, applied uniformly:
//! - the sample unit is one (scene, vehicle-agent) pair; pedestrians are
//!   context only;
//! - AUROC uses the rank form of the Mann-Whitney statistic with average
//!   ranks on ties;
//! - retention curves keep one point per sample, sort ties by ascending
//!   sample index, and R-AUC is the trapezoidal mean over the retained
//!   fraction span.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::dataset::Scene;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::predictor::{mixture_nll, MixturePrediction, PredictorModel, LOG_2PI};
use crate::uncertainty::{estimate_uncertainty, nll_proxy_uncertainty, regression_target, ErrorRegressor};

/// Mean Euclidean displacement between two equal-length trajectories.
pub fn ade(gt: &[[f64; 2]], traj: &[[f64; 2]]) -> Result<f64> {
    if gt.len() != traj.len() || gt.is_empty() {
        return Err(Error::Dim(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            gt.len(),
            traj.len()
        )));
    }
    let sum: f64 = gt
        .iter()
        .zip(traj)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / gt.len() as f64)
}

/// Displacement at the final step.
pub fn fde(gt: &[[f64; 2]], traj: &[[f64; 2]]) -> Result<f64> {
    if gt.len() != traj.len() || gt.is_empty() {
        return Err(Error::Dim("trajectory lengths differ or are empty".into()));
    }
    let (a, b) = (gt[gt.len() - 1], traj[traj.len() - 1]);
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
}

/// Mixing-weight-averaged ADE over the modes.
pub fn wade(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    let mut acc = 0.0;
    for (k, mode) in pred.mu.iter().enumerate() {
        acc += pred.pi[k] * ade(gt, mode)?;
    }
    Ok(acc)
}

/// Mixing-weight-averaged FDE over the modes.
pub fn wfde(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    let mut acc = 0.0;
    for (k, mode) in pred.mu.iter().enumerate() {
        acc += pred.pi[k] * fde(gt, mode)?;
    }
    Ok(acc)
}

/// Best-mode ADE.
pub fn min_ade(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    pred.mu
        .iter()
        .map(|mode| ade(gt, mode))
        .try_fold(f64::INFINITY, |m, v| Ok(m.min(v?)))
}

/// Best-mode FDE.
pub fn min_fde(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    pred.mu
        .iter()
        .map(|mode| fde(gt, mode))
        .try_fold(f64::INFINITY, |m, v| Ok(m.min(v?)))
}

/// Negative log-likelihood of the ground truth under the predicted mixture;
/// same quantity as the training loss.
pub fn nll_metric(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    mixture_nll(pred, gt)
}

/// Corrected NLL: shifted so an exact unit-variance hit scores zero.
pub fn cnll(gt: &[[f64; 2]], pred: &MixturePrediction) -> Result<f64> {
    Ok(nll_metric(gt, pred)? - gt.len() as f64 * LOG_2PI)
}

/// AUROC of scores against binary labels (`true` = OOD = positive), via the
/// Mann-Whitney rank statistic with average ranks on ties.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|(_, l)| *l).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "AUROC needs both ID and OOD samples".into(),
        ));
    }
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // Average ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scores[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Error-retention curve: `(retention_fraction, mean_error)` pairs with
/// fractions descending from 1 to 1/n.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionCurve {
    pub points: Vec<(f64, f64)>,
}

/// Discards samples in order of descending uncertainty (ties broken by
/// ascending sample index) and averages the error over what remains.
pub fn retention_curve(errors: &[f64], uncertainties: &[f64]) -> Result<RetentionCurve> {
    let n = errors.len();
    if n == 0 || uncertainties.len() != n {
        return Err(Error::Dim(
            "retention needs equal-length non-empty errors and uncertainties".into(),
        ));
    }
    if errors.iter().chain(uncertainties).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite retention input".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        uncertainties[b]
            .total_cmp(&uncertainties[a])
            .then(a.cmp(&b))
    });
    // Retained sets are suffixes of the descending-uncertainty order.
    let mut suffix_sum = 0.0;
    let mut means = vec![0.0; n];
    for m in 1..=n {
        suffix_sum += errors[order[n - m]];
        means[m - 1] = suffix_sum / m as f64;
    }
    let points = (1..=n)
        .rev()
        .map(|m| (m as f64 / n as f64, means[m - 1]))
        .collect();
    Ok(RetentionCurve { points })
}

/// Trapezoidal mean of the retention curve over its fraction span. For a
/// single-point curve this is the point's error.
pub fn r_auc(curve: &RetentionCurve) -> f64 {
    let pts = &curve.points;
    if pts.len() < 2 {
        return pts.first().map_or(0.0, |p| p.1);
    }
    let mut integral = 0.0;
    for w in pts.windows(2) {
        let (f1, e1) = w[0];
        let (f0, e0) = w[1];
        integral += (f1 - f0) * (e0 + e1) / 2.0;
    }
    let span = pts.first().unwrap().0 - pts.last().unwrap().0;
    integral / span
}

/// Oracle retention: sorted by the true error itself.
pub fn oracle_curve(errors: &[f64]) -> Result<RetentionCurve> {
    retention_curve(errors, errors)
}

/// Seeded uniform pseudo-uncertainties for the random baseline.
pub fn random_uncertainties(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// One evaluated (scene, vehicle-agent) sample. Positions in the prediction
/// and ground truth are reported in the absolute frame.
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub scene_id: u64,
    pub agent_id: u64,
    pub ood: bool,
    pub wade: f64,
    pub min_ade: f64,
    pub wfde: f64,
    pub min_fde: f64,
    pub nll: f64,
    pub cnll: f64,
    /// lGMM OOD score.
    pub alpha: f64,
    /// Regressor output (predicted log error).
    pub e_hat: f64,
    /// True log error, same transform as the regression target.
    pub e_log: f64,
    /// Entropy-proxy uncertainty of the predicted mixture.
    pub nll_proxy: f64,
    pub prediction: MixturePrediction,
    pub gt: Vec<[f64; 2]>,
}

/// Per-split metric values; a split that contains no samples reports none.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SplitValues {
    pub id: Option<f64>,
    pub ood: Option<f64>,
    pub full: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorRAuc {
    pub estimator: String,
    pub r_auc: SplitValues,
}

/// The full metric battery over one eval split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_id: usize,
    pub n_ood: usize,
    pub wade: SplitValues,
    pub min_ade: SplitValues,
    pub wfde: SplitValues,
    pub min_fde: SplitValues,
    pub nll: SplitValues,
    pub cnll: SplitValues,
    /// AUROC per OOD-score source; absent when the split has one class.
    pub auroc_lgmm: Option<f64>,
    pub auroc_e_reg: Option<f64>,
    pub auroc_nll_proxy: Option<f64>,
    /// wADE R-AUC per uncertainty estimator.
    pub retention: Vec<EstimatorRAuc>,
}

pub struct EvalOutputs {
    pub report: EvalReport,
    /// Full-set retention curves per estimator.
    pub curves: Vec<(String, RetentionCurve)>,
    pub samples: Vec<SampleRecord>,
}

/// Runs every metric over the eval scenes with the trained models.
pub fn evaluate(
    scenes: &[Scene],
    encoder: &EncoderModel,
    predictor: &PredictorModel,
    gmm: &GmmModel,
    regressor: &ErrorRegressor,
    retention_seed: u64,
) -> Result<EvalOutputs> {
    let density = gmm.prepare()?;
    let mut samples = Vec::new();
    for scene in scenes {
        let feats = encoder.encode_scene(scene)?;
        for (agent, feat) in scene.agents.iter().zip(&feats) {
            if agent.is_pedestrian() {
                continue;
            }
            let anchor = agent.last_position();
            let gt_rel: Vec<[f64; 2]> = agent
                .future
                .iter()
                .map(|p| [p[0] - anchor[0], p[1] - anchor[1]])
                .collect();
            let pred = predictor.decode(&feat.h)?;
            let wade_v = wade(&gt_rel, &pred)?;
            let record = SampleRecord {
                scene_id: scene.scene_id,
                agent_id: agent.agent_id,
                ood: scene.ood_label,
                wade: wade_v,
                min_ade: min_ade(&gt_rel, &pred)?,
                wfde: wfde(&gt_rel, &pred)?,
                min_fde: min_fde(&gt_rel, &pred)?,
                nll: nll_metric(&gt_rel, &pred)?,
                cnll: cnll(&gt_rel, &pred)?,
                alpha: density.score(&feat.h)?,
                e_hat: estimate_uncertainty(regressor, &feat.h)?,
                e_log: regression_target(&pred, &gt_rel)?,
                nll_proxy: nll_proxy_uncertainty(&pred),
                prediction: to_absolute(&pred, anchor),
                gt: agent.future.clone(),
            };
            samples.push(record);
        }
    }
    if samples.is_empty() {
        return Err(Error::Degenerate("eval split has no vehicle samples".into()));
    }

    let n_ood = samples.iter().filter(|s| s.ood).count();
    let n_id = samples.len() - n_ood;

    let split = |f: &dyn Fn(&SampleRecord) -> f64| -> SplitValues {
        let mean = |pred: &dyn Fn(&SampleRecord) -> bool| -> Option<f64> {
            let vals: Vec<f64> = samples.iter().filter(|s| pred(s)).map(|s| f(s)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        SplitValues {
            id: mean(&|s| !s.ood),
            ood: mean(&|s| s.ood),
            full: mean(&|_| true).expect("samples non-empty"),
        }
    };

    let auroc_of = |f: &dyn Fn(&SampleRecord) -> f64| -> Result<Option<f64>> {
        if n_id == 0 || n_ood == 0 {
            return Ok(None);
        }
        let pairs: Vec<(f64, bool)> = samples.iter().map(|s| (f(s), s.ood)).collect();
        auroc(&pairs).map(Some)
    };

    // wADE retention per estimator, on each split and the full set.
    let randoms = random_uncertainties(samples.len(), retention_seed);
    let estimators: Vec<(String, Vec<f64>)> = vec![
        ("e_reg".into(), samples.iter().map(|s| s.e_hat).collect()),
        ("nll_proxy".into(), samples.iter().map(|s| s.nll_proxy).collect()),
        ("lgmm".into(), samples.iter().map(|s| s.alpha).collect()),
        ("random".into(), randoms),
        ("oracle".into(), samples.iter().map(|s| s.wade).collect()),
    ];
    let errors: Vec<f64> = samples.iter().map(|s| s.wade).collect();
    let picks: Vec<usize> = (0..samples.len()).collect();
    let subset_r_auc = |unc: &[f64], keep: &dyn Fn(usize) -> bool| -> Result<Option<f64>> {
        let idx: Vec<usize> = picks.iter().cloned().filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let e: Vec<f64> = idx.iter().map(|&i| errors[i]).collect();
        let u: Vec<f64> = idx.iter().map(|&i| unc[i]).collect();
        Ok(Some(r_auc(&retention_curve(&e, &u)?)))
    };
    let mut retention = Vec::new();
    let mut curves = Vec::new();
    for (name, unc) in &estimators {
        retention.push(EstimatorRAuc {
            estimator: name.clone(),
            r_auc: SplitValues {
                id: subset_r_auc(unc, &|i| !samples[i].ood)?,
                ood: subset_r_auc(unc, &|i| samples[i].ood)?,
                full: subset_r_auc(unc, &|_| true)?.expect("samples non-empty"),
            },
        });
        curves.push((name.clone(), retention_curve(&errors, unc)?));
    }

    let report = EvalReport {
        n_id,
        n_ood,
        wade: split(&|s| s.wade),
        min_ade: split(&|s| s.min_ade),
        wfde: split(&|s| s.wfde),
        min_fde: split(&|s| s.min_fde),
        nll: split(&|s| s.nll),
        cnll: split(&|s| s.cnll),
        auroc_lgmm: auroc_of(&|s| s.alpha)?,
        auroc_e_reg: auroc_of(&|s| s.e_hat)?,
        auroc_nll_proxy: auroc_of(&|s| s.nll_proxy)?,
        retention,
    };
    Ok(EvalOutputs { report, curves, samples })
}

fn to_absolute(pred: &MixturePrediction, anchor: [f64; 2]) -> MixturePrediction {
    MixturePrediction {
        pi: pred.pi.clone(),
        mu: pred
            .mu
            .iter()
            .map(|mode| mode.iter().map(|p| [p[0] + anchor[0], p[1] + anchor[1]]).collect())
            .collect(),
        sigma: pred.sigma.clone(),
    }
}

/// Renders the report as the human-readable stdout table.
pub fn format_report(report: &EvalReport) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "-"),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "samples: id={} ood={} full={}\n\n",
        report.n_id,
        report.n_ood,
        report.n_id + report.n_ood
    ));
    out.push_str(&format!("{:<10}{:>10}{:>10}{:>10}\n", "metric", "ID", "OOD", "Full"));
    for (name, v) in [
        ("wADE", &report.wade),
        ("minADE", &report.min_ade),
        ("wFDE", &report.wfde),
        ("minFDE", &report.min_fde),
        ("NLL", &report.nll),
        ("cNLL", &report.cnll),
    ] {
        out.push_str(&format!(
            "{:<10}{}{}{}\n",
            name,
            fmt(v.id),
            fmt(v.ood),
            fmt(Some(v.full))
        ));
    }
    out.push_str("\nAUROC (OOD detection)\n");
    for (name, v) in [
        ("lGMM", report.auroc_lgmm),
        ("E_reg", report.auroc_e_reg),
        ("NLL-proxy", report.auroc_nll_proxy),
    ] {
        out.push_str(&format!("{name:<10}{}\n", fmt(v)));
    }
    out.push_str(&format!(
        "\nwADE R-AUC {:>10}{:>10}{:>10}\n",
        "ID", "OOD", "Full"
    ));
    for row in &report.retention {
        out.push_str(&format!(
            "{:<10}{}{}{}\n",
            row.estimator,
            fmt(row.r_auc.id),
            fmt(row.r_auc.ood),
            fmt(Some(row.r_auc.full))
        ));
    }
    out
}
