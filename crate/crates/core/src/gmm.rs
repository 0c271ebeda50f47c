//! Latent Gaussian mixture OOD detector.
//!
//! A full-covariance Gaussian mixture is fit on in-distribution latent
//! features with EM from a k-means initialization. The OOD score of a
//! feature vector is its negative log-likelihood under the fitted mixture,
//! evaluated in log space through Cholesky factors. The component count is
//! selected by validation AUROC over a fixed grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::predictor::LOG_2PI;

/// Relative ridge added to every covariance update: `1e-6 * trace / dim`,
/// floored absolutely so degenerate clusters stay factorizable.
const RIDGE_REL: f64 = 1e-6;
const RIDGE_ABS_MIN: f64 = 1e-12;

pub const DEFAULT_COMPONENT_GRID: [usize; 8] = [1, 2, 3, 4, 6, 8, 12, 16];

/// Optional per-dimension affine feature transform applied before density
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let dim = check_features(features)?;
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-12)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features.iter().map(|f| self.apply(f)).collect()
    }
}

/// Fitted Gaussian mixture: weights, means, full covariances (row-major)
/// and the per-iteration mean log-likelihood trace of the EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub fit_trace: Vec<f64>,
    /// Set when the model was fit on standardized features; applied before
    /// every density evaluation.
    pub standardizer: Option<Standardizer>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// OOD score: negative log-likelihood of `h` under the mixture.
    pub fn ood_score(&self, h: &[f64]) -> Result<f64> {
        Ok(self.prepare()?.score(h)?)
    }

    /// Scores a batch, factorizing covariances once.
    pub fn score_batch(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.prepare()?;
        features.iter().map(|f| d.score(f)).collect()
    }

    /// Builds the Cholesky-backed density evaluator.
    pub fn prepare(&self) -> Result<GmmDensity> {
        let comps = (0..self.n_components())
            .map(|c| {
                let chol = factorize(&self.covariances[c], self.dim)?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(ComponentDensity {
                    mean: DVector::from_column_slice(&self.means[c]),
                    log_coef: self.weights[c].max(1e-300).ln()
                        - 0.5 * (self.dim as f64 * LOG_2PI + log_det),
                    chol,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmDensity { dim: self.dim, comps, standardizer: self.standardizer.clone() })
    }
}

fn factorize(cov: &[f64], dim: usize) -> Result<Cholesky<f64, Dyn>> {
    let m = DMatrix::from_row_slice(dim, dim, cov);
    Cholesky::new(m).ok_or_else(|| {
        Error::Numeric("covariance is not positive definite after regularization".into())
    })
}

struct ComponentDensity {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// ln(weight) - 0.5 (dim ln 2pi + ln det).
    log_coef: f64,
}

impl ComponentDensity {
    fn log_weighted_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("cholesky factor has positive diagonal");
        self.log_coef - 0.5 * z.norm_squared()
    }
}

/// Prepared density evaluator over a fitted [`GmmModel`].
pub struct GmmDensity {
    dim: usize,
    comps: Vec<ComponentDensity>,
    standardizer: Option<Standardizer>,
}

impl GmmDensity {
    /// Negative log-likelihood OOD score; larger means more novel.
    pub fn score(&self, h: &[f64]) -> Result<f64> {
        if h.len() != self.dim {
            return Err(Error::Dim(format!(
                "feature has dimension {}, model expects {}",
                h.len(),
                self.dim
            )));
        }
        let transformed;
        let h = match &self.standardizer {
            Some(s) => {
                transformed = s.apply(h);
                &transformed
            }
            None => h,
        };
        let x = DVector::from_column_slice(h);
        let mut max = f64::NEG_INFINITY;
        let scores: Vec<f64> = self
            .comps
            .iter()
            .map(|c| {
                let s = c.log_weighted_density(&x);
                max = max.max(s);
                s
            })
            .collect();
        let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        Ok(-lse)
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Dim("no features, or zero-dimensional features".into()));
    }
    for f in features {
        if f.len() != dim {
            return Err(Error::Dim("features disagree on dimension".into()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from k-means++ seeding; at most 50 iterations, stopping
/// when no center moves more than 1e-6. Empty clusters are re-seeded at the
/// point farthest from the existing centers. Returns the cluster-derived
/// initial mixture (means = centers, weights = fractions, covariances =
/// per-cluster sample covariance plus ridge).
pub fn kmeans_init(features: &[Vec<f64>], c: usize, seed: u64) -> Result<GmmModel> {
    const MAX_ITER: usize = 50;
    const TOL: f64 = 1e-6;
    let dim = check_features(features)?;
    let n = features.len();
    if c == 0 {
        return Err(Error::Config("component count must be >= 1".into()));
    }
    if n < c {
        return Err(Error::Degenerate(format!("{n} samples cannot seed {c} clusters")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    centers.push(features[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "fewer than {c} distinct feature vectors"
            )));
        }
        let mut pick = rng.random_range(0.0..total);
        let mut idx = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if pick < w {
                idx = i;
                break;
            }
            pick -= w;
        }
        centers.push(features[idx].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..MAX_ITER {
        for (i, f) in features.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (j, ctr) in centers.iter().enumerate() {
                let d = sq_dist(f, ctr);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assign[i] = best.0;
        }
        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (i, f) in features.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for j in 0..c {
            if counts[j] == 0 {
                // Re-seed at the point farthest from the existing centers.
                let far = features
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let dmin = centers
                            .iter()
                            .enumerate()
                            .filter(|(cj, _)| counts[*cj] > 0)
                            .map(|(_, ctr)| sq_dist(f, ctr))
                            .fold(f64::INFINITY, f64::min);
                        (i, dmin)
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                moved = f64::INFINITY;
                centers[j] = features[far].clone();
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(sq_dist(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        if moved < TOL {
            break;
        }
    }

    // Final assignment against the converged centers.
    for (i, f) in features.iter().enumerate() {
        let mut best = (0usize, f64::INFINITY);
        for (j, ctr) in centers.iter().enumerate() {
            let d = sq_dist(f, ctr);
            if d < best.1 {
                best = (j, d);
            }
        }
        assign[i] = best.0;
    }

    let mut counts = vec![0usize; c];
    for &a in &assign {
        counts[a] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    let covariances: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let members: Vec<&Vec<f64>> = features
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(f, _)| f)
                .collect();
            cluster_covariance(&members, &centers[j], dim)
        })
        .collect();
    Ok(GmmModel {
        dim,
        weights,
        means: centers,
        covariances,
        fit_trace: Vec::new(),
        standardizer: None,
    })
}

fn cluster_covariance(members: &[&Vec<f64>], center: &[f64], dim: usize) -> Vec<f64> {
    let mut cov = vec![0.0; dim * dim];
    if !members.is_empty() {
        let inv = 1.0 / members.len() as f64;
        for f in members {
            for r in 0..dim {
                let dr = f[r] - center[r];
                for col in 0..dim {
                    cov[r * dim + col] += dr * (f[col] - center[col]) * inv;
                }
            }
        }
    }
    add_ridge(&mut cov, dim);
    cov
}

fn add_ridge(cov: &mut [f64], dim: usize) {
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let ridge = (RIDGE_REL * trace / dim as f64).max(RIDGE_ABS_MIN);
    for i in 0..dim {
        cov[i * dim + i] += ridge;
    }
}

/// EM fit from the k-means initialization. Alternates log-space E-steps and
/// ridge-regularized M-steps, recording the mean log-likelihood after each
/// E-step, and stops at `max_iter` or once the improvement drops below
/// `tol`.
pub fn em_fit(
    features: &[Vec<f64>],
    c: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GmmModel> {
    let dim = check_features(features)?;
    let n = features.len();
    if n < c + 1 {
        return Err(Error::Degenerate(format!(
            "need at least {} samples to fit {c} components, got {n}",
            c + 1
        )));
    }

    // All-identical data cannot be clustered; return the single effective
    // component with a pure ridge covariance.
    if features.iter().all(|f| f == &features[0]) {
        let mut cov = vec![0.0; dim * dim];
        add_ridge(&mut cov, dim);
        let model = GmmModel {
            dim,
            weights: vec![1.0 / c as f64; c],
            means: vec![features[0].clone(); c],
            covariances: vec![cov; c],
            fit_trace: Vec::new(),
            standardizer: None,
        };
        let ll = mean_log_likelihood(&model, features)?;
        return Ok(GmmModel { fit_trace: vec![ll], ..model });
    }

    let mut model = kmeans_init(features, c, seed)?;
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        // E-step in log space.
        let density = model.prepare()?;
        let points: Vec<DVector<f64>> = features
            .iter()
            .map(|f| DVector::from_column_slice(f))
            .collect();
        let mut resp = vec![vec![0.0; c]; n];
        let mut ll_sum = 0.0;
        for (i, x) in points.iter().enumerate() {
            let scores: Vec<f64> = density
                .comps
                .iter()
                .map(|comp| comp.log_weighted_density(x))
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            ll_sum += lse;
            for (rc, &s) in resp[i].iter_mut().zip(&scores) {
                *rc = (s - lse).exp();
            }
        }
        let ll = ll_sum / n as f64;
        if !ll.is_finite() {
            return Err(Error::Numeric("non-finite log-likelihood in EM".into()));
        }
        trace.push(ll);
        if ll - prev < tol {
            break;
        }
        prev = ll;

        // M-step with ridge regularization.
        for j in 0..c {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            if nj < 1e-12 {
                // Dead component: keep its parameters, only the weight moves.
                model.weights[j] = nj / n as f64;
                continue;
            }
            model.weights[j] = nj / n as f64;
            let mut mean = vec![0.0; dim];
            for (r, f) in resp.iter().zip(features) {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += r[j] * v;
                }
            }
            for m in mean.iter_mut() {
                *m /= nj;
            }
            let mut cov = vec![0.0; dim * dim];
            for (r, f) in resp.iter().zip(features) {
                let w = r[j] / nj;
                for row in 0..dim {
                    let dr = f[row] - mean[row];
                    for col in 0..dim {
                        cov[row * dim + col] += w * dr * (f[col] - mean[col]);
                    }
                }
            }
            add_ridge(&mut cov, dim);
            model.means[j] = mean;
            model.covariances[j] = cov;
        }
    }
    model.fit_trace = trace;
    Ok(model)
}

fn mean_log_likelihood(model: &GmmModel, features: &[Vec<f64>]) -> Result<f64> {
    let scores = model.score_batch(features)?;
    Ok(-scores.iter().sum::<f64>() / features.len() as f64)
}

/// E-step responsibilities of a fitted model over a feature set; rows are
/// non-negative and sum to one.
pub fn responsibilities(model: &GmmModel, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let density = model.prepare()?;
    features
        .iter()
        .map(|f| {
            let x = DVector::from_column_slice(f);
            let scores: Vec<f64> = density
                .comps
                .iter()
                .map(|comp| comp.log_weighted_density(&x))
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            Ok(scores.into_iter().map(|s| (s - lse).exp()).collect())
        })
        .collect()
}

/// One row of the component-selection table.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentScore {
    pub c: usize,
    pub auroc: f64,
    /// Set when the dev scores were degenerate (all equal).
    pub note: Option<String>,
}

/// Fits one mixture per grid value on the training features, scores the dev
/// features, and returns the component count with the highest dev AUROC
/// (ties resolved toward the smaller count) together with the full table.
pub fn select_components(
    train: &[Vec<f64>],
    dev: &[Vec<f64>],
    dev_labels: &[bool],
    grid: &[usize],
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(usize, Vec<ComponentScore>)> {
    if grid.is_empty() {
        return Err(Error::Config("component grid is empty".into()));
    }
    if dev.len() != dev_labels.len() {
        return Err(Error::Dim("dev features and labels disagree in length".into()));
    }
    let mut grid: Vec<usize> = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for &c in &grid {
        let model = em_fit(train, c, seed, max_iter, tol)?;
        let scores = model.score_batch(dev)?;
        let pairs: Vec<(f64, bool)> = scores.iter().cloned().zip(dev_labels.iter().cloned()).collect();
        let a = auroc(&pairs)?;
        let degenerate = scores
            .windows(2)
            .all(|w| w[0] == w[1]);
        table.push(ComponentScore {
            c,
            auroc: a,
            note: degenerate.then(|| "degenerate: all dev scores equal".to_string()),
        });
        if best.map_or(true, |(_, ba)| a > ba) {
            best = Some((c, a));
        }
    }
    Ok((best.expect("grid is non-empty").0, table))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GmmCheckpoint {
    pub schema: u32,
    pub kind: String,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub fit_trace: Vec<f64>,
    pub standardizer: Option<Standardizer>,
    pub config_fingerprint: String,
}

impl GmmModel {
    pub fn checkpoint(&self, fingerprint: &str) -> GmmCheckpoint {
        GmmCheckpoint {
            schema: crate::dataset::SCHEMA_VERSION,
            kind: "gmm".into(),
            dim: self.dim,
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances: self.covariances.clone(),
            fit_trace: self.fit_trace.clone(),
            standardizer: self.standardizer.clone(),
            config_fingerprint: fingerprint.into(),
        }
    }

    pub fn from_checkpoint(ck: &GmmCheckpoint) -> Result<Self> {
        if ck.schema != crate::dataset::SCHEMA_VERSION || ck.kind != "gmm" {
            return Err(Error::Schema(format!(
                "not a gmm checkpoint (kind {:?}, schema {})",
                ck.kind, ck.schema
            )));
        }
        let c = ck.weights.len();
        let dim = ck.dim;
        if c == 0 || dim == 0 || ck.means.len() != c || ck.covariances.len() != c {
            return Err(Error::Schema("gmm checkpoint arrays disagree on components".into()));
        }
        if ck.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Schema("gmm checkpoint has invalid weights".into()));
        }
        if (ck.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Schema("gmm checkpoint weights do not sum to 1".into()));
        }
        for m in &ck.means {
            if m.len() != dim || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema("gmm checkpoint has invalid means".into()));
            }
        }
        for cov in &ck.covariances {
            if cov.len() != dim * dim || cov.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema("gmm checkpoint has invalid covariances".into()));
            }
            for r in 0..dim {
                for col in (r + 1)..dim {
                    let (a, b) = (cov[r * dim + col], cov[col * dim + r]);
                    if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                        return Err(Error::Schema("gmm checkpoint covariance not symmetric".into()));
                    }
                }
            }
        }
        if let Some(s) = &ck.standardizer {
            if s.mean.len() != dim
                || s.std.len() != dim
                || s.mean.iter().any(|v| !v.is_finite())
                || s.std.iter().any(|v| !(v.is_finite() && *v > 0.0))
            {
                return Err(Error::Schema("gmm checkpoint has invalid standardizer".into()));
            }
        }
        let model = GmmModel {
            dim,
            weights: ck.weights.clone(),
            means: ck.means.clone(),
            covariances: ck.covariances.clone(),
            fit_trace: ck.fit_trace.clone(),
            standardizer: ck.standardizer.clone(),
        };
        // Covariances must factorize for the model to be usable at all.
        model.prepare()?;
        Ok(model)
    }
}

/// Seed-deterministic blob sampler shared by the module tests and the
/// acceptance suite.
pub fn sample_gaussian_blobs(
    centers: &[Vec<f64>],
    spread: f64,
    n_per: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread).expect("valid spread");
    let mut out = Vec::with_capacity(centers.len() * n_per);
    for ctr in centers {
        for _ in 0..n_per {
            out.push(ctr.iter().map(|c| c + normal.sample(&mut rng)).collect());
        }
    }
    out
}


/// Monte-Carlo integral of `exp(-ood_score)` over a bounding box covering
/// six standard deviations of every component. Used by the density sanity
/// checks; exposed for the acceptance suite.
pub fn monte_carlo_density_integral(model: &GmmModel, n_samples: usize, seed: u64) -> f64 {
    assert!(model.standardizer.is_none(), "integral is over raw feature space");
    let dim = model.dim;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for (mean, cov) in model.means.iter().zip(&model.covariances) {
        for d in 0..dim {
            let sd = cov[d * dim + d].sqrt();
            lo[d] = lo[d].min(mean[d] - 6.0 * sd);
            hi[d] = hi[d].max(mean[d] + 6.0 * sd);
        }
    }
    let volume: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).product();
    let density = model.prepare().expect("model factorizes");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut point = vec![0.0; dim];
    for _ in 0..n_samples {
        for d in 0..dim {
            point[d] = rng.random_range(lo[d]..hi[d]);
        }
        acc += (-density.score(&point).expect("dimension matches")).exp();
    }
    acc / n_samples as f64 * volume
}
