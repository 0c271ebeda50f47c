//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Criteria 6-8 share a single end-to-end pipeline run on the default
//! desk-scale configuration (run once, lazily).

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use trajrel::config::RunConfig;
use trajrel::gmm::{em_fit, monte_carlo_density_integral, sample_gaussian_blobs, GmmModel};
use trajrel::metrics::{
    ade, auroc, cnll, fde, min_ade, min_fde, nll_metric, r_auc, retention_curve, wade, wfde,
};
use trajrel::nn::{collect_flat_grads, Activation, DenseNet};
use trajrel::pipeline::{
    cmd_evaluate, cmd_fit_reliability, cmd_generate, cmd_train, param_hash, FitSummary, RunPaths,
};
use trajrel::predictor::{
    mixture_nll, mixture_nll_grad, softmax, softplus, MixturePrediction, LOG_2PI, SIGMA_MIN,
};

fn report(criterion: &str, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

fn random_mixture(rng: &mut ChaCha12Rng, k: usize, t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<[f64; 2]>) {
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mu: Vec<f64> = (0..k * t * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let raw: Vec<f64> = (0..k * t).map(|_| rng.random_range(-1.0..2.0)).collect();
    let gt: Vec<[f64; 2]> = (0..t)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    (logits, mu, raw, gt)
}

fn assemble(logits: &[f64], mu_flat: &[f64], raw: &[f64], k: usize, t: usize) -> MixturePrediction {
    MixturePrediction {
        pi: softmax(logits),
        mu: (0..k)
            .map(|kk| {
                (0..t)
                    .map(|tt| {
                        let b = (kk * t + tt) * 2;
                        [mu_flat[b], mu_flat[b + 1]]
                    })
                    .collect()
            })
            .collect(),
        sigma: (0..k)
            .map(|kk| (0..t).map(|tt| SIGMA_MIN + softplus(raw[kk * t + tt])).collect())
            .collect(),
    }
}

/// Relative agreement with an absolute floor: central differences on an
/// O(10) loss carry roughly 1e-9 of absolute noise.
fn close(fd: f64, analytic: f64) -> bool {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4) < 1e-4
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(100);
    let h = 1e-5;
    let mut checked = 0usize;

    // Mixture NLL gradients on 50 random small instances.
    for _ in 0..50 {
        let (k, t) = (3, 4);
        let (logits, mu, raw, gt) = random_mixture(&mut rng, k, t);
        let loss = |lg: &[f64], m: &[f64], rw: &[f64]| {
            mixture_nll(&assemble(lg, m, rw, k, t), &gt).unwrap()
        };
        let g = mixture_nll_grad(&assemble(&logits, &mu, &raw, k, t), &gt).unwrap();
        for i in 0..k {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fd = (loss(&up, &mu, &raw) - loss(&dn, &mu, &raw)) / (2.0 * h);
            assert!(close(fd, g.wrt_logits[i]), "logit {i}: {fd} vs {}", g.wrt_logits[i]);
            checked += 1;
        }
        for i in 0..k * t * 2 {
            let mut up = mu.clone();
            up[i] += h;
            let mut dn = mu.clone();
            dn[i] -= h;
            let fd = (loss(&logits, &up, &raw) - loss(&logits, &dn, &raw)) / (2.0 * h);
            let a = g.wrt_mu[i / (t * 2)][(i / 2) % t][i % 2];
            assert!(close(fd, a), "mu {i}: {fd} vs {a}");
            checked += 1;
        }
        for i in 0..k * t {
            let mut up = raw.clone();
            up[i] += h;
            let mut dn = raw.clone();
            dn[i] -= h;
            let fd = (loss(&logits, &mu, &up) - loss(&logits, &mu, &dn)) / (2.0 * h);
            assert!(close(fd, g.wrt_sigma_raw[i / t][i % t]), "raw {i}");
            checked += 1;
        }
    }

    // Regression-loss gradients through random small nets (<= 3 layers,
    // <= 16 units) on 50 instances.
    for case in 0..50 {
        let dims: Vec<usize> = match case % 3 {
            0 => vec![4, 16, 1],
            1 => vec![6, 12, 8, 1],
            _ => vec![3, 5, 1],
        };
        let acts: Vec<Activation> = (0..dims.len() - 1)
            .map(|i| {
                if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                }
            })
            .collect();
        let net = DenseNet::new(&dims, &acts, &mut rng);
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: f64 = rng.random_range(-1.0..1.0);
        let loss_of = |n: &DenseNet| {
            let e = n.forward(&x).unwrap()[0] - target;
            e * e
        };
        let est = net.forward(&x).unwrap()[0];
        let (grads, _) = net.backward(&x, &[2.0 * (est - target)]).unwrap();
        let flat = collect_flat_grads(&[&grads]);
        let base = net.flat_params();
        for i in 0..base.len() {
            let mut n2 = net.clone();
            let mut p = base.clone();
            p[i] += h;
            n2.set_flat_params(&p).unwrap();
            let up = loss_of(&n2);
            p[i] -= 2.0 * h;
            n2.set_flat_params(&p).unwrap();
            let dn = loss_of(&n2);
            let fd = (up - dn) / (2.0 * h);
            assert!(close(fd, flat[i]), "net param {i}: {fd} vs {}", flat[i]);
            checked += 1;
        }
    }

    let elapsed = start.elapsed();
    report(
        "1",
        "gradient correctness",
        elapsed < Duration::from_secs(10),
        &format!("{checked} coordinates across 100 instances in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 2. EM monotonicity
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_em_monotonicity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut datasets = 0;
    for (i, &dim) in [2usize, 8].iter().enumerate() {
        for (j, &c) in [1usize, 2, 4].iter().enumerate() {
            for rep in 0..4 {
                if datasets >= 20 {
                    break;
                }
                let seed = 1000 + (i * 17 + j * 5 + rep) as u64;
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let n_blobs = rng.random_range(1..=3);
                let centers: Vec<Vec<f64>> = (0..n_blobs)
                    .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
                    .collect();
                let feats = sample_gaussian_blobs(&centers, 1.2, 500 / n_blobs, seed ^ 0xAB);
                let model = em_fit(&feats, c, seed, 100, 1e-9).unwrap();
                for w in model.fit_trace.windows(2) {
                    worst = worst.max(w[0] - w[1]);
                }
                datasets += 1;
            }
        }
    }
    // Pad with extra H=8 datasets up to exactly 20.
    let mut seed = 2000u64;
    while datasets < 20 {
        let feats = sample_gaussian_blobs(&[vec![0.0; 8], vec![3.0; 8]], 1.0, 250, seed);
        let model = em_fit(&feats, 2, seed, 100, 1e-9).unwrap();
        for w in model.fit_trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
        datasets += 1;
        seed += 1;
    }
    let elapsed = start.elapsed();
    report(
        "2",
        "EM monotonicity",
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        &format!("{datasets} datasets, worst per-iteration decrease {worst:.2e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Density sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_density_normalization() {
    let start = Instant::now();
    let feats = sample_gaussian_blobs(&[vec![-2.0, 0.5], vec![3.0, 2.0]], 1.0, 1500, 31);
    let model = em_fit(&feats, 2, 31, 100, 1e-6).unwrap();
    let integral = monte_carlo_density_integral(&model, 1_000_000, 77);
    let elapsed = start.elapsed();
    report(
        "3",
        "density sanity",
        (integral - 1.0).abs() < 0.05 && elapsed < Duration::from_secs(30),
        &format!("Monte-Carlo integral {integral:.4} over 1e6 samples in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(44);

    // Independent naive implementations.
    let naive_ade = |gt: &[[f64; 2]], tr: &[[f64; 2]]| {
        let mut s = 0.0;
        for i in 0..gt.len() {
            s += ((gt[i][0] - tr[i][0]).powi(2) + (gt[i][1] - tr[i][1]).powi(2)).sqrt();
        }
        s / gt.len() as f64
    };
    let naive_fde = |gt: &[[f64; 2]], tr: &[[f64; 2]]| {
        let i = gt.len() - 1;
        ((gt[i][0] - tr[i][0]).powi(2) + (gt[i][1] - tr[i][1]).powi(2)).sqrt()
    };
    let naive_nll = |p: &MixturePrediction, gt: &[[f64; 2]]| {
        let mut density = 0.0;
        for k in 0..p.pi.len() {
            let mut mode = 1.0;
            for (t, y) in gt.iter().enumerate() {
                let m = p.mu[k][t];
                let s = p.sigma[k][t];
                let d2 = (y[0] - m[0]).powi(2) + (y[1] - m[1]).powi(2);
                mode *= (-d2 / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s);
            }
            density += p.pi[k].max(1e-12) * mode;
        }
        -density.ln()
    };

    for _ in 0..25 {
        let t = 8;
        let k = 5;
        let gt: Vec<[f64; 2]> = (0..t)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pred = MixturePrediction {
            pi: softmax(&logits),
            mu: (0..k)
                .map(|_| {
                    (0..t)
                        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
                        .collect()
                })
                .collect(),
            sigma: (0..k)
                .map(|_| (0..t).map(|_| rng.random_range(0.5..2.0)).collect())
                .collect(),
        };
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);

        let w_naive: f64 = (0..k).map(|kk| pred.pi[kk] * naive_ade(&gt, &pred.mu[kk])).sum();
        assert!(rel(wade(&gt, &pred).unwrap(), w_naive) < 1e-10);
        let wf_naive: f64 = (0..k).map(|kk| pred.pi[kk] * naive_fde(&gt, &pred.mu[kk])).sum();
        assert!(rel(wfde(&gt, &pred).unwrap(), wf_naive) < 1e-10);
        let ma_naive = (0..k)
            .map(|kk| naive_ade(&gt, &pred.mu[kk]))
            .fold(f64::INFINITY, f64::min);
        assert!(rel(min_ade(&gt, &pred).unwrap(), ma_naive) < 1e-10);
        let mf_naive = (0..k)
            .map(|kk| naive_fde(&gt, &pred.mu[kk]))
            .fold(f64::INFINITY, f64::min);
        assert!(rel(min_fde(&gt, &pred).unwrap(), mf_naive) < 1e-10);
        assert!(rel(nll_metric(&gt, &pred).unwrap(), naive_nll(&pred, &gt)) < 1e-10);
        assert!(rel(ade(&gt, &pred.mu[0]).unwrap(), naive_ade(&gt, &pred.mu[0])) < 1e-12);
        assert!(rel(fde(&gt, &pred.mu[0]).unwrap(), naive_fde(&gt, &pred.mu[0])) < 1e-12);
        // cNLL identity is exact.
        assert_eq!(
            cnll(&gt, &pred).unwrap(),
            nll_metric(&gt, &pred).unwrap() - t as f64 * LOG_2PI
        );
    }

    // AUROC against O(n^2) pair counting on 200 scored samples with ties.
    let scores: Vec<(f64, bool)> = (0..200)
        .map(|_| {
            let s = (rng.random_range(-2.0..2.0_f64) * 4.0).round() / 4.0;
            (s, rng.random_range(0.0..1.0) < 0.4)
        })
        .collect();
    let mut pair = 0.0;
    let pos: Vec<f64> = scores.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
    for p in &pos {
        for q in &neg {
            pair += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    pair /= (pos.len() * neg.len()) as f64;
    assert!((auroc(&scores).unwrap() - pair).abs() < 1e-12);

    // Retention worked example.
    let errors = [4.0, 3.0, 2.0, 1.0];
    let curve = retention_curve(&errors, &errors).unwrap();
    assert!((r_auc(&curve) - 1.75).abs() < 1e-12);

    let elapsed = start.elapsed();
    report(
        "4",
        "metric oracles",
        elapsed < Duration::from_secs(10),
        &format!("displacement/NLL/AUROC/retention oracles agreed in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// 5. Closed-form anchors
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_closed_form_anchors() {
    let model = GmmModel {
        dim: 2,
        weights: vec![1.0],
        means: vec![vec![0.0, 0.0]],
        covariances: vec![vec![1.0, 0.0, 0.0, 1.0]],
        fit_trace: vec![],
        standardizer: None,
    };
    let score = model.ood_score(&[0.0, 0.0]).unwrap();
    let score_ok = (score - LOG_2PI).abs() < 1e-12;

    let t = 25;
    let gt: Vec<[f64; 2]> = (0..t).map(|i| [i as f64 * 0.4, 1.0]).collect();
    let pred = MixturePrediction {
        pi: vec![1.0],
        mu: vec![gt.clone()],
        sigma: vec![vec![1.0; t]],
    };
    let nll = nll_metric(&gt, &pred).unwrap();
    let nll_ok = (nll - t as f64 * LOG_2PI).abs() < 1e-12;
    let cnll_ok = cnll(&gt, &pred).unwrap().abs() < 1e-12;

    report(
        "5",
        "closed-form anchors",
        score_ok && nll_ok && cnll_ok,
        &format!("ood score {score:.12}, exact-hit NLL {nll:.12}"),
    );
}

// ---------------------------------------------------------------------------
// 6-8. Shared end-to-end run on the default strong-shift config
// ---------------------------------------------------------------------------

struct E2eRun {
    _dir: tempfile::TempDir,
    config: RunConfig,
    fit: FitSummary,
    eval: trajrel::metrics::EvalOutputs,
    elapsed: Duration,
}

fn e2e() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut config = RunConfig::desk();
        config.out_root = dir.path().to_path_buf();
        config.validate().expect("default config is valid");
        let start = Instant::now();
        cmd_generate(&config).expect("generate");
        cmd_train(&config).expect("train");
        let fit = cmd_fit_reliability(&config).expect("fit-reliability");
        let eval = cmd_evaluate(&config).expect("evaluate");
        let elapsed = start.elapsed();
        E2eRun { _dir: dir, config, fit, eval, elapsed }
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

#[test]
fn criterion_6_end_to_end_synthetic_shift() {
    let run = e2e();
    let report_data = &run.eval.report;

    let auroc_lgmm = report_data.auroc_lgmm.expect("both classes present");
    let a_ok = auroc_lgmm >= 0.8;

    let get = |name: &str| {
        report_data
            .retention
            .iter()
            .find(|r| r.estimator == name)
            .expect("estimator present")
            .r_auc
            .full
    };
    let (e_reg, random, oracle) = (get("e_reg"), get("random"), get("oracle"));
    let b_ok = e_reg < random * 0.85 && e_reg >= oracle;

    let id_samples: Vec<&trajrel::metrics::SampleRecord> =
        run.eval.samples.iter().filter(|s| !s.ood).collect();
    let e_hat: Vec<f64> = id_samples.iter().map(|s| s.e_hat).collect();
    let e_log: Vec<f64> = id_samples.iter().map(|s| s.e_log).collect();
    let corr = pearson(&e_hat, &e_log);
    let c_ok = corr >= 0.5;

    let wade_id = report_data.wade.id.expect("ID split non-empty");
    let wade_ood = report_data.wade.ood.expect("OOD split non-empty");
    let d_ok = wade_ood >= wade_id;

    let time_ok = run.elapsed < Duration::from_secs(15 * 60);
    report(
        "6",
        "end-to-end synthetic shift",
        a_ok && b_ok && c_ok && d_ok && time_ok,
        &format!(
            "AUROC {auroc_lgmm:.3}; R-AUC e_reg {e_reg:.3} vs random {random:.3} (oracle {oracle:.3}); \
             ID corr {corr:.3}; wADE ID {wade_id:.3} vs OOD {wade_ood:.3}; runtime {:?}",
            run.elapsed
        ),
    );
}

#[test]
fn criterion_7_two_phase_freeze() {
    let run = e2e();
    let hashes_equal = run.fit.param_hash_before == run.fit.param_hash_after;

    // Re-read the checkpoints from disk and hash again: what evaluate used
    // is still exactly what phase 1 wrote.
    let paths = RunPaths::of(&run.config);
    let enc: trajrel::encoder::EncoderCheckpoint = serde_json::from_str(
        &std::fs::read_to_string(paths.encoder_ckpt()).expect("encoder checkpoint"),
    )
    .expect("encoder json");
    let pred: trajrel::predictor::PredictorCheckpoint = serde_json::from_str(
        &std::fs::read_to_string(paths.predictor_ckpt()).expect("predictor checkpoint"),
    )
    .expect("predictor json");
    let encoder = trajrel::encoder::EncoderModel::from_checkpoint(&enc).expect("encoder");
    let predictor = trajrel::predictor::PredictorModel::from_checkpoint(&pred).expect("predictor");
    let disk_hash = param_hash(&encoder, &predictor);
    let disk_ok = disk_hash == run.fit.param_hash_before;

    report(
        "7",
        "two-phase freeze",
        hashes_equal && disk_ok,
        &format!("parameter hash {}...", &run.fit.param_hash_after[..16]),
    );
}

#[test]
fn criterion_8_component_selection_table() {
    let run = e2e();
    let expected_grid = [1usize, 2, 3, 4, 6, 8, 12, 16];
    let grid_ok = run
        .fit
        .table
        .iter()
        .map(|r| r.c)
        .collect::<Vec<_>>()
        == expected_grid;

    // argmax with smallest-C tie-breaking.
    let best_auroc = run
        .fit
        .table
        .iter()
        .map(|r| r.auroc)
        .fold(f64::NEG_INFINITY, f64::max);
    let expected_c = run
        .fit
        .table
        .iter()
        .filter(|r| r.auroc == best_auroc)
        .map(|r| r.c)
        .min()
        .expect("table non-empty");
    let select_ok = run.fit.selected_c == expected_c;

    // The CSV artifact has one row per grid value plus the header.
    let csv = std::fs::read_to_string(RunPaths::of(&run.config).component_table())
        .expect("component table exists");
    let rows = csv.trim_end().lines().count();
    let csv_ok = rows == expected_grid.len() + 1 && csv.starts_with("c,auroc,selected,note");

    report(
        "8",
        "component-selection harness",
        grid_ok && select_ok && csv_ok,
        &format!("selected C = {} from {} rows", run.fit.selected_c, rows - 1),
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism
// ---------------------------------------------------------------------------

fn small_config(out: &std::path::Path) -> RunConfig {
    let mut config = RunConfig::desk();
    config.out_root = out.to_path_buf();
    config.dataset.n_train = 60;
    config.dataset.n_dev = 30;
    config.dataset.n_eval = 30;
    config.phase1.epochs = 5;
    config.phase2.epochs = 8;
    config.gmm.grid = vec![1, 2];
    config.validate().expect("small config valid");
    config
}

fn run_pipeline(out: &std::path::Path) -> std::path::PathBuf {
    let config = small_config(out);
    cmd_generate(&config).expect("generate");
    cmd_train(&config).expect("train");
    cmd_fit_reliability(&config).expect("fit");
    cmd_evaluate(&config).expect("evaluate");
    config.run_dir()
}

fn collect_files(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .expect("readable dir")
            .map(|e| e.expect("entry").path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let run_a = run_pipeline(dir_a.path());
    let run_b = run_pipeline(dir_b.path());

    let files_a = collect_files(&run_a);
    let files_b = collect_files(&run_b);
    let rel = |files: &[std::path::PathBuf], root: &std::path::Path| -> Vec<std::path::PathBuf> {
        files.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    assert_eq!(rel(&files_a, &run_a), rel(&files_b, &run_b), "artifact sets differ");

    let mut compared = 0;
    for (a, b) in files_a.iter().zip(&files_b) {
        let ca = std::fs::read(a).expect("readable");
        let cb = std::fs::read(b).expect("readable");
        assert_eq!(ca, cb, "artifact differs between reruns: {}", a.display());
        compared += 1;
    }
    report(
        "9",
        "determinism",
        compared > 0,
        &format!("{compared} artifacts bit-identical across two full pipeline runs"),
    );
}
