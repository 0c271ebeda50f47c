//! Pipeline commands behind the CLI: dataset generation, two-phase training,
//! reliability fitting (lGMM + error regressor) and evaluation. Every
//! command is a pure function of the resolved config and the artifacts it
//! reads; artifacts live under a run directory named by the config hash.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, seed_tags, RunConfig};
use crate::dataset::{
    generate_dataset, read_dataset, write_dataset, DatasetMeta, Scene, Split,
};
use crate::encoder::{neighbor_summary, preprocess_track, EncoderCheckpoint, EncoderModel};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, select_components, ComponentScore, GmmCheckpoint, GmmModel, Standardizer};
use crate::metrics::{evaluate, format_report, EvalOutputs};
use crate::nn::{assign_flat_params, collect_flat_grads, collect_flat_params, AdamW, NetGrads};
use crate::predictor::{mixture_nll, mixture_nll_grad, PredictorCheckpoint, PredictorModel};
use crate::uncertainty::{
    regression_target, train_error_regressor, ErrorRegressor, RegressorCheckpoint,
};

/// Artifact locations under one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn of(config: &RunConfig) -> Self {
        RunPaths { run_dir: config.run_dir() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.run_dir.join("resolved_config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.run_dir.join("data").join("dataset.jsonl")
    }
    pub fn encoder_ckpt(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("encoder.json")
    }
    pub fn predictor_ckpt(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("predictor.json")
    }
    pub fn gmm_ckpt(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("gmm.json")
    }
    pub fn regressor_ckpt(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("regressor.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.run_dir.join("reports").join("train_log.csv")
    }
    pub fn phase2_log(&self) -> PathBuf {
        self.run_dir.join("reports").join("phase2_log.csv")
    }
    pub fn component_table(&self) -> PathBuf {
        self.run_dir.join("reports").join("component_auroc.csv")
    }
    pub fn train_features(&self) -> PathBuf {
        self.run_dir.join("reports").join("features.csv")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.run_dir.join("reports").join("eval_report.json")
    }
    pub fn retention_csv(&self) -> PathBuf {
        self.run_dir.join("reports").join("retention.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.run_dir.join("reports").join("predictions.jsonl")
    }
    pub fn gmm_scores(&self) -> PathBuf {
        self.run_dir.join("reports").join("gmm_scores.csv")
    }
    pub fn uncertainty_csv(&self) -> PathBuf {
        self.run_dir.join("reports").join("uncertainty.csv")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub dev_ood: usize,
    pub eval_ood: usize,
    pub path: PathBuf,
}

pub fn cmd_generate(config: &RunConfig) -> Result<GenerateSummary> {
    let paths = RunPaths::of(config);
    let scenes = generate_dataset(&config.dataset)?;
    let path = paths.dataset();
    write_dataset(&scenes, DatasetMeta::of_config(&config.dataset), &path)?;
    write_text(&paths.resolved_config(), &(config.canonical_json() + "\n"))?;
    let count = |split, ood: Option<bool>| {
        scenes
            .iter()
            .filter(|s| s.split == split && ood.is_none_or(|o| s.ood_label == o))
            .count()
    };
    Ok(GenerateSummary {
        n_train: count(Split::Train, None),
        n_dev: count(Split::Dev, None),
        n_eval: count(Split::Eval, None),
        dev_ood: count(Split::Dev, Some(true)),
        eval_ood: count(Split::Eval, Some(true)),
        path,
    })
}

// ---------------------------------------------------------------------------
// phase-1 training
// ---------------------------------------------------------------------------

/// One training sample: a vehicle agent with its precomputed encoder inputs
/// and the agent-relative ground-truth future.
struct Prepared {
    pre: Vec<f64>,
    pooled: Option<Vec<f64>>,
    gt_rel: Vec<[f64; 2]>,
}

fn prepare_samples(scenes: &[Scene], radius: f64, split: Split) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for scene in scenes.iter().filter(|s| s.split == split) {
        let pres = scene
            .agents
            .iter()
            .map(preprocess_track)
            .collect::<Result<Vec<_>>>()?;
        for (i, agent) in scene.agents.iter().enumerate() {
            if agent.is_pedestrian() {
                continue;
            }
            let anchor = agent.last_position();
            out.push(Prepared {
                pre: pres[i].clone(),
                pooled: neighbor_summary(scene, &pres, i, radius),
                gt_rel: agent
                    .future
                    .iter()
                    .map(|p| [p[0] - anchor[0], p[1] - anchor[1]])
                    .collect(),
            });
        }
    }
    Ok(out)
}

struct SampleGrads {
    track: NetGrads,
    neighbor: Option<NetGrads>,
    weight: NetGrads,
    mean: NetGrads,
    scale: NetGrads,
}

fn sample_backward(
    encoder: &EncoderModel,
    predictor: &PredictorModel,
    s: &Prepared,
) -> Result<(f64, SampleGrads)> {
    let track_cache = encoder.track_net.forward_cached(&s.pre)?;
    let nb_cache = match &s.pooled {
        Some(p) => Some(encoder.neighbor_net.forward_cached(p)?),
        None => None,
    };
    let mut h = track_cache.output().to_vec();
    if let Some(c) = &nb_cache {
        for (a, b) in h.iter_mut().zip(c.output()) {
            *a += b;
        }
    }
    let (pred, dec) = predictor.decode_cached(&h)?;
    let loss = mixture_nll(&pred, &s.gt_rel)?;
    let g = mixture_nll_grad(&pred, &s.gt_rel)?;
    let (gw, dh_w) = predictor.weight_head.backward_cached(&dec.weight, &g.wrt_logits)?;
    let (gm, dh_m) = predictor
        .mean_head
        .backward_cached(&dec.mean, &g.displacement_grads())?;
    let (gs, dh_s) = predictor
        .scale_head
        .backward_cached(&dec.scale, &g.sigma_raw_flat())?;
    let dh: Vec<f64> = (0..h.len()).map(|i| dh_w[i] + dh_m[i] + dh_s[i]).collect();
    let (g_track, _) = encoder.track_net.backward_cached(&track_cache, &dh)?;
    let g_neighbor = match &nb_cache {
        Some(c) => Some(encoder.neighbor_net.backward_cached(c, &dh)?.0),
        None => None,
    };
    Ok((loss, SampleGrads { track: g_track, neighbor: g_neighbor, weight: gw, mean: gm, scale: gs }))
}

fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
}

pub struct Phase1Outcome {
    pub encoder: EncoderModel,
    pub predictor: PredictorModel,
    /// Mean training NLL per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains encoder and predictor end to end on the mixture NLL over the
/// train split.
pub fn train_phase1(config: &RunConfig, scenes: &[Scene], meta: &DatasetMeta) -> Result<Phase1Outcome> {
    let samples = prepare_samples(scenes, config.encoder.radius, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Degenerate("train split has no vehicle samples".into()));
    }
    let mut init_rng = ChaCha12Rng::seed_from_u64(config.subseed(seed_tags::MODEL_INIT));
    let mut encoder = EncoderModel::new(
        meta.t_h,
        config.encoder.feature_dim,
        config.encoder.radius,
        &mut init_rng,
    );
    let mut predictor = PredictorModel::new(
        config.encoder.feature_dim,
        config.predictor.n_modes,
        meta.t_f,
        &mut init_rng,
    );

    let n = samples.len();
    let batch = config.phase1.batch_size.clamp(1, n);
    let steps = config.phase1.epochs * n.div_ceil(batch);
    let params_now = collect_flat_params(&[
        &encoder.track_net,
        &encoder.neighbor_net,
        &predictor.weight_head,
        &predictor.mean_head,
        &predictor.scale_head,
    ]);
    let mut opt = AdamW::new(params_now.len(), config.phase1.lr, config.phase1.weight_decay, steps);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.subseed(seed_tags::SHUFFLE));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.phase1.epochs);

    for epoch in 0..config.phase1.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(batch).enumerate() {
            let mut acc = SampleGrads {
                track: NetGrads::zeros_of(&encoder.track_net),
                neighbor: Some(NetGrads::zeros_of(&encoder.neighbor_net)),
                weight: NetGrads::zeros_of(&predictor.weight_head),
                mean: NetGrads::zeros_of(&predictor.mean_head),
                scale: NetGrads::zeros_of(&predictor.scale_head),
            };
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (loss, g) = sample_backward(&encoder, &predictor, &samples[i])?;
                batch_loss += loss;
                acc.track.add_assign(&g.track);
                if let (Some(a), Some(gn)) = (acc.neighbor.as_mut(), g.neighbor.as_ref()) {
                    a.add_assign(gn);
                }
                acc.weight.add_assign(&g.weight);
                acc.mean.add_assign(&g.mean);
                acc.scale.add_assign(&g.scale);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss in epoch {epoch}, batch {batch_idx}"
                )));
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.track.scale(inv);
            acc.neighbor.as_mut().unwrap().scale(inv);
            acc.weight.scale(inv);
            acc.mean.scale(inv);
            acc.scale.scale(inv);

            let mut params = collect_flat_params(&[
                &encoder.track_net,
                &encoder.neighbor_net,
                &predictor.weight_head,
                &predictor.mean_head,
                &predictor.scale_head,
            ]);
            let grads = collect_flat_grads(&[
                &acc.track,
                acc.neighbor.as_ref().unwrap(),
                &acc.weight,
                &acc.mean,
                &acc.scale,
            ]);
            opt.step(&mut params, &grads).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}, batch {batch_idx}: {e}"))
            })?;
            assign_flat_params(
                &mut [
                    &mut encoder.track_net,
                    &mut encoder.neighbor_net,
                    &mut predictor.weight_head,
                    &mut predictor.mean_head,
                    &mut predictor.scale_head,
                ],
                &params,
            )?;
            loss_sum += batch_loss;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    Ok(Phase1Outcome { encoder, predictor, epoch_losses })
}

pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let paths = RunPaths::of(config);
    let data_path = paths.dataset();
    if !data_path.exists() {
        return Err(Error::MissingArtifacts(format!(
            "dataset not found at {}; run `generate` first",
            data_path.display()
        )));
    }
    let (scenes, meta) = read_dataset(&data_path)?;
    let out = train_phase1(config, &scenes, &meta)?;
    let fp = config.fingerprint();
    write_json(&paths.encoder_ckpt(), &out.encoder.checkpoint(&fp))?;
    write_json(&paths.predictor_ckpt(), &out.predictor.checkpoint(&fp))?;
    let mut csv = String::from("epoch,mean_nll\n");
    for (e, l) in out.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    write_text(&paths.train_log(), &csv)?;
    Ok(TrainSummary { epoch_losses: out.epoch_losses })
}

// ---------------------------------------------------------------------------
// phase 2: reliability modules
// ---------------------------------------------------------------------------

/// Hash over the exact parameter bytes of encoder and predictor; the
/// freeze-contract witness for phase 2.
pub fn param_hash(encoder: &EncoderModel, predictor: &PredictorModel) -> String {
    let mut h = Sha256::new();
    for net in [
        &encoder.track_net,
        &encoder.neighbor_net,
        &predictor.weight_head,
        &predictor.mean_head,
        &predictor.scale_head,
    ] {
        for v in net.flat_params() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

struct EncodedSample {
    scene_id: u64,
    agent_id: u64,
    ood: bool,
    h: Vec<f64>,
    gt_rel: Vec<[f64; 2]>,
}

fn encode_split(encoder: &EncoderModel, scenes: &[Scene], split: Split) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::new();
    for scene in scenes.iter().filter(|s| s.split == split) {
        let feats = encoder.encode_scene(scene)?;
        for (agent, feat) in scene.agents.iter().zip(&feats) {
            if agent.is_pedestrian() {
                continue;
            }
            let anchor = agent.last_position();
            out.push(EncodedSample {
                scene_id: scene.scene_id,
                agent_id: agent.agent_id,
                ood: scene.ood_label,
                h: feat.h.clone(),
                gt_rel: agent
                    .future
                    .iter()
                    .map(|p| [p[0] - anchor[0], p[1] - anchor[1]])
                    .collect(),
            });
        }
    }
    Ok(out)
}

pub struct FitSummary {
    pub selected_c: usize,
    pub table: Vec<ComponentScore>,
    pub param_hash_before: String,
    pub param_hash_after: String,
    pub final_train_mse: f64,
}

pub fn cmd_fit_reliability(config: &RunConfig) -> Result<FitSummary> {
    let paths = RunPaths::of(config);
    let missing: Vec<&str> = [
        (&paths.dataset(), "data/dataset.jsonl"),
        (&paths.encoder_ckpt(), "checkpoints/encoder.json"),
        (&paths.predictor_ckpt(), "checkpoints/predictor.json"),
    ]
    .iter()
    .filter(|(p, _)| !p.exists())
    .map(|&(_, n)| n)
    .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing.join(", ")));
    }
    let (scenes, _meta) = read_dataset(&paths.dataset())?;
    let encoder = EncoderModel::from_checkpoint(&read_json::<EncoderCheckpoint>(&paths.encoder_ckpt())?)?;
    let predictor =
        PredictorModel::from_checkpoint(&read_json::<PredictorCheckpoint>(&paths.predictor_ckpt())?)?;
    let hash_before = param_hash(&encoder, &predictor);

    let train = encode_split(&encoder, &scenes, Split::Train)?;
    let dev = encode_split(&encoder, &scenes, Split::Dev)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Degenerate("train or dev split has no vehicle samples".into()));
    }

    // Latent feature dump of the training split.
    {
        let dim = encoder.feature_dim;
        let mut csv = String::from("scene_id,agent_id");
        for d in 1..=dim {
            csv.push_str(&format!(",h_{d}"));
        }
        csv.push('\n');
        for s in &train {
            csv.push_str(&format!("{},{}", s.scene_id, s.agent_id));
            for v in &s.h {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        write_text(&paths.train_features(), &csv)?;
    }

    let train_feats: Vec<Vec<f64>> = train.iter().map(|s| s.h.clone()).collect();
    let dev_feats: Vec<Vec<f64>> = dev.iter().map(|s| s.h.clone()).collect();
    let dev_labels: Vec<bool> = dev.iter().map(|s| s.ood).collect();

    let standardizer = config
        .gmm
        .standardize
        .then(|| Standardizer::fit(&train_feats))
        .transpose()?;
    let (fit_train, fit_dev) = match &standardizer {
        Some(s) => (s.apply_all(&train_feats), s.apply_all(&dev_feats)),
        None => (train_feats.clone(), dev_feats.clone()),
    };

    let gmm_seed = config.subseed(seed_tags::GMM);
    let (selected_c, table) = select_components(
        &fit_train,
        &fit_dev,
        &dev_labels,
        &config.gmm.grid,
        gmm_seed,
        config.gmm.max_iter,
        config.gmm.tol,
    )?;
    let mut csv = String::from("c,auroc,selected,note\n");
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.c,
            row.auroc,
            (row.c == selected_c) as u8,
            row.note.as_deref().unwrap_or("")
        ));
    }
    write_text(&paths.component_table(), &csv)?;

    let mut gmm = em_fit(&fit_train, selected_c, gmm_seed, config.gmm.max_iter, config.gmm.tol)?;
    gmm.standardizer = standardizer;

    // Error-regression targets from the frozen predictor.
    let mut targets = Vec::with_capacity(train.len());
    for s in &train {
        let pred = predictor.decode(&s.h)?;
        targets.push(regression_target(&pred, &s.gt_rel)?);
    }
    let mut val_targets = Vec::with_capacity(dev.len());
    for s in &dev {
        let pred = predictor.decode(&s.h)?;
        val_targets.push(regression_target(&pred, &s.gt_rel)?);
    }
    let training = train_error_regressor(
        &train_feats,
        &targets,
        Some((&dev_feats, &val_targets)),
        config.phase2.epochs,
        config.phase2.lr,
        config.phase2.batch_size,
        config.phase2.weight_decay,
        config.subseed(seed_tags::REGRESSOR),
    )?;
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    for e in &training.epochs {
        csv.push_str(&format!(
            "{},{},{}\n",
            e.epoch,
            e.train_mse,
            e.val_mse.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    write_text(&paths.phase2_log(), &csv)?;

    let hash_after = param_hash(&encoder, &predictor);
    if hash_after != hash_before {
        return Err(Error::Numeric(
            "freeze contract violated: encoder/predictor parameters changed in phase 2".into(),
        ));
    }
    let fp = config.fingerprint();
    write_json(&paths.gmm_ckpt(), &gmm.checkpoint(&fp))?;
    write_json(&paths.regressor_ckpt(), &training.regressor.checkpoint(&fp))?;
    let final_train_mse = training.epochs.last().map(|e| e.train_mse).unwrap_or(f64::NAN);
    Ok(FitSummary {
        selected_c,
        table,
        param_hash_before: hash_before,
        param_hash_after: hash_after,
        final_train_mse,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PredictionLine<'a> {
    scene_id: u64,
    agent_id: u64,
    ood: u8,
    pi: &'a [f64],
    mu: &'a [Vec<[f64; 2]>],
    sigma: &'a [Vec<f64>],
    gt: &'a [[f64; 2]],
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<EvalOutputs> {
    let paths = RunPaths::of(config);
    let missing: Vec<&str> = [
        (&paths.dataset(), "data/dataset.jsonl"),
        (&paths.encoder_ckpt(), "checkpoints/encoder.json"),
        (&paths.predictor_ckpt(), "checkpoints/predictor.json"),
        (&paths.gmm_ckpt(), "checkpoints/gmm.json"),
        (&paths.regressor_ckpt(), "checkpoints/regressor.json"),
    ]
    .iter()
    .filter(|(p, _)| !p.exists())
    .map(|&(_, n)| n)
    .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing.join(", ")));
    }
    let (scenes, _meta) = read_dataset(&paths.dataset())?;
    let encoder = EncoderModel::from_checkpoint(&read_json::<EncoderCheckpoint>(&paths.encoder_ckpt())?)?;
    let predictor =
        PredictorModel::from_checkpoint(&read_json::<PredictorCheckpoint>(&paths.predictor_ckpt())?)?;
    let gmm = GmmModel::from_checkpoint(&read_json::<GmmCheckpoint>(&paths.gmm_ckpt())?)?;
    let regressor =
        ErrorRegressor::from_checkpoint(&read_json::<RegressorCheckpoint>(&paths.regressor_ckpt())?)?;

    let eval_scenes: Vec<Scene> = scenes.into_iter().filter(|s| s.split == Split::Eval).collect();
    let outputs = evaluate(
        &eval_scenes,
        &encoder,
        &predictor,
        &gmm,
        &regressor,
        config.retention_seed,
    )?;

    write_json(&paths.eval_report(), &outputs.report)?;

    let mut csv = String::from("estimator,fraction,mean_error\n");
    for (name, curve) in &outputs.curves {
        for (f, e) in &curve.points {
            csv.push_str(&format!("{name},{f},{e}\n"));
        }
    }
    write_text(&paths.retention_csv(), &csv)?;

    create_parent(&paths.predictions())?;
    let file = File::create(paths.predictions()).map_err(|e| Error::io(paths.predictions(), e))?;
    let mut w = BufWriter::new(file);
    for s in &outputs.samples {
        let line = PredictionLine {
            scene_id: s.scene_id,
            agent_id: s.agent_id,
            ood: s.ood as u8,
            pi: &s.prediction.pi,
            mu: &s.prediction.mu,
            sigma: &s.prediction.sigma,
            gt: &s.gt,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::io(paths.predictions(), e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(paths.predictions(), e))?;
    }
    w.flush().map_err(|e| Error::io(paths.predictions(), e))?;

    let mut csv = String::from("scene_id,agent_id,ood_label,alpha_hat\n");
    for s in &outputs.samples {
        csv.push_str(&format!("{},{},{},{}\n", s.scene_id, s.agent_id, s.ood as u8, s.alpha));
    }
    write_text(&paths.gmm_scores(), &csv)?;

    let mut csv = String::from("scene_id,agent_id,ood_label,e_true,e_hat\n");
    for s in &outputs.samples {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.scene_id, s.agent_id, s.ood as u8, s.e_log, s.e_hat
        ));
    }
    write_text(&paths.uncertainty_csv(), &csv)?;

    println!("{}", format_report(&outputs.report));
    Ok(outputs)
}

/// Full pipeline: generate, train, fit-reliability, evaluate.
pub fn cmd_all(config: &RunConfig) -> Result<EvalOutputs> {
    let summary = cmd_generate(config)?;
    println!(
        "generated {} train / {} dev ({} OOD) / {} eval ({} OOD) scenes at {}",
        summary.n_train,
        summary.n_dev,
        summary.dev_ood,
        summary.n_eval,
        summary.eval_ood,
        summary.path.display()
    );
    let train = cmd_train(config)?;
    println!(
        "phase 1: {} epochs, first loss {:.4}, final loss {:.4}",
        train.epoch_losses.len(),
        train.epoch_losses.first().unwrap_or(&f64::NAN),
        train.epoch_losses.last().unwrap_or(&f64::NAN)
    );
    let fit = cmd_fit_reliability(config)?;
    println!(
        "phase 2: selected C = {}, freeze hash {}..., final regressor MSE {:.4}",
        fit.selected_c,
        &fit.param_hash_after[..12],
        fit.final_train_mse
    );
    cmd_evaluate(config)
}
