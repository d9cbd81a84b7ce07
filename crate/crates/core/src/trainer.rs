//! Two-stage training orchestration.
//!
//! Stage one pretrains the activity classifier with BCE + Adam and keeps the
//! checkpoint with the best validation AUC. Stage two alternates one
//! discriminator update and one generator update per step, with the
//! classifier frozen throughout; only active training subjects feed the
//! generator and only real inactive subjects feed the discriminator's real
//! branch. Every step appends its loss reports to a JSON-lines log whose
//! header echoes the loss weights, and the training state checkpoints
//! periodically so an interrupted run resumes bit-exactly.

use crate::config::{AdversarialConfig, ClassifierConfig};
use crate::error::{TensorError, TrainError};
use crate::eval::{auc, build_report, EvalConfig};
use crate::models::{classifier_forward, GeneratorArch, ResNetArch};
use crate::objective::{
    classifier_pretrain_loss, discriminator_loss, generator_loss, DiscLossReport, GenLossReport,
    LossWeights,
};
use crate::params::{adam_step, load_checkpoint, save_checkpoint, ParamStore};
use crate::phantom::{splitmix, Dataset, Split, SubjectRecord};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

const TAG_ACTIVE: u64 = 0x414354; // "ACT"
const TAG_INACTIVE: u64 = 0x494e414354; // "INACT"
const TAG_CLF: u64 = 0x434c46; // "CLF"
const TAG_GEN: u64 = 0x47454e; // "GEN"
const TAG_DISC: u64 = 0x44495343; // "DISC"

fn epoch_perm(seed: u64, tag: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mix = splitmix(seed ^ tag ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn load_split(dataset: &Dataset, split: Split) -> Result<Vec<SubjectRecord>, TrainError> {
    let metas: Vec<_> = dataset.subjects(split).cloned().collect();
    let records: Vec<SubjectRecord> = metas
        .par_iter()
        .map(|m| dataset.load_subject(m))
        .collect::<Result<_, _>>()?;
    Ok(records)
}

/// Classifier pretraining result.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainOutcome {
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub test_auc: f64,
    pub checkpoint: PathBuf,
}

/// Trains the activity classifier, keeping the epoch with the best
/// validation AUC; returns the frozen winner.
pub fn pretrain_classifier(
    dataset: &Dataset,
    clf_arch: &ResNetArch,
    cfg: &ClassifierConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(ParamStore<f32>, PretrainOutcome), TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let train = load_split(dataset, Split::Train)?;
    let val = load_split(dataset, Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyBatch("train/val split"));
    }

    let mut store: ParamStore<f32> = clf_arch.init_params("f", splitmix(seed ^ TAG_CLF));
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let log_path = out_dir.join("pretrain_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    for epoch in 0..cfg.epochs {
        let order = epoch_perm(seed, TAG_CLF, epoch, train.len());
        // Seeded flip augmentation: with only a few hundred training
        // subjects the classifier otherwise memorizes noise textures
        // instead of learning the planted causes.
        let mut flip_rng =
            ChaCha8Rng::seed_from_u64(splitmix(seed ^ TAG_CLF ^ 0xF11B ^ epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<crate::phantom::Image> = chunk
                .iter()
                .map(|&i| {
                    train[i].baseline.flipped(flip_rng.gen::<bool>(), flip_rng.gen::<bool>())
                })
                .collect();
            let batch: Vec<(&crate::phantom::Image, bool)> = images
                .iter()
                .zip(chunk.iter())
                .map(|(img, &i)| (img, train[i].activity_label))
                .collect();
            let (loss, grads) = classifier_pretrain_loss(clf_arch, &store, &batch)?;
            adam_step(&mut store, &grads, cfg.adam)?;
            epoch_loss += loss;
            batches += 1;
        }

        let val_auc = split_auc(&val, clf_arch, &store)?;
        writeln!(
            log,
            "{}",
            json!({
                "type": "epoch",
                "epoch": epoch,
                "mean_loss": epoch_loss / batches.max(1) as f64,
                "val_auc": val_auc,
            })
        )?;
        if best.as_ref().map_or(true, |(_, b, _)| val_auc > *b) {
            best = Some((epoch, val_auc, store.clone()));
        }
    }
    log.flush()?;

    let (best_epoch, best_val_auc, mut winner) = best.expect("at least one epoch");
    winner.freeze();
    let ckpt = out_dir.join("classifier.ckpt");
    let meta = json!({
        "kind": "classifier",
        "arch": clf_arch,
        "best_epoch": best_epoch,
        "val_auc": best_val_auc,
    });
    save_checkpoint(&winner, meta, false, best_epoch as u64, &ckpt)?;

    let test = load_split(dataset, Split::Test)?;
    let test_auc = split_auc(&test, clf_arch, &winner)?;
    let outcome =
        PretrainOutcome { best_epoch, best_val_auc, test_auc, checkpoint: ckpt };
    Ok((winner, outcome))
}

fn split_auc(
    records: &[SubjectRecord],
    clf_arch: &ResNetArch,
    store: &ParamStore<f32>,
) -> Result<f64, TrainError> {
    let scored: Vec<(f64, bool)> = records
        .par_iter()
        .map(|r| -> Result<(f64, bool), TrainError> {
            let logit = classifier_forward(clf_arch, store, &r.baseline)?;
            Ok((logit as f64, r.activity_label))
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let labels: Vec<bool> = scored.iter().map(|(_, l)| *l).collect();
    auc(&scores, &labels).map_err(|e| TrainError::Invalid(e.to_string()))
}

#[derive(Debug, Serialize)]
struct LogHeader<'a> {
    r#type: &'static str,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lambdas: &'a LossWeights,
    adam: crate::params::AdamHp,
}

#[derive(Debug, Serialize)]
struct DiscStepRecord {
    r#type: &'static str,
    step: u64,
    epoch: usize,
    arm: &'static str,
    losses: DiscLossReport,
    lambdas: LossWeights,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct GenStepRecord {
    r#type: &'static str,
    step: u64,
    epoch: usize,
    arm: &'static str,
    losses: GenLossReport,
    lambdas: LossWeights,
    seed: u64,
}

/// Adversarial training result.
#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub generator_checkpoint: PathBuf,
    pub discriminator_checkpoint: PathBuf,
    pub state_checkpoint: PathBuf,
    pub log: PathBuf,
}

struct TrainState {
    g_store: ParamStore<f32>,
    d_store: ParamStore<f32>,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
}

fn save_train_state(
    state: &TrainState,
    gen_arch: &GeneratorArch,
    disc_arch: &ResNetArch,
    weights: &LossWeights,
    seed: u64,
    path: &Path,
) -> Result<(), TrainError> {
    let mut merged = ParamStore::new();
    for (name, e) in state.g_store.iter() {
        merged.insert_entry(name, e.clone());
    }
    for (name, e) in state.d_store.iter() {
        merged.insert_entry(name, e.clone());
    }
    let meta = json!({
        "kind": "train_state",
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "seed": seed,
        "weights": weights,
        "gen_arch": gen_arch,
        "disc_arch": disc_arch,
    });
    save_checkpoint(&merged, meta, true, state.step, path)?;
    Ok(())
}

fn load_train_state(
    path: &Path,
    gen_arch: &GeneratorArch,
    disc_arch: &ResNetArch,
    weights: &LossWeights,
    seed: u64,
) -> Result<TrainState, TrainError> {
    let (merged, meta) = load_checkpoint(path)?;
    let m = &meta.meta;
    if m["kind"] != "train_state" {
        return Err(TrainError::Invalid(format!("{} is not a training state", path.display())));
    }
    if m["seed"] != json!(seed) || m["weights"] != serde_json::to_value(weights).unwrap() {
        return Err(TrainError::Invalid(
            "resume seed/weights differ from the checkpointed run".into(),
        ));
    }
    if m["gen_arch"] != serde_json::to_value(gen_arch).unwrap()
        || m["disc_arch"] != serde_json::to_value(disc_arch).unwrap()
    {
        return Err(TrainError::Invalid("resume architecture differs".into()));
    }
    let mut g_store = ParamStore::new();
    let mut d_store = ParamStore::new();
    for (name, e) in merged.iter() {
        if name.starts_with("g.") {
            g_store.insert_entry(name, e.clone());
        } else if name.starts_with("d.") {
            d_store.insert_entry(name, e.clone());
        } else {
            return Err(TrainError::Invalid(format!("unexpected tensor {name} in state")));
        }
    }
    Ok(TrainState {
        g_store,
        d_store,
        step: meta.training_step,
        epoch: m["epoch"].as_u64().unwrap_or(0) as usize,
        batch_in_epoch: m["batch_in_epoch"].as_u64().unwrap_or(0) as usize,
    })
}

/// Alternating adversarial training with a frozen classifier.
///
/// Resumes from `resume` when given; the resumed run reproduces exactly the
/// step records an uninterrupted run would have written from that point.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial(
    dataset: &Dataset,
    gen_arch: &GeneratorArch,
    disc_arch: &ResNetArch,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    cfg: &AdversarialConfig,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(ParamStore<f32>, TrainOutcome), TrainError> {
    std::fs::create_dir_all(out_dir)?;
    if !f_store.is_frozen() {
        return Err(TrainError::Invalid("classifier must be frozen".into()));
    }
    cfg.weights.validate()?;
    let f_snapshot = f_store.clone();

    let train = load_split(dataset, Split::Train)?;
    let actives: Vec<&SubjectRecord> = train.iter().filter(|r| r.activity_label).collect();
    let inactives: Vec<&SubjectRecord> = train.iter().filter(|r| !r.activity_label).collect();
    if actives.is_empty() {
        return Err(TrainError::EmptyBatch("active training subjects"));
    }
    if inactives.is_empty() {
        return Err(TrainError::EmptyBatch("inactive training subjects"));
    }

    let state_path = out_dir.join("train_state.ckpt");
    let mut state = match resume {
        Some(path) => load_train_state(path, gen_arch, disc_arch, &cfg.weights, seed)?,
        None => TrainState {
            g_store: gen_arch.init_params(splitmix(seed ^ TAG_GEN)),
            d_store: disc_arch.init_params("d", splitmix(seed ^ TAG_DISC)),
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        },
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?,
    );
    writeln!(
        log,
        "{}",
        serde_json::to_string(&LogHeader {
            r#type: "header",
            seed,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lambdas: &cfg.weights,
            adam: cfg.adam,
        })
        .expect("header serializes")
    )?;

    let n_batches = actives.len().div_ceil(cfg.batch_size);
    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        let act_perm = epoch_perm(seed, TAG_ACTIVE, epoch, actives.len());
        let inact_perm = epoch_perm(seed, TAG_INACTIVE, epoch, inactives.len());
        let first_batch = if epoch == start_epoch { state.batch_in_epoch } else { 0 };
        for b in first_batch..n_batches {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(actives.len());
            let active_batch: Vec<&SubjectRecord> =
                act_perm[lo..hi].iter().map(|&i| actives[i]).collect();
            // The generator sees only active subjects.
            debug_assert!(active_batch.iter().all(|r| r.activity_label));
            let inactive_batch: Vec<&SubjectRecord> = (lo..hi)
                .map(|k| inactives[inact_perm[k % inactives.len()]])
                .collect();

            // One discriminator update, then one generator update.
            let (d_report, d_grads) = discriminator_loss(
                disc_arch,
                &state.d_store,
                gen_arch,
                &state.g_store,
                &active_batch,
                &inactive_batch,
                &cfg.weights,
            )
            .map_err(|e| wrap_nonfinite(e, state.step, "discriminator"))?;
            adam_step(&mut state.d_store, &d_grads, cfg.adam)?;

            let (g_report, g_grads) = generator_loss(
                gen_arch,
                &state.g_store,
                clf_arch,
                f_store,
                disc_arch,
                &state.d_store,
                &active_batch,
                &cfg.weights,
            )
            .map_err(|e| wrap_nonfinite(e, state.step, "generator"))?;
            adam_step(&mut state.g_store, &g_grads, cfg.adam)?;

            state.step += 1;
            writeln!(
                log,
                "{}",
                serde_json::to_string(&DiscStepRecord {
                    r#type: "step",
                    step: state.step,
                    epoch,
                    arm: "discriminator",
                    losses: d_report,
                    lambdas: cfg.weights,
                    seed,
                })
                .expect("record serializes")
            )?;
            writeln!(
                log,
                "{}",
                serde_json::to_string(&GenStepRecord {
                    r#type: "step",
                    step: state.step,
                    epoch,
                    arm: "generator",
                    losses: g_report,
                    lambdas: cfg.weights,
                    seed,
                })
                .expect("record serializes")
            )?;

            // Checkpoint the position of the NEXT batch to run.
            if state.step % cfg.checkpoint_every == 0 {
                let (ne, nb) =
                    if b + 1 == n_batches { (epoch + 1, 0) } else { (epoch, b + 1) };
                state.epoch = ne;
                state.batch_in_epoch = nb;
                log.flush()?;
                save_train_state(&state, gen_arch, disc_arch, &cfg.weights, seed, &state_path)?;
            }
        }
    }
    log.flush()?;

    state.epoch = cfg.epochs;
    state.batch_in_epoch = 0;
    save_train_state(&state, gen_arch, disc_arch, &cfg.weights, seed, &state_path)?;

    // The frozen classifier must be bit-identical across the whole stage.
    assert!(
        f_store.params_equal(&f_snapshot),
        "frozen classifier parameters changed during adversarial training"
    );

    let g_path = out_dir.join("generator.ckpt");
    save_checkpoint(
        &state.g_store,
        json!({"kind": "generator", "arch": gen_arch, "weights": cfg.weights, "seed": seed}),
        false,
        state.step,
        &g_path,
    )?;
    let d_path = out_dir.join("discriminator.ckpt");
    save_checkpoint(
        &state.d_store,
        json!({"kind": "discriminator", "arch": disc_arch, "seed": seed}),
        false,
        state.step,
        &d_path,
    )?;

    let outcome = TrainOutcome {
        steps: state.step,
        generator_checkpoint: g_path,
        discriminator_checkpoint: d_path,
        state_checkpoint: state_path,
        log: log_path,
    };
    Ok((state.g_store, outcome))
}

fn wrap_nonfinite(e: TrainError, step: u64, arm: &'static str) -> TrainError {
    match e {
        TrainError::NonFiniteValue | TrainError::Tensor(TensorError::NonFinite { .. }) => {
            TrainError::NonFiniteLoss { step, arm }
        }
        other => other,
    }
}

/// One ablation arm's evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub lambda_vox_minus: f64,
    pub recon_ssim_mean: f64,
    pub recon_ssim_std: f64,
    pub cf_ssim_mean: f64,
    pub cf_ssim_std: f64,
    pub flip_rate: f64,
    pub localization_mean: f64,
}

/// Paired full-vs-ablated outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub full: ArmSummary,
    pub ablated: ArmSummary,
}

impl AblationOutcome {
    /// Two-row table mirroring the subject-faithfulness comparison.
    pub fn render_table(&self) -> String {
        let row = |name: &str, a: &ArmSummary| {
            format!(
                "{name:8} lambda_vox-={:<5} recon SSIM {:.4} +- {:.4}   CF SSIM {:.4} +- {:.4}   flip {:.3}\n",
                a.lambda_vox_minus, a.recon_ssim_mean, a.recon_ssim_std, a.cf_ssim_mean,
                a.cf_ssim_std, a.flip_rate
            )
        };
        let mut out = String::from("arm      losses          reconstruction           counterfactual\n");
        out.push_str(&row("full", &self.full));
        out.push_str(&row("ablated", &self.ablated));
        out
    }
}

/// Trains the full and the vox-minus-ablated arm under identical seeds and
/// data, evaluates both on the test split and persists the paired summary.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    dataset: &Dataset,
    gen_arch: &GeneratorArch,
    disc_arch: &ResNetArch,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    cfg: &AdversarialConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut arms = Vec::new();
    for (name, vox_minus) in [("full", cfg.weights.vox_minus), ("ablated", 0.0)] {
        let mut arm_cfg = cfg.clone();
        arm_cfg.weights.vox_minus = vox_minus;
        let arm_dir = out_dir.join(name);
        let (g_store, _) = train_adversarial(
            dataset, gen_arch, disc_arch, clf_arch, f_store, &arm_cfg, seed, &arm_dir, None,
        )?;
        let report = build_report(
            dataset, gen_arch, &g_store, clf_arch, f_store, eval_cfg, None,
        )
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
        report
            .save_json(&arm_dir.join("report.json"))
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        arms.push(ArmSummary {
            lambda_vox_minus: vox_minus,
            recon_ssim_mean: report.aggregates.recon_ssim_mean,
            recon_ssim_std: report.aggregates.recon_ssim_std,
            cf_ssim_mean: report.aggregates.cf_ssim_mean,
            cf_ssim_std: report.aggregates.cf_ssim_std,
            flip_rate: report.aggregates.flip_rate,
            localization_mean: report.aggregates.localization_mean,
        });
    }
    let ablated = arms.pop().expect("two arms");
    let full = arms.pop().expect("two arms");
    let outcome = AblationOutcome { full, ablated };
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_vec_pretty(&outcome).map_err(|e| TrainError::Invalid(e.to_string()))?,
    )?;
    Ok(outcome)
}
