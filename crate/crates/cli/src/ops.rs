//! Subcommand implementations.

use crate::{CliError, Command, Common};
use cfsynth::config::RunConfig;
use cfsynth::eval::{build_report, difference_map, render_diff_png};
use cfsynth::gradcheck;
use cfsynth::models::{generator_forward, GeneratorArch, ResNetArch, TargetClass};
use cfsynth::params::load_checkpoint;
use cfsynth::phantom::{build_dataset, load_dataset, Dataset, Image, Split};
use cfsynth::trainer::{pretrain_classifier, run_ablation, train_adversarial};
use cfsynth::ParamStore;
use std::path::{Path, PathBuf};

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::PretrainClf { common } => pretrain_clf(&common),
        Command::Train { common, lambda_vox_minus, resume } => {
            train(&common, lambda_vox_minus, resume.as_deref())
        }
        Command::Ablate { common, lambda_vox_minus } => ablate(&common, lambda_vox_minus),
        Command::Synthesize { common, subjects } => synthesize(&common, &subjects),
        Command::Evaluate { common } => evaluate(&common),
        Command::Gradcheck { common } => run_gradcheck(&common),
    }
}

fn setup(common: &Common) -> Result<(RunConfig, u64), CliError> {
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        // Ignore the error from configuring the pool twice (tests call
        // dispatch repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?,
        None => RunConfig::defaults(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn require_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    let Some(path) = &cfg.dataset else {
        return Err(CliError::Validation("config has no dataset path".into()));
    };
    if !path.join("manifest.json").exists() {
        return Err(CliError::Validation(format!(
            "dataset manifest not found at {}",
            path.join("manifest.json").display()
        )));
    }
    // Input datasets are read-only for every stage.
    let ds_abs = std::fs::canonicalize(path)
        .map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let out_abs = std::fs::canonicalize(out)
        .map_err(|e| CliError::Runtime(format!("output {}: {e}", out.display())))?;
    if ds_abs == out_abs {
        return Err(CliError::Validation(
            "output directory must differ from the dataset directory".into(),
        ));
    }
    load_dataset(path).map_err(|e| CliError::Validation(format!("load dataset: {e}")))
}

fn require_checkpoint(
    path: Option<&PathBuf>,
    what: &str,
) -> Result<(ParamStore<f32>, serde_json::Value), CliError> {
    let Some(path) = path else {
        return Err(CliError::Validation(format!("config has no {what} checkpoint path")));
    };
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "{what} checkpoint not found at {}",
            path.display()
        )));
    }
    let (store, meta) =
        load_checkpoint(path).map_err(|e| CliError::Validation(format!("{what}: {e}")))?;
    Ok((store, meta.meta))
}

fn load_classifier(cfg: &RunConfig) -> Result<(ResNetArch, ParamStore<f32>), CliError> {
    let (store, meta) = require_checkpoint(cfg.classifier_checkpoint.as_ref(), "classifier")?;
    let arch: ResNetArch = serde_json::from_value(meta["arch"].clone())
        .map_err(|e| CliError::Validation(format!("classifier arch descriptor: {e}")))?;
    arch.validate("f", &store)
        .map_err(|e| CliError::Validation(format!("classifier checkpoint: {e}")))?;
    if !store.is_frozen() {
        return Err(CliError::Validation("classifier checkpoint is not frozen".into()));
    }
    Ok((arch, store))
}

fn load_generator(cfg: &RunConfig) -> Result<(GeneratorArch, ParamStore<f32>), CliError> {
    let (store, meta) = require_checkpoint(cfg.generator_checkpoint.as_ref(), "generator")?;
    let arch: GeneratorArch = serde_json::from_value(meta["arch"].clone())
        .map_err(|e| CliError::Validation(format!("generator arch descriptor: {e}")))?;
    arch.validate(&store)
        .map_err(|e| CliError::Validation(format!("generator checkpoint: {e}")))?;
    Ok((arch, store))
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn gen_data(common: &Common) -> Result<(), CliError> {
    let (cfg, seed) = setup(common)?;
    let meta = crate::meta::start(&common.out, "gen-data", &cfg, seed)?;
    let (_ds, balance) =
        build_dataset(cfg.n_subjects, seed, &cfg.data, &common.out).map_err(runtime)?;
    println!(
        "dataset: {} subjects ({} train / {} val / {} test) at {}",
        balance.n_subjects,
        balance.n_train,
        balance.n_val,
        balance.n_test,
        common.out.display()
    );
    println!(
        "class balance: active {:.1}% | of actives: gad {:.1}%, marker {:.1}%, high-load {:.1}%",
        100.0 * balance.active_fraction,
        100.0 * balance.gad_fraction_of_active,
        100.0 * balance.marker_fraction_of_active,
        100.0 * balance.high_load_fraction_of_active
    );
    meta.finish()
}

fn pretrain_clf(common: &Common) -> Result<(), CliError> {
    let (cfg, seed) = setup(common)?;
    let dataset = require_dataset(&cfg, &common.out)?;
    let meta = crate::meta::start(&common.out, "pretrain-clf", &cfg, seed)?;
    let arch = ResNetArch::classifier();
    let (_store, outcome) =
        pretrain_classifier(&dataset, &arch, &cfg.classifier, seed, &common.out)
            .map_err(runtime)?;
    println!(
        "classifier: best epoch {} | val AUC {:.4} | test AUC {:.4}",
        outcome.best_epoch, outcome.best_val_auc, outcome.test_auc
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    meta.finish()
}

fn train(
    common: &Common,
    lambda_vox_minus: Option<f64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let (mut cfg, seed) = setup(common)?;
    if let Some(l) = lambda_vox_minus {
        cfg.adversarial.weights.vox_minus = l;
    }
    let dataset = require_dataset(&cfg, &common.out)?;
    let (clf_arch, f_store) = load_classifier(&cfg)?;
    let meta = crate::meta::start(&common.out, "train", &cfg, seed)?;
    let (_g, outcome) = train_adversarial(
        &dataset,
        &GeneratorArch::desk(),
        &ResNetArch::discriminator(),
        &clf_arch,
        &f_store,
        &cfg.adversarial,
        seed,
        &common.out,
        resume,
    )
    .map_err(runtime)?;
    println!(
        "trained {} steps | generator {} | log {}",
        outcome.steps,
        outcome.generator_checkpoint.display(),
        outcome.log.display()
    );
    meta.finish()
}

fn ablate(common: &Common, lambda_vox_minus: Option<f64>) -> Result<(), CliError> {
    let (mut cfg, seed) = setup(common)?;
    if let Some(l) = lambda_vox_minus {
        cfg.adversarial.weights.vox_minus = l;
    }
    let dataset = require_dataset(&cfg, &common.out)?;
    let (clf_arch, f_store) = load_classifier(&cfg)?;
    let meta = crate::meta::start(&common.out, "ablate", &cfg, seed)?;
    let outcome = run_ablation(
        &dataset,
        &GeneratorArch::desk(),
        &ResNetArch::discriminator(),
        &clf_arch,
        &f_store,
        &cfg.adversarial,
        &cfg.eval,
        seed,
        &common.out,
    )
    .map_err(runtime)?;
    print!("{}", outcome.render_table());
    meta.finish()
}

fn synthesize(common: &Common, subjects: &[String]) -> Result<(), CliError> {
    let (cfg, seed) = setup(common)?;
    let dataset = require_dataset(&cfg, &common.out)?;
    let (gen_arch, g_store) = load_generator(&cfg)?;
    let meta = crate::meta::start(&common.out, "synthesize", &cfg, seed)?;

    let selected: Vec<String> = if subjects.is_empty() {
        dataset
            .subjects(Split::Test)
            .filter(|m| m.label != 0)
            .map(|m| m.id.clone())
            .collect()
    } else {
        for id in subjects {
            if dataset.meta(id).is_none() {
                return Err(CliError::Validation(format!("unknown subject id {id}")));
            }
        }
        subjects.to_vec()
    };
    if selected.is_empty() {
        return Err(CliError::Validation("no subjects selected".into()));
    }

    for id in &selected {
        let sm = dataset.meta(id).expect("validated above").clone();
        let record = dataset.load_subject(&sm).map_err(runtime)?;
        let recon =
            generator_forward(&gen_arch, &g_store, &record.baseline, TargetClass::Active)
                .map_err(runtime)?;
        let cf = generator_forward(&gen_arch, &g_store, &record.baseline, TargetClass::Inactive)
            .map_err(runtime)?;
        let diff = difference_map(id, &record.baseline, &cf).map_err(runtime)?;

        let p = |suffix: &str| common.out.join(format!("{id}_{suffix}"));
        recon.write_f32(&p("recon.f32")).map_err(runtime)?;
        cf.write_f32(&p("cf.f32")).map_err(runtime)?;
        diff.map().write_f32(&p("diff.f32")).map_err(runtime)?;
        write_gray_png(&recon, &p("recon.png"))?;
        write_gray_png(&cf, &p("cf.png"))?;
        render_diff_png(&record.baseline, &cf, &record.future, &p("diff.png"))
            .map_err(runtime)?;
    }
    println!("synthesized {} subjects into {}", selected.len(), common.out.display());
    meta.finish()
}

fn write_gray_png(img: &Image, path: &Path) -> Result<(), CliError> {
    let mut out = image::GrayImage::new(img.w() as u32, img.h() as u32);
    for y in 0..img.h() {
        for x in 0..img.w() {
            let v = (img.get(y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            out.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    out.save(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn evaluate(common: &Common) -> Result<(), CliError> {
    let (cfg, seed) = setup(common)?;
    let dataset = require_dataset(&cfg, &common.out)?;
    let (gen_arch, g_store) = load_generator(&cfg)?;
    let (clf_arch, f_store) = load_classifier(&cfg)?;
    let meta = crate::meta::start(&common.out, "evaluate", &cfg, seed)?;
    let report = build_report(
        &dataset,
        &gen_arch,
        &g_store,
        &clf_arch,
        &f_store,
        &cfg.eval,
        Some(&common.out.join("renders")),
    )
    .map_err(runtime)?;
    report.save_json(&common.out.join("report.json")).map_err(runtime)?;
    report.save_csv(&common.out.join("report.csv")).map_err(runtime)?;
    let a = &report.aggregates;
    println!(
        "evaluated {} active / {} inactive test subjects",
        a.n_active, a.n_inactive
    );
    println!(
        "SSIM: reconstruction {:.4} +- {:.4} | counterfactual {:.4} +- {:.4}",
        a.recon_ssim_mean, a.recon_ssim_std, a.cf_ssim_mean, a.cf_ssim_std
    );
    println!(
        "lesion area: real {:.2} | recon {:.2} | cf {:.2} | inactive {:.2}",
        a.real_area_mean, a.recon_area_mean, a.cf_area_mean, a.inactive_area_mean
    );
    println!(
        "gad prevalence: real {:.1}% | recon {:.1}% | cf {:.1}% | inactive {:.1}%",
        100.0 * a.real_gad_prevalence,
        100.0 * a.recon_gad_prevalence,
        100.0 * a.cf_gad_prevalence,
        100.0 * a.inactive_gad_prevalence
    );
    println!(
        "flip rate {:.3} | localization {:.2} (low-load marker subpop {:.2}, n={})",
        a.flip_rate, a.localization_mean, a.localization_marker_low_load_mean, a.n_marker_low_load
    );
    meta.finish()
}

fn run_gradcheck(common: &Common) -> Result<(), CliError> {
    let (cfg, seed) = setup(common)?;
    let meta = crate::meta::start(&common.out, "gradcheck", &cfg, seed)?;
    let report = gradcheck::run_suite(gradcheck::DEFAULT_TOLERANCE).map_err(runtime)?;
    print!("{}", report.render());
    let json = serde_json::to_vec_pretty(&report).map_err(runtime)?;
    std::fs::write(common.out.join("gradcheck_report.json"), json).map_err(runtime)?;
    meta.finish()?;
    if report.all_pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient checks failed".into()))
    }
}
