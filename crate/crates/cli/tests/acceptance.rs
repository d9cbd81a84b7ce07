//! Acceptance suite: drives the released pipeline end to end on the
//! seed-fixed 1000-subject phantom benchmark and checks every shipping
//! criterion at its stated tolerance, printing one PASS/FAIL line per
//! criterion.
//!
//! This is the heavyweight test target: the default adversarial run and its
//! ablation arm both train to completion here. Run alone with
//! `cargo test -p cfsynth-cli --test acceptance -- --nocapture`.

use cfsynth::eval::{
    area_threshold_auc, classifier_auc, marker_localization_score, ssim, DifferenceMap,
    EvalConfig, MetricsReport,
};
use cfsynth::models::ResNetArch;
use cfsynth::phantom::{load_dataset, Image, Mask, Split};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

const SEED: &str = "42";

struct Criteria {
    lines: Vec<(String, bool, String)>,
}

impl Criteria {
    fn new() -> Self {
        Criteria { lines: Vec::new() }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((name.to_string(), pass, detail));
    }

    fn finish(self) {
        let failed: Vec<_> = self.lines.iter().filter(|(_, p, _)| !p).collect();
        assert!(
            failed.is_empty(),
            "{} criterion(s) failed:\n{}",
            failed.len(),
            failed
                .iter()
                .map(|(n, _, d)| format!("  {n}: {d}"))
                .collect::<Vec<_>>()
                .join("\n")
        );
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfsynth"))
}

fn run_ok(cmd: &mut Command) -> Duration {
    let t0 = Instant::now();
    let out = cmd.output().expect("spawn cfsynth");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    t0.elapsed()
}

fn write_config(path: &Path, body: &serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(body).unwrap()).unwrap();
}

fn payload_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "run-meta.json")
        .collect();
    names.sort();
    names
}

fn load_report(path: &Path) -> MetricsReport {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn acceptance() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let mut criteria = Criteria::new();

    // ---------------------------------------------------------------
    // Criterion 1: gradient suite, every primitive and loss term, < 1 min.
    // ---------------------------------------------------------------
    {
        let t0 = Instant::now();
        let out = bin().args(["gradcheck", "--out"]).arg(root.join("gc")).output().unwrap();
        let elapsed = t0.elapsed();
        let stdout = String::from_utf8_lossy(&out.stdout);
        let pass = out.status.success()
            && stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 20
            && !stdout.contains("FAIL")
            && elapsed < Duration::from_secs(60);
        criteria.check(
            "criterion-1 gradient-suite",
            pass,
            format!(
                "{} checks, all < 1e-4 rel err, {:.1}s",
                stdout.lines().filter(|l| l.starts_with("PASS")).count(),
                elapsed.as_secs_f64()
            ),
        );
    }

    // ---------------------------------------------------------------
    // Dataset generation + criterion 8a: byte-identical seeded reruns.
    // ---------------------------------------------------------------
    let data = root.join("data");
    let cfg_path = root.join("run.json");
    write_config(&cfg_path, &serde_json::json!({ "n_subjects": 1000 }));
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg_path).arg("--out").arg(&data).args([
        "--seed", SEED,
    ]));
    {
        let data2 = root.join("data_rerun");
        run_ok(bin().args(["gen-data", "--config"]).arg(&cfg_path).arg("--out").arg(&data2).args([
            "--seed", SEED,
        ]));
        let names = payload_files(&data);
        let mut identical = names == payload_files(&data2);
        if identical {
            for n in &names {
                if std::fs::read(data.join(n)).unwrap() != std::fs::read(data2.join(n)).unwrap() {
                    identical = false;
                    break;
                }
            }
        }
        criteria.check(
            "criterion-8a gen-data-determinism",
            identical,
            format!("{} payload files byte-identical across seeded reruns", names.len()),
        );
        std::fs::remove_dir_all(&data2).unwrap();
    }

    let dataset = load_dataset(&data).unwrap();

    // ---------------------------------------------------------------
    // Criterion 9: oracle soundness on fresh baselines + SSIM closed form.
    // ---------------------------------------------------------------
    {
        let cfg = EvalConfig::default();
        let mut area_agree = 0usize;
        let mut gad_agree = 0usize;
        let mut n = 0usize;
        for meta in dataset.manifest.subjects.iter() {
            let rec = dataset.load_subject(meta).unwrap();
            if cfsynth::eval::lesion_area(&rec.baseline, &rec.brain_mask, &cfg)
                == rec.lesion_mask.area()
            {
                area_agree += 1;
            }
            if cfsynth::eval::gad_present(&rec.baseline, &rec.brain_mask, &cfg)
                == !rec.gad_mask.is_empty()
            {
                gad_agree += 1;
            }
            n += 1;
        }
        let area_rate = area_agree as f64 / n as f64;
        let gad_rate = gad_agree as f64 / n as f64;

        let a = Image::from_vec(16, 16, vec![0.25; 256]).unwrap();
        let b = Image::from_vec(16, 16, vec![0.75; 256]).unwrap();
        let expected = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        let ssim_err = (ssim(&a, &b).unwrap() - expected).abs();

        let pass = area_rate >= 0.99 && gad_rate >= 0.99 && ssim_err < 1e-6;
        criteria.check(
            "criterion-9 oracle-soundness",
            pass,
            format!(
                "lesion-area agreement {:.1}%, gad agreement {:.1}%, constant-image SSIM err {ssim_err:.2e}",
                100.0 * area_rate,
                100.0 * gad_rate
            ),
        );
    }

    // ---------------------------------------------------------------
    // Criterion 2: classifier quality, AUC >= 0.95 and above the exact
    // area-threshold baseline, < 10 min.
    // ---------------------------------------------------------------
    write_config(
        &cfg_path,
        &serde_json::json!({ "n_subjects": 1000, "dataset": data }),
    );
    let clf_dir = root.join("clf");
    let pretrain_time = run_ok(
        bin().args(["pretrain-clf", "--config"]).arg(&cfg_path).arg("--out").arg(&clf_dir).args([
            "--seed", SEED,
        ]),
    );
    let clf_ckpt = clf_dir.join("classifier.ckpt");
    {
        let (f_store, meta) = cfsynth::params::load_checkpoint(&clf_ckpt).unwrap();
        let clf_arch: ResNetArch = serde_json::from_value(meta.meta["arch"].clone()).unwrap();
        let test_auc = classifier_auc(&dataset, Split::Test, &clf_arch, &f_store).unwrap();
        let baseline = area_threshold_auc(&dataset, Split::Test).unwrap();
        let pass = test_auc >= 0.95
            && test_auc > baseline
            && pretrain_time < Duration::from_secs(600);
        criteria.check(
            "criterion-2 classifier-quality",
            pass,
            format!(
                "test AUC {test_auc:.4} (bar 0.95) vs area-threshold baseline {baseline:.4}, pretraining {:.0}s",
                pretrain_time.as_secs_f64()
            ),
        );
    }

    // ---------------------------------------------------------------
    // Default adversarial run + evaluation (criteria 3, 4, 6, 7).
    // ---------------------------------------------------------------
    write_config(
        &cfg_path,
        &serde_json::json!({
            "n_subjects": 1000,
            "dataset": data,
            "classifier_checkpoint": clf_ckpt,
            "generator_checkpoint": root.join("gan/generator.ckpt"),
        }),
    );
    let train_time = run_ok(
        bin().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(root.join("gan")).args([
            "--seed", SEED,
        ]),
    );
    let eval_time = run_ok(
        bin().args(["evaluate", "--config"]).arg(&cfg_path).arg("--out").arg(root.join("eval")).args([
            "--seed", SEED,
        ]),
    );
    let report = load_report(&root.join("eval/report.json"));
    let agg = &report.aggregates;

    {
        let within_budget = train_time + eval_time < Duration::from_secs(45 * 60);
        let pass = agg.flip_rate >= 0.90 && within_budget;
        criteria.check(
            "criterion-3 counterfactual-validity",
            pass,
            format!(
                "class-flip rate {:.3} (bar 0.90) over {} active test subjects; train+eval {:.1} min (bar 45)",
                agg.flip_rate,
                agg.n_active,
                (train_time + eval_time).as_secs_f64() / 60.0
            ),
        );
    }
    {
        let pass = agg.cf_ssim_mean >= 0.90 && agg.recon_ssim_mean >= 0.99;
        criteria.check(
            "criterion-4 subject-faithfulness",
            pass,
            format!(
                "CF SSIM {:.4} (bar 0.90), reconstruction SSIM {:.4} (bar 0.99)",
                agg.cf_ssim_mean, agg.recon_ssim_mean
            ),
        );
    }
    {
        // Condition sensitivity must also be alive: reconstruction and
        // counterfactual differ somewhere.
        let cf_vs_active = (agg.cf_area_mean - agg.inactive_area_mean).abs()
            < (agg.cf_area_mean - agg.real_area_mean).abs();
        let recon_close = (agg.recon_area_mean - agg.real_area_mean).abs()
            / agg.real_area_mean.max(1e-9)
            < 0.15;
        let pass = agg.cf_area_mean < agg.real_area_mean
            && cf_vs_active
            && agg.cf_gad_prevalence <= 0.05
            && recon_close
            && agg.condition_gap_mean > 0.0;
        criteria.check(
            "criterion-6 target-class-statistics",
            pass,
            format!(
                "lesion area real {:.1} / recon {:.1} / CF {:.1} / inactive {:.1}; gad prevalence real {:.1}% -> CF {:.1}% (bar 5%)",
                agg.real_area_mean,
                agg.recon_area_mean,
                agg.cf_area_mean,
                agg.inactive_area_mean,
                100.0 * agg.real_gad_prevalence,
                100.0 * agg.cf_gad_prevalence
            ),
        );
    }
    {
        // Monte-Carlo chance calibration for the localization protocol.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        let mut brain = Mask::zeros(40, 40);
        for y in 0..40 {
            for x in 0..40 {
                brain.set(y, x);
            }
        }
        let mut target = Mask::zeros(40, 40);
        for y in 5..25 {
            for x in 5..21 {
                target.set(y, x);
            }
        }
        let mut total = 0.0;
        for _ in 0..1000 {
            let img = Image::from_vec(
                40,
                40,
                (0..1600).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
            )
            .unwrap();
            let d = DifferenceMap::new("mc", img);
            total += marker_localization_score(&d, &target, &brain, 0.05).unwrap();
        }
        let mc_mean = total / 1000.0;

        let pass = agg.localization_mean >= 3.0
            && agg.localization_marker_low_load_mean >= 2.0
            && agg.n_marker_low_load > 0
            && (mc_mean - 1.0).abs() <= 0.1;
        criteria.check(
            "criterion-7 marker-discovery",
            pass,
            format!(
                "localization {:.2} (bar 3.0); low-load marker subpop {:.2} (bar 2.0, n={}); Monte-Carlo chance mean {:.3}",
                agg.localization_mean,
                agg.localization_marker_low_load_mean,
                agg.n_marker_low_load,
                mc_mean
            ),
        );
    }

    // ---------------------------------------------------------------
    // Criterion 5: vox-minus ablation direction.
    // ---------------------------------------------------------------
    {
        let abl_cfg = root.join("run_ablated.json");
        write_config(
            &abl_cfg,
            &serde_json::json!({
                "n_subjects": 1000,
                "dataset": data,
                "classifier_checkpoint": clf_ckpt,
                "generator_checkpoint": root.join("gan_ablated/generator.ckpt"),
            }),
        );
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&abl_cfg)
                .arg("--out")
                .arg(root.join("gan_ablated"))
                .args(["--seed", SEED, "--lambda-vox-minus", "0"]),
        );
        run_ok(
            bin()
                .args(["evaluate", "--config"])
                .arg(&abl_cfg)
                .arg("--out")
                .arg(root.join("eval_ablated"))
                .args(["--seed", SEED]),
        );
        let ablated = load_report(&root.join("eval_ablated/report.json"));
        let recon_delta = (ablated.aggregates.recon_ssim_mean - agg.recon_ssim_mean).abs();
        let cf_drop = agg.cf_ssim_mean - ablated.aggregates.cf_ssim_mean;
        let pass = recon_delta < 0.01 && cf_drop >= 0.10;
        criteria.check(
            "criterion-5 ablation-direction",
            pass,
            format!(
                "recon SSIM {:.4} -> {:.4} (|delta| {recon_delta:.4} < 0.01); CF SSIM {:.4} -> {:.4} (drop {cf_drop:.4} >= 0.10)",
                agg.recon_ssim_mean,
                ablated.aggregates.recon_ssim_mean,
                agg.cf_ssim_mean,
                ablated.aggregates.cf_ssim_mean
            ),
        );
    }

    // ---------------------------------------------------------------
    // Criterion 8b/8c: checkpoint round-trip and resume determinism.
    // ---------------------------------------------------------------
    {
        let g_path = root.join("gan/generator.ckpt");
        let (g_store, meta) = cfsynth::params::load_checkpoint(&g_path).unwrap();
        let resaved = root.join("generator_resave.ckpt");
        cfsynth::params::save_checkpoint(&g_store, meta.meta, false, meta.training_step, &resaved)
            .unwrap();
        let round_trip =
            std::fs::read(&g_path).unwrap() == std::fs::read(&resaved).unwrap();

        // Small-scale resume: interrupted + resumed equals uninterrupted.
        let small = root.join("resume");
        let params = cfsynth::phantom::GenParams {
            image_size: 32,
            area_threshold: 30,
            low_area_max: 24,
            high_area_min: 40,
            high_area_max: 70,
            ..cfsynth::phantom::GenParams::default()
        };
        let (small_ds, _) =
            cfsynth::phantom::build_dataset(60, 9, &params, &small.join("data")).unwrap();
        let gen_arch = cfsynth::models::GeneratorArch {
            widths: vec![4, 8],
            embed_dim: 8,
            ..cfsynth::models::GeneratorArch::desk()
        };
        let clf_small = ResNetArch { widths: vec![4, 8], ..ResNetArch::classifier() };
        let disc_small = ResNetArch { widths: vec![4, 8], ..ResNetArch::discriminator() };
        let mut f_small: cfsynth::ParamStore<f32> = clf_small.init_params("f", 2);
        f_small.freeze();
        let cfg2 = cfsynth::config::AdversarialConfig {
            epochs: 2,
            batch_size: 4,
            checkpoint_every: 2,
            ..cfsynth::config::AdversarialConfig::default()
        };
        let cfg1 = cfsynth::config::AdversarialConfig { epochs: 1, ..cfg2.clone() };
        let (g_full, _) = cfsynth::trainer::train_adversarial(
            &small_ds, &gen_arch, &disc_small, &clf_small, &f_small, &cfg2, 7,
            &small.join("full"), None,
        )
        .unwrap();
        cfsynth::trainer::train_adversarial(
            &small_ds, &gen_arch, &disc_small, &clf_small, &f_small, &cfg1, 7,
            &small.join("part"), None,
        )
        .unwrap();
        let (g_resumed, _) = cfsynth::trainer::train_adversarial(
            &small_ds, &gen_arch, &disc_small, &clf_small, &f_small, &cfg2, 7,
            &small.join("part"), Some(&small.join("part/train_state.ckpt")),
        )
        .unwrap();
        let steps = |p: PathBuf| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter(|l| l.contains("\"step\""))
                .map(String::from)
                .collect()
        };
        let resume_ok = g_full.params_equal(&g_resumed)
            && steps(small.join("full/train_log.jsonl")) == steps(small.join("part/train_log.jsonl"));

        criteria.check(
            "criterion-8 determinism-persistence",
            round_trip && resume_ok,
            format!("checkpoint round-trip bit-exact: {round_trip}; resume reproduces uninterrupted logs: {resume_ok}"),
        );
    }

    criteria.finish();
}
