//! Classifier hyperparameter probe over an existing dataset.
//! Usage: clf_probe <dataset> <lr> <epochs> <w0,w1,..> <norm:0|1> [seed]

use cfsynth::config::ClassifierConfig;
use cfsynth::models::ResNetArch;
use cfsynth::params::AdamHp;
use cfsynth::phantom::load_dataset;
use cfsynth::trainer::pretrain_classifier;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dataset = load_dataset(std::path::Path::new(&args[1])).unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let widths: Vec<usize> = args[4].split(',').map(|s| s.parse().unwrap()).collect();
    let norm: bool = args[5] == "1";
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(42);

    let arch = ResNetArch {
        widths,
        normalize: norm,
        ..ResNetArch::classifier()
    };
    let cfg = ClassifierConfig {
        epochs,
        batch_size: 16,
        adam: AdamHp { lr, ..AdamHp::classifier() },
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let (_, outcome) = pretrain_classifier(&dataset, &arch, &cfg, seed, dir.path()).unwrap();
    println!(
        "lr={lr} epochs={epochs} widths={:?} norm={norm} -> best_epoch={} val_auc={:.4} test_auc={:.4} ({:.0?})",
        arch.widths, outcome.best_epoch, outcome.best_val_auc, outcome.test_auc, t0.elapsed()
    );
    let log = std::fs::read_to_string(dir.path().join("pretrain_log.jsonl")).unwrap();
    for line in log.lines() {
        println!("  {line}");
    }

    // Subgroup diagnosis on the test split: how does each cause rank
    // against the inactives?
    use cfsynth::eval::auc;
    use cfsynth::models::classifier_forward;
    use cfsynth::phantom::{CauseTag, Split};
    let (store, _) = cfsynth::params::load_checkpoint(&outcome.checkpoint).unwrap();
    let mut groups: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for meta in dataset.subjects(Split::Test) {
        let rec = dataset.load_subject(meta).unwrap();
        let logit = classifier_forward(&arch, &store, &rec.baseline).unwrap() as f64;
        let bucket = if !rec.activity_label {
            "inactive"
        } else if rec.cause_tags.contains(&CauseTag::HighLoad) {
            "high_load"
        } else if rec.cause_tags.contains(&CauseTag::Gad) {
            "gad_only_low"
        } else {
            "marker_only_low"
        };
        groups.entry(bucket).or_default().push(logit);
    }
    let inactive = groups.get("inactive").cloned().unwrap_or_default();
    for (name, logits) in &groups {
        let mean = logits.iter().sum::<f64>() / logits.len() as f64;
        let vs_inactive = if *name == "inactive" {
            0.5
        } else {
            let mut scores = logits.clone();
            let mut labels = vec![true; logits.len()];
            scores.extend(&inactive);
            labels.extend(vec![false; inactive.len()]);
            auc(&scores, &labels).unwrap()
        };
        println!(
            "  group {name:16} n={:3} mean_logit={mean:8.3} auc_vs_inactive={vs_inactive:.4}",
            logits.len()
        );
    }
}
