//! Population-level statistics of generated cohorts at benchmark scale.

use cfsynth::eval::auc;
use cfsynth::phantom::{synthesize_subject, CauseTag, GenParams};
use rayon::prelude::*;

#[test]
fn thousand_subject_cohort_hits_the_planted_mix() {
    let p = GenParams::default();
    let subjects: Vec<_> = (0..1000u64)
        .into_par_iter()
        .map(|seed| synthesize_subject(seed, &p).unwrap())
        .collect();

    let actives: Vec<_> = subjects.iter().filter(|s| s.activity_label).collect();
    let active_fraction = actives.len() as f64 / subjects.len() as f64;
    assert!(
        (active_fraction - p.p_active).abs() <= 0.10,
        "active fraction {active_fraction} vs target {}",
        p.p_active
    );

    // Gad prevalence among actives mirrors the planted rate within 3
    // points at this cohort size.
    let gad = actives.iter().filter(|s| s.cause_tags.contains(&CauseTag::Gad)).count() as f64
        / actives.len() as f64;
    assert!((gad - p.p_gad).abs() <= 0.03, "gad prevalence among actives {gad}");

    let marker =
        actives.iter().filter(|s| s.cause_tags.contains(&CauseTag::PlantedMarker)).count() as f64
            / actives.len() as f64;
    assert!((marker - p.p_marker).abs() <= 0.04, "marker prevalence among actives {marker}");

    // Low-load actives must exist (the heterogeneity the benchmark is
    // about): the area-threshold classifier is informative but not perfect.
    let scores: Vec<f64> = subjects.iter().map(|s| s.lesion_mask.area() as f64).collect();
    let labels: Vec<bool> = subjects.iter().map(|s| s.activity_label).collect();
    let area_auc = auc(&scores, &labels).unwrap();
    assert!(area_auc > 0.75 && area_auc < 1.0, "area-threshold AUC {area_auc}");
}
