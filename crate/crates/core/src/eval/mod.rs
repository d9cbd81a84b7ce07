//! Evaluation kit: subject-specificity (SSIM), target-class statistics via
//! deterministic threshold oracles, class-flip rate, difference maps and
//! planted-marker localization, assembled into a persisted report.

mod oracles;
mod report;
mod ssim;

pub use oracles::{
    auc, class_flip_rate, difference_map, gad_present, lesion_area, marker_localization_score,
    DifferenceMap, EvalConfig,
};
pub use report::{
    aggregate, area_threshold_auc, build_report, classifier_auc, evaluate_subject,
    render_diff_png, Aggregates, InactiveRow, MetricsReport, SubjectRow,
};
pub use ssim::ssim;
