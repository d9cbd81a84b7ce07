//! Per-subject counterfactual evaluation and the aggregate report.

use super::oracles::{
    auc, class_flip_rate, difference_map, gad_present, lesion_area, marker_localization_score,
    EvalConfig,
};
use super::ssim::ssim;
use crate::error::EvalError;
use crate::models::{
    classifier_forward, generator_forward, prob_from_logit, GeneratorArch, ResNetArch,
    TargetClass,
};
use crate::params::ParamStore;
use crate::phantom::{CauseTag, Dataset, Image, Split, SubjectRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// One evaluated active test subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRow {
    pub id: String,
    pub cause_tags: BTreeSet<CauseTag>,
    pub recon_ssim: f64,
    pub cf_ssim: f64,
    pub real_area: usize,
    pub recon_area: usize,
    pub cf_area: usize,
    pub real_gad: bool,
    pub recon_gad: bool,
    pub cf_gad: bool,
    /// Classifier probability of the active class on the counterfactual.
    pub cf_prob: f64,
    /// Difference-map enrichment in the union of planted-cause masks; absent
    /// when the counterfactual equals the baseline exactly.
    pub localization: Option<f64>,
    /// Mean |G(x,0) - G(x,1)|, the condition-sensitivity probe.
    pub condition_gap: f64,
}

/// One real inactive test subject (reference columns only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InactiveRow {
    pub id: String,
    pub area: usize,
    pub gad: bool,
}

/// Aggregate table in the four-column layout: real active, reconstruction,
/// counterfactual, real inactive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_active: usize,
    pub n_inactive: usize,
    pub recon_ssim_mean: f64,
    pub recon_ssim_std: f64,
    pub cf_ssim_mean: f64,
    pub cf_ssim_std: f64,
    pub real_area_mean: f64,
    pub recon_area_mean: f64,
    pub cf_area_mean: f64,
    pub inactive_area_mean: f64,
    pub real_gad_prevalence: f64,
    pub recon_gad_prevalence: f64,
    pub cf_gad_prevalence: f64,
    pub inactive_gad_prevalence: f64,
    pub flip_rate: f64,
    pub localization_mean: f64,
    /// Localization over the low-load planted-marker phenotype.
    pub localization_marker_low_load_mean: f64,
    pub n_marker_low_load: usize,
    pub condition_gap_mean: f64,
}

/// Full evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SubjectRow>,
    pub inactive_rows: Vec<InactiveRow>,
    pub aggregates: Aggregates,
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count();
    if n == 0 {
        return 0.0;
    }
    v.sum::<f64>() / n as f64
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count();
    if n == 0 {
        return 0.0;
    }
    let m = mean(v.clone());
    (v.map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Recomputes every aggregate from the rows; `build_report` uses this and
/// the consistency test re-derives it.
pub fn aggregate(rows: &[SubjectRow], inactive_rows: &[InactiveRow]) -> Result<Aggregates, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput("no active subjects to aggregate"));
    }
    let probs: Vec<f64> = rows.iter().map(|r| r.cf_prob).collect();
    let loc: Vec<f64> = rows.iter().filter_map(|r| r.localization).collect();
    let marker_low: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.cause_tags.contains(&CauseTag::PlantedMarker)
                && !r.cause_tags.contains(&CauseTag::HighLoad)
        })
        .filter_map(|r| r.localization)
        .collect();
    Ok(Aggregates {
        n_active: rows.len(),
        n_inactive: inactive_rows.len(),
        recon_ssim_mean: mean(rows.iter().map(|r| r.recon_ssim)),
        recon_ssim_std: std_dev(rows.iter().map(|r| r.recon_ssim)),
        cf_ssim_mean: mean(rows.iter().map(|r| r.cf_ssim)),
        cf_ssim_std: std_dev(rows.iter().map(|r| r.cf_ssim)),
        real_area_mean: mean(rows.iter().map(|r| r.real_area as f64)),
        recon_area_mean: mean(rows.iter().map(|r| r.recon_area as f64)),
        cf_area_mean: mean(rows.iter().map(|r| r.cf_area as f64)),
        inactive_area_mean: mean(inactive_rows.iter().map(|r| r.area as f64)),
        real_gad_prevalence: mean(rows.iter().map(|r| f64::from(r.real_gad))),
        recon_gad_prevalence: mean(rows.iter().map(|r| f64::from(r.recon_gad))),
        cf_gad_prevalence: mean(rows.iter().map(|r| f64::from(r.cf_gad))),
        inactive_gad_prevalence: mean(inactive_rows.iter().map(|r| f64::from(r.gad))),
        flip_rate: class_flip_rate(&probs)?,
        localization_mean: mean(loc.iter().copied()),
        localization_marker_low_load_mean: mean(marker_low.iter().copied()),
        n_marker_low_load: marker_low.len(),
        condition_gap_mean: mean(rows.iter().map(|r| r.condition_gap)),
    })
}

/// Evaluates one active subject against the trained generator and frozen
/// classifier.
pub fn evaluate_subject(
    record: &SubjectRecord,
    gen_arch: &GeneratorArch,
    g_store: &ParamStore<f32>,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    cfg: &EvalConfig,
) -> Result<(SubjectRow, Image, Image), EvalError> {
    let x = &record.baseline;
    let recon = generator_forward(gen_arch, g_store, x, TargetClass::Active)?;
    let cf = generator_forward(gen_arch, g_store, x, TargetClass::Inactive)?;
    let brain = &record.brain_mask;
    let diff = difference_map(&record.id, x, &cf)?;
    let target = record.lesion_mask.union(&record.gad_mask).union(&record.marker_mask);
    let localization = if target.is_empty() {
        None
    } else {
        match marker_localization_score(&diff, &target, brain, cfg.top_fraction) {
            Ok(s) => Some(s),
            Err(EvalError::AllZeroDiff) => None,
            Err(e) => return Err(e),
        }
    };
    let condition_gap = recon
        .data()
        .iter()
        .zip(cf.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / recon.data().len() as f64;
    let logit = classifier_forward(clf_arch, f_store, &cf)?;
    let row = SubjectRow {
        id: record.id.clone(),
        cause_tags: record.cause_tags.clone(),
        recon_ssim: ssim(x, &recon)?,
        cf_ssim: ssim(x, &cf)?,
        real_area: lesion_area(x, brain, cfg),
        recon_area: lesion_area(&recon, brain, cfg),
        cf_area: lesion_area(&cf, brain, cfg),
        real_gad: gad_present(x, brain, cfg),
        recon_gad: gad_present(&recon, brain, cfg),
        cf_gad: gad_present(&cf, brain, cfg),
        cf_prob: prob_from_logit(logit),
        localization,
        condition_gap,
    };
    Ok((row, recon, cf))
}

/// Full evaluation over the test split. When `render_dir` is given, writes
/// per-subject difference maps as raw f32 and annotated PNG.
pub fn build_report(
    dataset: &Dataset,
    gen_arch: &GeneratorArch,
    g_store: &ParamStore<f32>,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    cfg: &EvalConfig,
    render_dir: Option<&Path>,
) -> Result<MetricsReport, EvalError> {
    let active_meta: Vec<_> = dataset.subjects(Split::Test).filter(|m| m.label != 0).collect();
    let inactive_meta: Vec<_> = dataset.subjects(Split::Test).filter(|m| m.label == 0).collect();
    if active_meta.is_empty() {
        return Err(EvalError::EmptyInput("no active subjects in the test split"));
    }
    if let Some(dir) = render_dir {
        std::fs::create_dir_all(dir)?;
    }

    let rows: Vec<SubjectRow> = active_meta
        .par_iter()
        .map(|meta| -> Result<SubjectRow, EvalError> {
            let record = dataset.load_subject(meta)?;
            let (row, _recon, cf) =
                evaluate_subject(&record, gen_arch, g_store, clf_arch, f_store, cfg)?;
            if let Some(dir) = render_dir {
                let diff = difference_map(&record.id, &record.baseline, &cf)?;
                diff.map().write_f32(&dir.join(format!("{}_diff.f32", record.id)))?;
                render_diff_png(
                    &record.baseline,
                    &cf,
                    &record.future,
                    &dir.join(format!("{}_diff.png", record.id)),
                )?;
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;

    let inactive_rows: Vec<InactiveRow> = inactive_meta
        .par_iter()
        .map(|meta| -> Result<InactiveRow, EvalError> {
            let record = dataset.load_subject(meta)?;
            Ok(InactiveRow {
                id: record.id.clone(),
                area: lesion_area(&record.baseline, &record.brain_mask, cfg),
                gad: gad_present(&record.baseline, &record.brain_mask, cfg),
            })
        })
        .collect::<Result<_, _>>()?;

    let aggregates = aggregate(&rows, &inactive_rows)?;
    Ok(MetricsReport { rows, inactive_rows, aggregates })
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| EvalError::Image(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Active-subject rows as CSV.
    pub fn save_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from(
            "id,cause_tags,recon_ssim,cf_ssim,real_area,recon_area,cf_area,\
             real_gad,recon_gad,cf_gad,cf_prob,localization,condition_gap\n",
        );
        for r in &self.rows {
            let tags: Vec<String> =
                r.cause_tags.iter().map(|t| format!("{t:?}").to_lowercase()).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{},{},{},{},{:.6},{},{:.6}\n",
                r.id,
                tags.join("|"),
                r.recon_ssim,
                r.cf_ssim,
                r.real_area,
                r.recon_area,
                r.cf_area,
                u8::from(r.real_gad),
                u8::from(r.recon_gad),
                u8::from(r.cf_gad),
                r.cf_prob,
                r.localization.map(|v| format!("{v:.6}")).unwrap_or_default(),
                r.condition_gap,
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Annotated difference visualization: grayscale baseline, removals in the
/// red channel, additions in the blue channel, follow-up lesion outlines in
/// green.
pub fn render_diff_png(
    baseline: &Image,
    cf: &Image,
    future: &Image,
    path: &Path,
) -> Result<(), EvalError> {
    let (h, w) = (baseline.h(), baseline.w());
    // New or enlarging follow-up lesions: bright in the future image where
    // the baseline was not.
    let mut newles = vec![false; h * w];
    for i in 0..h * w {
        newles[i] = future.data()[i] - baseline.data()[i] > 0.15;
    }
    let on_outline = |y: usize, x: usize| -> bool {
        if !newles[y * w + x] {
            return false;
        }
        let mut boundary = false;
        for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                boundary = true;
            } else if !newles[ny as usize * w + nx as usize] {
                boundary = true;
            }
        }
        boundary
    };

    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = (baseline.get(y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            let signed = baseline.get(y, x) - cf.get(y, x);
            let boost = (signed.abs() * 4.0 * 255.0).round().clamp(0.0, 255.0) as u16;
            let (mut r, mut g, mut b) = (base, base, base);
            if signed > 0.0 {
                r = (r as u16 + boost).min(255) as u8;
            } else if signed < 0.0 {
                b = (b as u16 + boost).min(255) as u8;
            }
            if on_outline(y, x) {
                g = 255;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb([r, g, b]));
        }
    }
    img.save(path).map_err(|e| EvalError::Image(e.to_string()))?;
    Ok(())
}

/// Classifier AUC over one split using ground-truth labels.
pub fn classifier_auc(
    dataset: &Dataset,
    split: Split,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
) -> Result<f64, EvalError> {
    let metas: Vec<_> = dataset.subjects(split).collect();
    let scored: Vec<(f64, bool)> = metas
        .par_iter()
        .map(|m| -> Result<(f64, bool), EvalError> {
            let rec = dataset.load_subject(m)?;
            let logit = classifier_forward(clf_arch, f_store, &rec.baseline)?;
            Ok((logit as f64, rec.activity_label))
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let labels: Vec<bool> = scored.iter().map(|(_, l)| *l).collect();
    auc(&scores, &labels)
}

/// AUC of the brute-force baseline that scores subjects by true lesion-mask
/// area.
pub fn area_threshold_auc(dataset: &Dataset, split: Split) -> Result<f64, EvalError> {
    let metas: Vec<_> = dataset.subjects(split).collect();
    let scored: Vec<(f64, bool)> = metas
        .par_iter()
        .map(|m| -> Result<(f64, bool), EvalError> {
            let rec = dataset.load_subject(m)?;
            Ok((rec.lesion_mask.area() as f64, rec.activity_label))
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
    let labels: Vec<bool> = scored.iter().map(|(_, l)| *l).collect();
    auc(&scores, &labels)
}
