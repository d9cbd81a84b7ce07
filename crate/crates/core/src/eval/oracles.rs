//! Deterministic phantom-domain oracles: threshold/connected-component
//! lesion area, gad-presence detection, exact AUC, difference maps and the
//! marker-localization enrichment score.

use crate::error::EvalError;
use crate::phantom::{Image, Mask};
use serde::{Deserialize, Serialize};

/// Thresholds for the deterministic oracles and the localization protocol.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tau_lesion: f32,
    pub min_lesion_component: usize,
    pub tau_gad: f32,
    pub min_gad_component: usize,
    pub top_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau_lesion: 0.70,
            min_lesion_component: 3,
            tau_gad: 0.97,
            min_gad_component: 2,
            top_fraction: 0.05,
        }
    }
}

/// 8-connected components of `predicate`-true pixels inside `within`;
/// returns each component's pixel count.
fn component_sizes(
    h: usize,
    w: usize,
    within: &Mask,
    predicate: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let i0 = y0 * w + x0;
            if seen[i0] || !within.get(y0, x0) || !predicate(y0, x0) {
                continue;
            }
            let mut size = 0usize;
            seen[i0] = true;
            stack.push((y0, x0));
            while let Some((y, x)) = stack.pop() {
                size += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        let ni = ny * w + nx;
                        if !seen[ni] && within.get(ny, nx) && predicate(ny, nx) {
                            seen[ni] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    sizes
}

/// Lesion area in pixels: intensity >= tau_lesion inside the brain, keeping
/// only 8-connected components of at least `min_lesion_component` pixels.
pub fn lesion_area(image: &Image, brain: &Mask, cfg: &EvalConfig) -> usize {
    component_sizes(image.h(), image.w(), brain, |y, x| image.get(y, x) >= cfg.tau_lesion)
        .into_iter()
        .filter(|&s| s >= cfg.min_lesion_component)
        .sum()
}

/// True iff a component of at least `min_gad_component` pixels reaches
/// tau_gad inside the brain.
pub fn gad_present(image: &Image, brain: &Mask, cfg: &EvalConfig) -> bool {
    component_sizes(image.h(), image.w(), brain, |y, x| image.get(y, x) >= cfg.tau_gad)
        .into_iter()
        .any(|s| s >= cfg.min_gad_component)
}

/// Fraction of counterfactual probabilities below one half.
pub fn class_flip_rate(cf_probs: &[f64]) -> Result<f64, EvalError> {
    if cf_probs.is_empty() {
        return Err(EvalError::EmptyInput("class_flip_rate"));
    }
    Ok(cf_probs.iter().filter(|&&p| p < 0.5).count() as f64 / cf_probs.len() as f64)
}

/// Exact ROC-AUC by the rank statistic, with average ranks on ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::EmptyInput("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Per-pixel absolute difference between a real image and its
/// counterfactual.
#[derive(Debug, Clone)]
pub struct DifferenceMap {
    pub subject_id: String,
    map: Image,
}

impl DifferenceMap {
    /// Wraps an arbitrary nonnegative map; Monte-Carlo calibrations build
    /// synthetic maps this way.
    pub fn new(subject_id: &str, map: Image) -> Self {
        DifferenceMap { subject_id: subject_id.to_string(), map }
    }

    pub fn map(&self) -> &Image {
        &self.map
    }
}

pub fn difference_map(
    subject_id: &str,
    real: &Image,
    cf: &Image,
) -> Result<DifferenceMap, EvalError> {
    if (real.h(), real.w()) != (cf.h(), cf.w()) {
        return Err(EvalError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            real.h(),
            real.w(),
            cf.h(),
            cf.w()
        )));
    }
    let data: Vec<f32> =
        real.data().iter().zip(cf.data()).map(|(&a, &b)| (a - b).abs()).collect();
    Ok(DifferenceMap {
        subject_id: subject_id.to_string(),
        map: Image::from_vec(real.h(), real.w(), data).expect("abs diff of [0,1] images"),
    })
}

/// Enrichment of the difference map's top mass inside the target mask.
///
/// Takes the top `ceil(top_fraction * |brain|)` brain pixels by difference
/// value (ties broken by row-major order) and divides their precision
/// against the target by the target's chance rate `|target| / |brain|`.
/// Score 1 is chance level; higher means the map concentrates on the
/// target.
pub fn marker_localization_score(
    diff: &DifferenceMap,
    target: &Mask,
    brain: &Mask,
    top_fraction: f64,
) -> Result<f64, EvalError> {
    let img = &diff.map;
    if (img.h(), img.w()) != (target.h(), target.w())
        || (img.h(), img.w()) != (brain.h(), brain.w())
    {
        return Err(EvalError::ShapeMismatch("difference map vs masks".into()));
    }
    let brain_px = brain.area();
    let target_px = target
        .data()
        .iter()
        .zip(brain.data())
        .filter(|&(&t, &b)| t != 0 && b != 0)
        .count();
    if target_px == 0 {
        return Err(EvalError::EmptyTargetMask);
    }
    let mut candidates: Vec<(f32, usize)> = Vec::with_capacity(brain_px);
    let mut any_nonzero = false;
    for y in 0..img.h() {
        for x in 0..img.w() {
            if brain.get(y, x) {
                let v = img.get(y, x);
                any_nonzero |= v != 0.0;
                candidates.push((v, y * img.w() + x));
            }
        }
    }
    if !any_nonzero {
        return Err(EvalError::AllZeroDiff);
    }
    let k = ((top_fraction * brain_px as f64).ceil() as usize).clamp(1, brain_px);
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite diff").then(a.1.cmp(&b.1)));
    let hits = candidates[..k]
        .iter()
        .filter(|&&(_, idx)| {
            let (y, x) = (idx / img.w(), idx % img.w());
            target.get(y, x) && brain.get(y, x)
        })
        .count();
    let precision = hits as f64 / k as f64;
    let chance = target_px as f64 / brain_px as f64;
    Ok(precision / chance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{lattice_disk, synthesize_subject, GenParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_brain(h: usize, w: usize) -> Mask {
        let mut m = Mask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x);
            }
        }
        m
    }

    #[test]
    fn lesion_area_counts_planted_disk_exactly() {
        let cfg = EvalConfig::default();
        let mut img = Image::zeros(64, 64);
        for (y, x) in lattice_disk(64, 32.0, 32.0, 3.0) {
            img.set(y, x, 0.85);
        }
        assert_eq!(lesion_area(&img, &full_brain(64, 64), &cfg), 29);
    }

    #[test]
    fn lesion_area_ignores_tiny_components_and_empty_images() {
        let cfg = EvalConfig::default();
        let brain = full_brain(32, 32);
        assert_eq!(lesion_area(&Image::zeros(32, 32), &brain, &cfg), 0);
        let mut img = Image::zeros(32, 32);
        img.set(4, 4, 0.9);
        img.set(20, 20, 0.9);
        assert_eq!(lesion_area(&img, &brain, &cfg), 0);
    }

    #[test]
    fn gad_detector_needs_two_bright_pixels() {
        let cfg = EvalConfig::default();
        let brain = full_brain(32, 32);
        let mut img = Image::zeros(32, 32);
        img.set(10, 10, 1.0);
        assert!(!gad_present(&img, &brain, &cfg));
        img.set(10, 11, 1.0);
        assert!(gad_present(&img, &brain, &cfg));
        // Lesion-intensity pixels stay below the gad threshold.
        let mut lesion_only = Image::zeros(32, 32);
        for (y, x) in lattice_disk(32, 16.0, 16.0, 3.0) {
            lesion_only.set(y, x, 0.85);
        }
        assert!(!gad_present(&lesion_only, &brain, &cfg));
    }

    #[test]
    fn oracles_agree_with_ground_truth_masks() {
        let cfg = EvalConfig::default();
        let p = GenParams::default();
        let mut agree_area = 0;
        let mut agree_gad = 0;
        let n = 200;
        for seed in 0..n {
            let s = synthesize_subject(seed, &p).unwrap();
            if lesion_area(&s.baseline, &s.brain_mask, &cfg) == s.lesion_mask.area() {
                agree_area += 1;
            }
            if gad_present(&s.baseline, &s.brain_mask, &cfg) == !s.gad_mask.is_empty() {
                agree_gad += 1;
            }
        }
        assert!(agree_area as f64 / n as f64 >= 0.99, "area agreement {agree_area}/{n}");
        assert!(agree_gad as f64 / n as f64 >= 0.99, "gad agreement {agree_gad}/{n}");
    }

    #[test]
    fn auc_handles_separation_reversal_and_ties() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        // One tie across classes: hand value 0.875.
        let a = auc(&[0.9, 0.5, 0.5, 0.1], &labels).unwrap();
        assert!((a - 0.875).abs() < 1e-12);
        assert!(auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn flip_rate_counts_below_half() {
        assert_eq!(class_flip_rate(&[0.4, 0.6, 0.1, 0.9]).unwrap(), 0.5);
        assert!(class_flip_rate(&[]).is_err());
    }

    #[test]
    fn difference_map_basics() {
        let a = Image::from_vec(16, 16, vec![0.5; 256]).unwrap();
        let d0 = difference_map("s", &a, &a).unwrap();
        assert!(d0.map().data().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.set(3, 4, 0.7);
        let d = difference_map("s", &a, &b).unwrap();
        assert!((d.map().get(3, 4) - 0.2).abs() < 1e-6);
        assert_eq!(d.map().data().iter().filter(|&&v| v != 0.0).count(), 1);
        let c = Image::zeros(16, 17);
        assert!(difference_map("s", &a, &c).is_err());
    }

    #[test]
    fn localization_score_extremes() {
        let brain = full_brain(40, 40); // 1600 px, top 5% = 80
        let mut target = Mask::zeros(40, 40);
        for y in 0..10 {
            for x in 0..16 {
                target.set(y, x); // 160 px target
            }
        }
        // All signal inside the target: precision 1, chance 0.1 -> score 10
        // = |brain|/|target|.
        let mut img = Image::zeros(40, 40);
        for y in 0..10 {
            for x in 0..16 {
                img.set(y, x, 0.5);
            }
        }
        let d = DifferenceMap::new("s", img);
        let s = marker_localization_score(&d, &target, &brain, 0.05).unwrap();
        assert!((s - 10.0).abs() < 1e-9);

        // All signal outside the target: score 0.
        let mut img2 = Image::zeros(40, 40);
        for y in 20..30 {
            for x in 20..36 {
                img2.set(y, x, 0.5);
            }
        }
        let d2 = DifferenceMap::new("s", img2);
        assert_eq!(marker_localization_score(&d2, &target, &brain, 0.05).unwrap(), 0.0);

        // Preconditions.
        let empty_target = Mask::zeros(40, 40);
        assert!(matches!(
            marker_localization_score(&d2, &empty_target, &brain, 0.05),
            Err(EvalError::EmptyTargetMask)
        ));
        let zero = DifferenceMap::new("s", Image::zeros(40, 40));
        assert!(matches!(
            marker_localization_score(&zero, &target, &brain, 0.05),
            Err(EvalError::AllZeroDiff)
        ));
    }

    #[test]
    fn localization_score_is_chance_on_uniform_noise() {
        // Monte-Carlo oracle: uniformly random difference values are
        // unenriched, so the expected score is 1.
        let brain = full_brain(40, 40);
        let mut target = Mask::zeros(40, 40);
        for y in 5..25 {
            for x in 5..21 {
                target.set(y, x);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut total = 0.0;
        let draws = 1000;
        for _ in 0..draws {
            let img = Image::from_vec(
                40,
                40,
                (0..1600).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
            )
            .unwrap();
            let d = DifferenceMap::new("mc", img);
            total += marker_localization_score(&d, &target, &brain, 0.05).unwrap();
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.1, "Monte-Carlo mean {mean}");
    }

    #[test]
    fn localization_score_invariant_under_monotone_rescaling() {
        let p = GenParams::default();
        let s = synthesize_subject(17, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noisy: Vec<f32> = (0..s.baseline.data().len())
            .map(|_| rng.gen_range(0.0..1.0f32))
            .collect();
        let base = Image::from_vec(s.baseline.h(), s.baseline.w(), noisy).unwrap();
        let target = s.lesion_mask.union(&s.marker_mask).union(&s.gad_mask);
        let target = if target.is_empty() { s.brain_mask.clone() } else { target };
        let d1 = DifferenceMap::new("a", base.clone());
        // Cubing is strictly monotone on [0,1] and preserves pixel order.
        let cubed = base.data().iter().map(|&v| v * v * v).collect();
        let d2 = DifferenceMap::new("a", Image::from_vec(base.h(), base.w(), cubed).unwrap());
        let s1 = marker_localization_score(&d1, &target, &s.brain_mask, 0.05).unwrap();
        let s2 = marker_localization_score(&d2, &target, &s.brain_mask, 0.05).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn area_threshold_separability_floor() {
        // The brute-force area classifier must be informative but imperfect
        // on generated cohorts (planted low-load actives exist).
        let p = GenParams::default();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for seed in 0..400 {
            let s = synthesize_subject(seed, &p).unwrap();
            scores.push(s.lesion_mask.area() as f64);
            labels.push(s.activity_label);
        }
        let a = auc(&scores, &labels).unwrap();
        assert!(a > 0.75 && a < 1.0, "area-threshold AUC = {a}");
    }
}
