//! Deterministic rendering of one phantom subject from `(seed, params)`.

use super::{assign_activity_label, GenParams, Image, Mask, Split, SubjectRecord};
use crate::error::PhantomError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Lattice pixels of a disk: `(y - cy)^2 + (x - cx)^2 <= r^2`, clipped to the
/// grid. A radius-3 disk at an integer center covers 29 pixels.
pub fn lattice_disk(size: usize, cy: f64, cx: f64, r: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let r2 = r * r;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(size.saturating_sub(1));
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(size.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r2 {
                out.push((y, x));
            }
        }
    }
    out
}

/// Annulus pixels with `| dist - r | <= width`.
fn lattice_ring(size: usize, cy: f64, cx: f64, r: f64, width: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let rmax = r + width;
    let y0 = (cy - rmax).floor().max(0.0) as usize;
    let y1 = ((cy + rmax).ceil() as usize).min(size.saturating_sub(1));
    let x0 = (cx - rmax).floor().max(0.0) as usize;
    let x1 = ((cx + rmax).ceil() as usize).min(size.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            if (d - r).abs() <= width {
                out.push((y, x));
            }
        }
    }
    out
}

struct Geometry {
    size: usize,
    cy: f64,
    cx: f64,
    rx: f64,
    ry: f64,
    vdx: f64,
    vrx: f64,
    vry: f64,
}

impl Geometry {
    fn new(p: &GenParams) -> Self {
        let s = p.image_size as f64;
        Geometry {
            size: p.image_size,
            cy: (s - 1.0) / 2.0,
            cx: (s - 1.0) / 2.0,
            rx: p.brain_rx_frac * s,
            ry: p.brain_ry_frac * s,
            vdx: p.ventricle_dx_frac * s,
            vrx: p.ventricle_rx_frac * s,
            vry: p.ventricle_ry_frac * s,
        }
    }

    /// Inside the brain ellipse shrunk by `margin` pixels on each axis.
    fn inside_brain(&self, y: f64, x: f64, margin: f64) -> bool {
        let (rx, ry) = (self.rx - margin, self.ry - margin);
        if rx <= 0.0 || ry <= 0.0 {
            return false;
        }
        let (dy, dx) = ((y - self.cy) / ry, (x - self.cx) / rx);
        dy * dy + dx * dx <= 1.0
    }

    /// Inside either ventricle ellipse grown by `dilate` pixels.
    fn inside_ventricle(&self, y: f64, x: f64, dilate: f64) -> bool {
        let (rx, ry) = (self.vrx + dilate, self.vry + dilate);
        for side in [-1.0, 1.0] {
            let vcx = self.cx + side * self.vdx;
            let (dy, dx) = ((y - self.cy) / ry, (x - vcx) / rx);
            if dy * dy + dx * dx <= 1.0 {
                return true;
            }
        }
        false
    }

    /// Lesions and markers live in parenchyma away from the rim and the
    /// ventricles.
    fn lesion_allowed(&self, y: usize, x: usize) -> bool {
        let (yf, xf) = (y as f64, x as f64);
        self.inside_brain(yf, xf, 1.5) && !self.inside_ventricle(yf, xf, 0.5)
    }
}

struct Painter<'a> {
    geo: Geometry,
    params: &'a GenParams,
    image: Image,
    lesion_mask: Mask,
    gad_mask: Mask,
    blobs: Vec<(f64, f64, f64)>,
}

impl<'a> Painter<'a> {
    /// Samples a candidate lesion/marker center, biased toward the
    /// ventricle walls.
    fn sample_center(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let g = &self.geo;
        if rng.gen::<f64>() < self.params.periventricular_bias {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let offset = 1.5 + Normal::<f64>::new(0.0, 2.5).unwrap().sample(rng).abs();
            let vcx = g.cx + side * g.vdx;
            let y = g.cy + (g.vry + offset) * theta.sin();
            let x = vcx + (g.vrx + offset) * theta.cos();
            (y, x)
        } else {
            loop {
                let y = rng.gen_range(0.0..g.size as f64);
                let x = rng.gen_range(0.0..g.size as f64);
                if g.inside_brain(y, x, 2.0) && !g.inside_ventricle(y, x, 1.0) {
                    return (y, x);
                }
            }
        }
    }

    fn disk_fits(&self, cy: f64, cx: f64, r: f64) -> bool {
        let px = lattice_disk(self.geo.size, cy, cx, r);
        !px.is_empty() && px.iter().all(|&(y, x)| self.geo.lesion_allowed(y, x))
    }

    /// Paints one lesion blob and records it; pixels take the flat lesion
    /// intensity so the threshold oracle is exact.
    fn paint_blob(&mut self, cy: f64, cx: f64, r: f64) {
        for (y, x) in lattice_disk(self.geo.size, cy, cx, r) {
            self.image.set(y, x, self.params.lesion_intensity);
            self.lesion_mask.set(y, x);
        }
        self.blobs.push((cy, cx, r));
    }

    /// Tries to place one blob with `radius` drawn from the configured
    /// range, respecting an optional total-area cap. Returns whether a blob
    /// was painted.
    fn try_place_blob(&mut self, rng: &mut ChaCha8Rng, cap: Option<usize>) -> bool {
        if rng.gen::<f64>() >= self.params.lesion_rate {
            return false;
        }
        for _ in 0..40 {
            let (cy, cx) = self.sample_center(rng);
            let r = rng.gen_range(self.params.lesion_radius_min..=self.params.lesion_radius_max);
            if !self.disk_fits(cy, cx, r) {
                continue;
            }
            let px = lattice_disk(self.geo.size, cy, cx, r);
            // Never paint over a gad focus: the focus keeps its maximal
            // intensity so both threshold oracles stay exact.
            if px.iter().any(|&(y, x)| self.gad_mask.get(y, x)) {
                continue;
            }
            if let Some(cap) = cap {
                let new = px.iter().filter(|&&(y, x)| !self.lesion_mask.get(y, x)).count();
                if self.lesion_mask.area() + new > cap {
                    continue;
                }
            }
            self.paint_blob(cy, cx, r);
            return true;
        }
        false
    }

    /// Plants the gad focus: a tiny maximal-intensity disk on clean
    /// parenchyma. Its pixels belong to the lesion mask too (an enhancing
    /// focus is a lesion), which keeps the lesion-area oracle consistent
    /// with ground truth.
    fn try_place_gad(&mut self, rng: &mut ChaCha8Rng) -> bool {
        for _ in 0..60 {
            let (cy, cx) = self.sample_center(rng);
            let r = self.params.gad_radius;
            if !self.disk_fits(cy, cx, r) {
                continue;
            }
            let px = lattice_disk(self.geo.size, cy, cx, r);
            if px.iter().any(|&(y, x)| self.lesion_mask.get(y, x)) {
                continue;
            }
            for &(y, x) in &px {
                self.image.set(y, x, self.params.gad_intensity);
                self.lesion_mask.set(y, x);
                self.gad_mask.set(y, x);
            }
            self.blobs.push((cy, cx, r));
            return true;
        }
        false
    }

    /// Adds blobs until the lesion-mask area reaches `target` (or placement
    /// keeps failing). `cap` bounds the total area for non-high-load
    /// subjects.
    fn fill_area(&mut self, rng: &mut ChaCha8Rng, target: usize, cap: Option<usize>) {
        let mut misses = 0;
        while self.lesion_mask.area() < target && misses < 60 {
            if !self.try_place_blob(rng, cap) {
                misses += 1;
            }
        }
    }
}

/// Renders one subject deterministically from `(seed, params)`.
///
/// The id encodes the seed and the split defaults to `Train`; the dataset
/// builder overwrites both.
pub fn synthesize_subject(seed: u64, params: &GenParams) -> Result<SubjectRecord, PhantomError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.image_size;
    let geo = Geometry::new(params);

    // Sampling intent; the stored label is re-derived from the masks below.
    let want_active = rng.gen::<f64>() < params.p_active;
    let (want_gad, want_marker, want_high) = if want_active {
        let g = rng.gen::<f64>() < params.p_gad;
        let m = rng.gen::<f64>() < params.p_marker;
        let mut h = rng.gen::<f64>() < params.p_high_load;
        if !g && !m && !h {
            // Active with no cause drawn: fall back to high load so the
            // gad/marker rates among actives stay at their nominal values.
            h = true;
        }
        (g, m, h)
    } else {
        (false, false, false)
    };

    // Base anatomy.
    let mut image = Image::zeros(size, size);
    let mut brain_mask = Mask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            if geo.inside_brain(yf, xf, 0.0) {
                brain_mask.set(y, x);
                let v = if geo.inside_ventricle(yf, xf, 0.0) {
                    params.ventricle_intensity
                } else {
                    params.parenchyma_intensity
                };
                image.set(y, x, v);
            }
        }
    }

    // Smoothed sensor noise, brain only. White noise goes through a small
    // separable Gaussian blur and is rescaled so the post-blur standard
    // deviation matches noise_sigma.
    let noise = smoothed_noise(&mut rng, size, params.noise_sigma);
    for y in 0..size {
        for x in 0..size {
            if brain_mask.get(y, x) {
                image.set(y, x, image.get(y, x) + noise[y * size + x]);
            }
        }
    }

    let mut painter = Painter {
        geo,
        params,
        image,
        lesion_mask: Mask::zeros(size, size),
        gad_mask: Mask::zeros(size, size),
        blobs: Vec::new(),
    };

    // Gad goes first so the area budget accounts for it.
    if want_gad && params.lesion_rate > 0.0 {
        painter.try_place_gad(&mut rng);
    }

    // Fill the lesion load to the subject's area budget.
    if want_high {
        let target = rng.gen_range(params.high_area_min..=params.high_area_max);
        painter.fill_area(&mut rng, target, None);
    } else {
        let target = rng.gen_range(0..=params.low_area_max);
        painter.fill_area(&mut rng, target, Some(params.low_area_max));
    }

    // Marker ring: a faint annulus around clean parenchyma where a future
    // lesion will appear.
    let mut marker_mask = Mask::zeros(size, size);
    let mut marker_center: Option<(f64, f64)> = None;
    if want_marker {
        'outer: for _ in 0..80 {
            let (cy, cx) = painter.sample_center(&mut rng);
            let probe = lattice_disk(size, cy, cx, params.marker_radius + params.marker_ring_width);
            if probe.is_empty() {
                continue;
            }
            for &(y, x) in &probe {
                if !painter.geo.lesion_allowed(y, x) || painter.lesion_mask.get(y, x) {
                    continue 'outer;
                }
            }
            for (y, x) in
                lattice_ring(size, cy, cx, params.marker_radius, params.marker_ring_width)
            {
                painter.image.set(y, x, painter.image.get(y, x) + params.marker_delta);
                marker_mask.set(y, x);
            }
            marker_center = Some((cy, cx));
            break;
        }
    }

    let Painter { mut image, lesion_mask, gad_mask, blobs, .. } = painter;
    image.clamp01();

    let (mut label, cause_tags) =
        assign_activity_label(&lesion_mask, &gad_mask, &marker_mask, params.area_threshold);
    if params.label_noise > 0.0 && rng.gen::<f64>() < params.label_noise {
        label = !label;
    }

    // Follow-up image: new and enlarging lesions appear iff the subject is
    // active; marker sites always receive their future lesion.
    let mut future = image.clone();
    if label {
        let geo = Geometry::new(params);
        if let Some((cy, cx)) = marker_center {
            let r = rng.gen_range(2.0..3.0);
            paint_future_blob(&mut future, &geo, cy, cx, r, params);
        }
        let n_new = if rng.gen::<f64>() < 0.4 { 2 } else { 1 };
        for _ in 0..n_new {
            for _ in 0..40 {
                let (cy, cx) = sample_future_center(&mut rng, &geo, params);
                let r = rng.gen_range(1.5..3.0);
                let px = lattice_disk(size, cy, cx, r);
                if !px.is_empty() && px.iter().all(|&(y, x)| geo.lesion_allowed(y, x)) {
                    paint_future_blob(&mut future, &geo, cy, cx, r, params);
                    break;
                }
            }
        }
        for (cy, cx, r) in blobs.iter().take(2) {
            if rng.gen::<f64>() < 0.6 {
                paint_future_blob(&mut future, &geo, *cy, *cx, r + 1.2, params);
            }
        }
        future.clamp01();
    }

    Ok(SubjectRecord {
        id: format!("s{seed:010}"),
        split: Split::Train,
        baseline: image,
        future,
        lesion_mask,
        gad_mask,
        marker_mask,
        brain_mask,
        activity_label: label,
        cause_tags,
    })
}

fn sample_future_center(rng: &mut ChaCha8Rng, geo: &Geometry, params: &GenParams) -> (f64, f64) {
    if rng.gen::<f64>() < params.periventricular_bias {
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let offset = 1.5 + Normal::<f64>::new(0.0, 2.5).unwrap().sample(rng).abs();
        let vcx = geo.cx + side * geo.vdx;
        (geo.cy + (geo.vry + offset) * theta.sin(), vcx + (geo.vrx + offset) * theta.cos())
    } else {
        loop {
            let y = rng.gen_range(0.0..geo.size as f64);
            let x = rng.gen_range(0.0..geo.size as f64);
            if geo.inside_brain(y, x, 2.0) && !geo.inside_ventricle(y, x, 1.0) {
                return (y, x);
            }
        }
    }
}

fn paint_future_blob(
    future: &mut Image,
    geo: &Geometry,
    cy: f64,
    cx: f64,
    r: f64,
    params: &GenParams,
) {
    for (y, x) in lattice_disk(geo.size, cy, cx, r) {
        if geo.inside_brain(y as f64, x as f64, 1.0) && !geo.inside_ventricle(y as f64, x as f64, 0.0)
        {
            future.set(y, x, params.lesion_intensity);
        }
    }
}

/// White noise blurred by a separable 5-tap Gaussian and rescaled to the
/// requested standard deviation.
fn smoothed_noise(rng: &mut ChaCha8Rng, size: usize, sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        // Keep the RNG stream identical whether or not noise is enabled.
        for _ in 0..size * size {
            let _ = rng.gen::<f64>();
        }
        return vec![0.0; size * size];
    }
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let white: Vec<f64> = (0..size * size).map(|_| normal.sample(rng)).collect();

    let taps: [f64; 5] = {
        let raw = [(-2.0f64), -1.0, 0.0, 1.0, 2.0].map(|x: f64| (-x * x / 2.0).exp());
        let s: f64 = raw.iter().sum();
        raw.map(|v| v / s)
    };
    let blur_1d = |src: &[f64], out: &mut [f64], row_major: bool| {
        for i in 0..size {
            for j in 0..size {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - 2;
                    let jj = j as isize + off;
                    if (0..size as isize).contains(&jj) {
                        let idx = if row_major {
                            i * size + jj as usize
                        } else {
                            jj as usize * size + i
                        };
                        acc += k * src[idx];
                    }
                }
                let idx = if row_major { i * size + j } else { j * size + i };
                out[idx] = acc;
            }
        }
    };
    let mut tmp = vec![0.0f64; size * size];
    let mut blurred = vec![0.0f64; size * size];
    blur_1d(&white, &mut tmp, true);
    blur_1d(&tmp, &mut blurred, false);

    // Post-blur std of unit white noise is sum of squared 2D taps.
    let t2: f64 = taps.iter().map(|v| v * v).sum();
    let scale = sigma as f64 / t2;
    blurred.iter().map(|&v| (v * scale) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::CauseTag;

    #[test]
    fn radius_three_disk_covers_29_lattice_points() {
        // Independent enumeration of dx^2 + dy^2 <= 9.
        let mut expected = 0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                if dy * dy + dx * dx <= 9 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 29);
        assert_eq!(lattice_disk(64, 32.0, 32.0, 3.0).len(), expected);
    }

    #[test]
    fn same_seed_same_subject() {
        let p = GenParams::default();
        let a = synthesize_subject(7, &p).unwrap();
        let b = synthesize_subject(7, &p).unwrap();
        assert_eq!(a.baseline, b.baseline);
        assert_eq!(a.future, b.future);
        assert_eq!(a.lesion_mask, b.lesion_mask);
        assert_eq!(a.gad_mask, b.gad_mask);
        assert_eq!(a.marker_mask, b.marker_mask);
        assert_eq!(a.brain_mask, b.brain_mask);
        assert_eq!(a.activity_label, b.activity_label);
        assert_eq!(a.cause_tags, b.cause_tags);
    }

    #[test]
    fn all_causes_disabled_yields_inactive_empty_masks() {
        let p = GenParams {
            lesion_rate: 0.0,
            p_gad: 0.0,
            p_marker: 0.0,
            ..GenParams::default()
        };
        for seed in 0..20 {
            let s = synthesize_subject(seed, &p).unwrap();
            assert!(s.lesion_mask.is_empty());
            assert!(s.gad_mask.is_empty());
            assert!(s.marker_mask.is_empty());
            assert!(!s.activity_label);
            assert!(s.cause_tags.is_empty());
        }
    }

    #[test]
    fn masks_contained_in_brain_and_labels_sound() {
        let p = GenParams::default();
        for seed in 0..120 {
            let s = synthesize_subject(seed, &p).unwrap();
            assert!(s.lesion_mask.subset_of(&s.brain_mask), "seed {seed}");
            assert!(s.gad_mask.subset_of(&s.brain_mask), "seed {seed}");
            assert!(s.marker_mask.subset_of(&s.brain_mask), "seed {seed}");
            assert!(s.gad_mask.subset_of(&s.lesion_mask), "gad focus outside lesions, seed {seed}");
            let (label, tags) = assign_activity_label(
                &s.lesion_mask,
                &s.gad_mask,
                &s.marker_mask,
                p.area_threshold,
            );
            assert_eq!(label, s.activity_label, "seed {seed}");
            assert_eq!(tags, s.cause_tags, "seed {seed}");
            assert_eq!(label, !s.cause_tags.is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn future_differs_only_for_actives() {
        let p = GenParams::default();
        let mut saw_active = false;
        let mut saw_inactive = false;
        for seed in 0..60 {
            let s = synthesize_subject(seed, &p).unwrap();
            if s.activity_label {
                saw_active = true;
                assert_ne!(s.baseline, s.future, "active subject must gain lesions, seed {seed}");
            } else {
                saw_inactive = true;
                assert_eq!(s.baseline, s.future, "inactive follow-up must match, seed {seed}");
            }
        }
        assert!(saw_active && saw_inactive);
    }

    #[test]
    fn marker_subjects_gain_future_lesion_at_marker_site() {
        let p = GenParams::default();
        let mut checked = 0;
        for seed in 0..200 {
            let s = synthesize_subject(seed, &p).unwrap();
            if !s.cause_tags.contains(&CauseTag::PlantedMarker) {
                continue;
            }
            // Ring centroid approximates the marker center; the follow-up
            // image must grow a lesion-bright pixel strictly inside it.
            let size = s.baseline.h();
            let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0.0f64);
            for y in 0..size {
                for x in 0..size {
                    if s.marker_mask.get(y, x) {
                        sy += y as f64;
                        sx += x as f64;
                        n += 1.0;
                    }
                }
            }
            let (cy, cx) = (sy / n, sx / n);
            let grew = lattice_disk(size, cy, cx, p.marker_radius - 1.0).iter().any(|&(y, x)| {
                s.future.get(y, x) > 0.8 && s.baseline.get(y, x) < 0.7
            });
            assert!(grew, "seed {seed}");
            checked += 1;
        }
        assert!(checked > 5, "marker phenotype should occur, got {checked}");
    }
}
