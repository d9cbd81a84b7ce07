//! Synthetic longitudinal brain phantoms with planted causal markers.
//!
//! Each subject is a deterministic function of `(seed, params)`: a noisy
//! parenchyma ellipse with dark ventricles, bright lesion blobs placed
//! preferentially near the ventricles, optionally a tiny maximal-intensity
//! gad focus and/or a faint marker ring at a site where a future lesion will
//! appear. The activity label is re-derived from the rendered masks, never
//! assumed from the sampling intent, so stored labels are sound by
//! construction.

mod dataset;
mod render;

pub use dataset::{build_dataset, load_dataset, ClassBalance, Dataset, Manifest, SubjectMeta};
pub(crate) use dataset::splitmix;
pub use render::{lattice_disk, synthesize_subject};

use crate::error::PhantomError;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

/// 2D grayscale image with all values finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self, PhantomError> {
        if data.len() != h * w {
            return Err(PhantomError::Corrupt(format!(
                "image {h}x{w} wants {} pixels, got {}",
                h * w,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(PhantomError::Corrupt("pixel outside [0,1]".into()));
        }
        Ok(Image { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    /// Clamps every pixel into `[0, 1]`; rendering's final step.
    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mirrored copy along the given axes; used as training augmentation.
    pub fn flipped(&self, flip_y: bool, flip_x: bool) -> Image {
        let mut out = Image::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let sy = if flip_y { self.h - 1 - y } else { y };
                let sx = if flip_x { self.w - 1 - x } else { x };
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// `[1, H, W]` tensor view for the networks.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.data.iter().map(|&v| S::from_f64(v as f64)).collect();
        Tensor::from_vec(&[1, self.h, self.w], data).expect("image dims")
    }

    /// Rebuilds an image from a `[1, H, W]` network output.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self, PhantomError> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(PhantomError::Corrupt(format!("tensor shape {s:?} is not [1,H,W]")));
        }
        Image::from_vec(s[1], s[2], t.data().to_vec())
    }

    pub fn write_f32(&self, path: &Path) -> Result<(), PhantomError> {
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_f32(path: &Path, h: usize, w: usize) -> Result<Self, PhantomError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != h * w * 4 {
            return Err(PhantomError::Corrupt(format!(
                "{}: {} bytes, want {}",
                path.display(),
                bytes.len(),
                h * w * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Image::from_vec(h, w, data)
    }
}

/// Binary mask over the image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize) {
        self.data[y * self.w + x] = 1;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| (a | b) & 1).collect();
        Mask { h: self.h, w: self.w, data }
    }

    pub fn write_u8(&self, path: &Path) -> Result<(), PhantomError> {
        std::fs::write(path, &self.data)?;
        Ok(())
    }

    pub fn read_u8(path: &Path, h: usize, w: usize) -> Result<Self, PhantomError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        if data.len() != h * w {
            return Err(PhantomError::Corrupt(format!(
                "{}: {} bytes, want {}",
                path.display(),
                data.len(),
                h * w
            )));
        }
        if !data.iter().all(|&v| v <= 1) {
            return Err(PhantomError::Corrupt("mask byte outside {0,1}".into()));
        }
        Ok(Mask { h, w, data })
    }
}

/// Why a subject is labeled active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauseTag {
    Gad,
    HighLoad,
    PlantedMarker,
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Generation parameters. Units: probabilities in `[0,1]`, radii in pixels,
/// intensities in `[0,1]`, areas in pixels. Ellipse radii are fractions of
/// the image side so the geometry scales with `image_size`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub image_size: usize,
    /// Probability a subject is sampled on the active branch.
    pub p_active: f64,
    /// P(gad focus | active).
    pub p_gad: f64,
    /// P(planted marker ring | active).
    pub p_marker: f64,
    /// P(high lesion load | active); forced when no other cause fires.
    pub p_high_load: f64,
    /// Lesion-mask area (pixels) above which a subject counts as high load.
    pub area_threshold: usize,
    /// Scales lesion plantability; 0 disables lesion blobs entirely.
    pub lesion_rate: f64,
    /// Probability of flipping the final label; 0 keeps labels sound.
    pub label_noise: f64,

    // Palette.
    pub parenchyma_intensity: f32,
    pub ventricle_intensity: f32,
    pub lesion_intensity: f32,
    pub gad_intensity: f32,
    pub marker_delta: f32,
    pub noise_sigma: f32,

    // Geometry.
    pub brain_rx_frac: f64,
    pub brain_ry_frac: f64,
    pub ventricle_dx_frac: f64,
    pub ventricle_rx_frac: f64,
    pub ventricle_ry_frac: f64,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub marker_radius: f64,
    pub marker_ring_width: f64,
    pub gad_radius: f64,
    /// Fraction of lesion blobs seeded near the ventricle walls.
    pub periventricular_bias: f64,
    /// Area budgets: non-high-load subjects stay at or below
    /// `low_area_max`; high-load subjects land in `[high_area_min,
    /// high_area_max]`.
    pub low_area_max: usize,
    pub high_area_min: usize,
    pub high_area_max: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            image_size: 64,
            p_active: 0.5,
            p_gad: 0.34,
            p_marker: 0.25,
            p_high_load: 0.6,
            area_threshold: 60,
            lesion_rate: 1.0,
            label_noise: 0.0,
            parenchyma_intensity: 0.5,
            ventricle_intensity: 0.15,
            lesion_intensity: 0.85,
            gad_intensity: 1.0,
            marker_delta: 0.06,
            noise_sigma: 0.02,
            brain_rx_frac: 0.38,
            brain_ry_frac: 0.42,
            ventricle_dx_frac: 0.11,
            ventricle_rx_frac: 0.05,
            ventricle_ry_frac: 0.14,
            lesion_radius_min: 1.0,
            lesion_radius_max: 4.0,
            marker_radius: 5.0,
            marker_ring_width: 0.8,
            gad_radius: 1.0,
            periventricular_bias: 0.7,
            low_area_max: 50,
            high_area_min: 80,
            high_area_max: 140,
        }
    }
}

impl GenParams {
    /// Validates probabilities, radii and geometry before any rendering.
    pub fn validate(&self) -> Result<(), PhantomError> {
        let probs = [
            ("p_active", self.p_active),
            ("p_gad", self.p_gad),
            ("p_marker", self.p_marker),
            ("p_high_load", self.p_high_load),
            ("label_noise", self.label_noise),
            ("periventricular_bias", self.periventricular_bias),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(PhantomError::InvalidParams(format!("{name} = {p} not in [0,1]")));
            }
        }
        if self.image_size < 16 {
            return Err(PhantomError::InvalidParams(format!(
                "image_size {} < 16",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.lesion_rate) {
            return Err(PhantomError::InvalidParams("lesion_rate not in [0,1]".into()));
        }
        for (name, r) in [
            ("lesion_radius_min", self.lesion_radius_min),
            ("lesion_radius_max", self.lesion_radius_max),
            ("marker_radius", self.marker_radius),
            ("marker_ring_width", self.marker_ring_width),
            ("gad_radius", self.gad_radius),
        ] {
            if r <= 0.0 || !r.is_finite() {
                return Err(PhantomError::InvalidParams(format!("{name} = {r} must be positive")));
            }
        }
        if self.lesion_radius_min > self.lesion_radius_max {
            return Err(PhantomError::InvalidParams("lesion radius range inverted".into()));
        }
        if self.low_area_max > self.area_threshold {
            return Err(PhantomError::InvalidParams(
                "low_area_max must not exceed area_threshold".into(),
            ));
        }
        if self.high_area_min <= self.area_threshold || self.high_area_min > self.high_area_max {
            return Err(PhantomError::InvalidParams(
                "high area range must sit above area_threshold".into(),
            ));
        }
        let s = self.image_size as f64;
        let (rx, ry) = (self.brain_rx_frac * s, self.brain_ry_frac * s);
        if rx <= 4.0 || ry <= 4.0 {
            return Err(PhantomError::DegenerateGeometry("brain ellipse too small".into()));
        }
        if rx >= s / 2.0 || ry >= s / 2.0 {
            return Err(PhantomError::DegenerateGeometry(
                "brain ellipse exceeds the frame".into(),
            ));
        }
        if self.ventricle_dx_frac * s + self.ventricle_rx_frac * s >= rx {
            return Err(PhantomError::DegenerateGeometry(
                "ventricles exceed the brain ellipse".into(),
            ));
        }
        Ok(())
    }
}

/// One generated subject: baseline and follow-up images plus ground truth.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub split: Split,
    pub baseline: Image,
    pub future: Image,
    pub lesion_mask: Mask,
    pub gad_mask: Mask,
    pub marker_mask: Mask,
    pub brain_mask: Mask,
    pub activity_label: bool,
    pub cause_tags: BTreeSet<CauseTag>,
}

/// Applies the activity rule to finalized masks: active iff lesion area
/// exceeds the threshold, a gad focus is present, or a marker is planted.
pub fn assign_activity_label(
    lesion_mask: &Mask,
    gad_mask: &Mask,
    marker_mask: &Mask,
    area_threshold: usize,
) -> (bool, BTreeSet<CauseTag>) {
    let mut tags = BTreeSet::new();
    if lesion_mask.area() > area_threshold {
        tags.insert(CauseTag::HighLoad);
    }
    if !gad_mask.is_empty() {
        tags.insert(CauseTag::Gad);
    }
    if !marker_mask.is_empty() {
        tags.insert(CauseTag::PlantedMarker);
    }
    (!tags.is_empty(), tags)
}
