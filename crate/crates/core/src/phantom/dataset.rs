//! Dataset assembly and the on-disk layout.
//!
//! Layout per dataset directory:
//! - `manifest.json` with version, image shape, seed, params and the
//!   per-subject id/split/label/cause_tags index.
//! - `<id>_base.f32`, `<id>_future.f32`: raw little-endian f32, row-major.
//! - `<id>_lesion.u8`, `<id>_gad.u8`, `<id>_marker.u8`, `<id>_brain.u8`:
//!   one byte per pixel, 0/1.

use super::{synthesize_subject, CauseTag, GenParams, Image, Mask, Split, SubjectRecord};
use crate::error::PhantomError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Per-subject manifest row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub cause_tags: BTreeSet<CauseTag>,
}

/// `manifest.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_shape: [usize; 2],
    pub seed: u64,
    pub params: GenParams,
    pub subjects: Vec<SubjectMeta>,
}

/// A dataset directory with its parsed manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Split sizes and cause mix of a generated dataset.
#[derive(Debug, Clone, Serialize)]
pub struct ClassBalance {
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub active_fraction: f64,
    pub gad_fraction_of_active: f64,
    pub marker_fraction_of_active: f64,
    pub high_load_fraction_of_active: f64,
}

impl Dataset {
    pub fn image_h(&self) -> usize {
        self.manifest.image_shape[0]
    }

    pub fn image_w(&self) -> usize {
        self.manifest.image_shape[1]
    }

    pub fn subjects(&self, split: Split) -> impl Iterator<Item = &SubjectMeta> {
        self.manifest.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn meta(&self, id: &str) -> Option<&SubjectMeta> {
        self.manifest.subjects.iter().find(|s| s.id == id)
    }

    /// Loads one subject's images and masks from disk.
    pub fn load_subject(&self, meta: &SubjectMeta) -> Result<SubjectRecord, PhantomError> {
        let (h, w) = (self.image_h(), self.image_w());
        let p = |suffix: &str| self.root.join(format!("{}_{suffix}", meta.id));
        Ok(SubjectRecord {
            id: meta.id.clone(),
            split: meta.split,
            baseline: Image::read_f32(&p("base.f32"), h, w)?,
            future: Image::read_f32(&p("future.f32"), h, w)?,
            lesion_mask: Mask::read_u8(&p("lesion.u8"), h, w)?,
            gad_mask: Mask::read_u8(&p("gad.u8"), h, w)?,
            marker_mask: Mask::read_u8(&p("marker.u8"), h, w)?,
            brain_mask: Mask::read_u8(&p("brain.u8"), h, w)?,
            activity_label: meta.label != 0,
            cause_tags: meta.cause_tags.clone(),
        })
    }

    /// Class balance recomputed from the manifest.
    pub fn balance(&self) -> ClassBalance {
        let subs = &self.manifest.subjects;
        let n = subs.len();
        let actives: Vec<_> = subs.iter().filter(|s| s.label != 0).collect();
        let n_active = actives.len().max(1);
        let frac = |tag: CauseTag| {
            actives.iter().filter(|s| s.cause_tags.contains(&tag)).count() as f64
                / n_active as f64
        };
        ClassBalance {
            n_subjects: n,
            n_train: subs.iter().filter(|s| s.split == Split::Train).count(),
            n_val: subs.iter().filter(|s| s.split == Split::Val).count(),
            n_test: subs.iter().filter(|s| s.split == Split::Test).count(),
            active_fraction: actives.len() as f64 / n.max(1) as f64,
            gad_fraction_of_active: frac(CauseTag::Gad),
            marker_fraction_of_active: frac(CauseTag::PlantedMarker),
            high_load_fraction_of_active: frac(CauseTag::HighLoad),
        }
    }
}

fn subject_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix(dataset_seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generates `n_subjects` phantoms, assigns 60/20/20 splits and persists the
/// dataset under `out_dir`. Byte-identical for identical `(n, seed, params)`.
pub fn build_dataset(
    n_subjects: usize,
    seed: u64,
    params: &GenParams,
    out_dir: &Path,
) -> Result<(Dataset, ClassBalance), PhantomError> {
    params.validate()?;
    if n_subjects < 10 {
        return Err(PhantomError::TooFewSubjects(n_subjects));
    }
    std::fs::create_dir_all(out_dir)?;

    // Subjects are pure functions of (seed, index); generation order is
    // irrelevant so the batch can run in parallel.
    let mut records: Vec<SubjectRecord> = (0..n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut r = synthesize_subject(subject_seed(seed, i), params)?;
            r.id = format!("s{i:04}");
            Ok(r)
        })
        .collect::<Result<_, PhantomError>>()?;

    // Shuffled split assignment: 60% train, 20% val, rest test.
    let n_train = n_subjects * 60 / 100;
    let n_val = n_subjects * 20 / 100;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_subjects {
        return Err(PhantomError::TooFewSubjects(n_subjects));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x53504c4954u64)); // "SPLIT"
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        records[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let subjects: Vec<SubjectMeta> = records
        .iter()
        .map(|r| SubjectMeta {
            id: r.id.clone(),
            split: r.split,
            label: r.activity_label as u8,
            cause_tags: r.cause_tags.clone(),
        })
        .collect();
    let manifest = Manifest {
        version: 1,
        image_shape: [params.image_size, params.image_size],
        seed,
        params: params.clone(),
        subjects,
    };

    for r in &records {
        let p = |suffix: &str| out_dir.join(format!("{}_{suffix}", r.id));
        r.baseline.write_f32(&p("base.f32"))?;
        r.future.write_f32(&p("future.f32"))?;
        r.lesion_mask.write_u8(&p("lesion.u8"))?;
        r.gad_mask.write_u8(&p("gad.u8"))?;
        r.marker_mask.write_u8(&p("marker.u8"))?;
        r.brain_mask.write_u8(&p("brain.u8"))?;
    }
    let manifest_json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), manifest_json)?;

    let ds = Dataset { root: out_dir.to_path_buf(), manifest };
    let balance = ds.balance();
    Ok((ds, balance))
}

/// Opens an existing dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, PhantomError> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.version != 1 {
        return Err(PhantomError::Corrupt(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(Dataset { root: dir.to_path_buf(), manifest })
}
