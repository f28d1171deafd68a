//! Phantom generation, file formats, patch sampling and tiled inference.

mod checkpoint;
mod patches;
mod phantom;
mod stitch;
mod volume;

use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, Record, CHECKPOINT_VERSION};
pub use patches::{crop, random_corner, sample_batch, sample_patches, Subject, TrainBatch};
pub use phantom::{generate_phantom, Contrast, PhantomSpec, BACKGROUND, CSF, GM, WM};
pub use stitch::{coverage, stitch_inference, stitch_with, tile_starts};
pub use volume::{
    load_intensity, load_labels, load_volume, save_volume, LabelMap, Modality, Volume, VolumeFile,
    VOLUME_MAGIC, VOLUME_VERSION,
};

use crate::error::{Error, Result};

/// File stem of subject `index` (`subj01`, `subj02`, …).
pub fn subject_name(index: usize) -> String {
    format!("subj{:02}", index + 1)
}

/// Writes one subject as `<dir>/<name>_{t1,t2,labels}.volb`.
pub fn save_subject(dir: impl AsRef<Path>, subject: &Subject) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = &subject.name;
    save_volume(dir.join(format!("{stem}_t1.volb")), &VolumeFile::Intensity(subject.t1.clone()))?;
    save_volume(dir.join(format!("{stem}_t2.volb")), &VolumeFile::Intensity(subject.t2.clone()))?;
    save_volume(dir.join(format!("{stem}_labels.volb")), &VolumeFile::Labels(subject.labels.clone()))
}

/// Loads every subject in `dir` that has a `_labels.volb` file, sorted by name.
pub fn load_subjects(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_labels.volb"))
                .map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::EmptyDataset(format!("no *_labels.volb files in {}", dir.display())));
    }
    stems
        .into_iter()
        .map(|s| {
            let t1 = load_intensity(dir.join(format!("{s}_t1.volb")))?;
            let t2 = load_intensity(dir.join(format!("{s}_t2.volb")))?;
            let labels = load_labels(dir.join(format!("{s}_labels.volb")))?;
            Subject::new(s, t1, t2, labels)
        })
        .collect()
}

/// Phantom subjects `0..count`; subject `i` uses seed `seed + i`.
pub fn generate_subjects(spec: &PhantomSpec, count: usize) -> Result<Vec<Subject>> {
    (0..count)
        .map(|i| {
            let (t1, t2, labels) = generate_phantom(&PhantomSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })?;
            Subject::new(subject_name(i), t1, t2, labels)
        })
        .collect()
}
