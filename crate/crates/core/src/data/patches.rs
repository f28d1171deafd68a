use rand::Rng;

use super::volume::{LabelMap, Modality, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled subject: both modalities and the shared label field.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub name: String,
    pub t1: Volume,
    pub t2: Volume,
    pub labels: LabelMap,
}

impl Subject {
    pub fn new(name: impl Into<String>, t1: Volume, t2: Volume, labels: LabelMap) -> Result<Self> {
        if t1.dims != labels.dims || t2.dims != labels.dims {
            return Err(Error::invalid(
                "subject",
                format!(
                    "dims disagree: t1 {:?}, t2 {:?}, labels {:?}",
                    t1.dims, t2.dims, labels.dims
                ),
            ));
        }
        Ok(Self {
            name: name.into(),
            t1,
            t2,
            labels,
        })
    }

    pub fn modality(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1 => &self.t1,
            Modality::T2 => &self.t2,
        }
    }
}

/// A batch of cubic patches with their label crops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[N, s, s, s, 1]`
    pub inputs: Tensor<f32>,
    /// `N·s³` class ids, row-major per patch.
    pub labels: Vec<u8>,
    pub modality: Modality,
    pub corners: Vec<[usize; 3]>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// Copies the `size³` cube at `corner` out of a `[D,H,W]` field.
pub fn crop<T: Copy>(data: &[T], dims: [usize; 3], corner: [usize; 3], size: usize) -> Vec<T> {
    let [_, h, w] = dims;
    let [cd, ch, cw] = corner;
    let mut out = Vec::with_capacity(size * size * size);
    for z in cd..cd + size {
        for y in ch..ch + size {
            let s = (z * h + y) * w + cw;
            out.extend_from_slice(&data[s..s + size]);
        }
    }
    out
}

fn check_size(dims: [usize; 3], size: usize) -> Result<()> {
    if size == 0 || dims.iter().any(|&d| size > d) {
        return Err(Error::invalid(
            "sample_patches",
            format!("patch size {size} does not fit volume {dims:?}"),
        ));
    }
    Ok(())
}

/// Uniform corner in `[0, dim − size]` per axis.
pub fn random_corner<R: Rng + ?Sized>(dims: [usize; 3], size: usize, rng: &mut R) -> [usize; 3] {
    dims.map(|d| rng.random_range(0..=d - size))
}

fn assemble(items: Vec<(Vec<f32>, Vec<u8>, [usize; 3])>, size: usize, modality: Modality) -> Result<TrainBatch> {
    let n = items.len();
    let mut inputs = Vec::with_capacity(n * size.pow(3));
    let mut labels = Vec::with_capacity(n * size.pow(3));
    let mut corners = Vec::with_capacity(n);
    for (x, l, c) in items {
        inputs.extend(x);
        labels.extend(l);
        corners.push(c);
    }
    Ok(TrainBatch {
        inputs: Tensor::new(&[n, size, size, size, 1], inputs)?,
        labels,
        modality,
        corners,
    })
}

/// Draws `n` patches from one volume and groups them into batches of `batch`
/// (the last batch may be short).
pub fn sample_patches<R: Rng + ?Sized>(
    volume: &Volume,
    labels: &LabelMap,
    modality: Modality,
    n: usize,
    size: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<TrainBatch>> {
    if volume.dims != labels.dims {
        return Err(Error::invalid("sample_patches", "volume and label dims differ"));
    }
    check_size(volume.dims, size)?;
    if batch == 0 {
        return Err(Error::invalid("sample_patches", "batch must be positive"));
    }
    let items: Vec<_> = (0..n)
        .map(|_| {
            let c = random_corner(volume.dims, size, rng);
            (
                crop(&volume.voxels, volume.dims, c, size),
                crop(&labels.labels, labels.dims, c, size),
                c,
            )
        })
        .collect();
    let mut batches = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        let chunk: Vec<_> = it.by_ref().take(batch).collect();
        batches.push(assemble(chunk, size, modality)?);
    }
    Ok(batches)
}

/// One batch drawn across several subjects: each patch picks its subject
/// uniformly, then its corner.
pub fn sample_batch<R: Rng + ?Sized>(
    subjects: &[Subject],
    modality: Modality,
    size: usize,
    batch: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset("no subjects to sample from".into()));
    }
    let items = (0..batch)
        .map(|_| {
            let s = &subjects[rng.random_range(0..subjects.len())];
            check_size(s.labels.dims, size)?;
            let c = random_corner(s.labels.dims, size, rng);
            let v = s.modality(modality);
            Ok((
                crop(&v.voxels, v.dims, c, size),
                crop(&s.labels.labels, s.labels.dims, c, size),
                c,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(items, size, modality)
}
