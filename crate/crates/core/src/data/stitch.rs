//! Overlapping-tile inference over whole volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::patches::crop;
use super::volume::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::nn::{infer_logits, ModelConfig, NamedWeights};
use crate::tensor::{softmax_values, Tensor};

/// Tile origins along one axis: `0, step, 2·step, …`, with the last tile
/// clamped to end exactly at the boundary.
pub fn tile_starts(extent: usize, patch: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < extent {
        starts.push(s);
        s += step;
    }
    starts.push(extent - patch);
    starts.dedup();
    starts
}

fn check(dims: [usize; 3], patch: usize, step: usize) -> Result<()> {
    if step == 0 || step > patch {
        return Err(Error::invalid(
            "stitch",
            format!("overlap step {step} must be in 1..={patch} (the patch size)"),
        ));
    }
    if dims.iter().any(|&d| d < patch) {
        return Err(Error::invalid(
            "stitch",
            format!("volume {dims:?} smaller than patch {patch}"),
        ));
    }
    Ok(())
}

fn tiles(dims: [usize; 3], patch: usize, step: usize) -> Vec<[usize; 3]> {
    let [zs, ys, xs] = dims.map(|d| tile_starts(d, patch, step));
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// How many tiles cover each voxel.
pub fn coverage(dims: [usize; 3], patch: usize, step: usize) -> Result<Vec<u32>> {
    check(dims, patch, step)?;
    let [_, h, w] = dims;
    let mut cov = vec![0u32; dims.iter().product()];
    for [cz, cy, cx] in tiles(dims, patch, step) {
        for z in cz..cz + patch {
            for y in cy..cy + patch {
                let row = (z * h + y) * w;
                cov[row + cx..row + cx + patch].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    Ok(cov)
}

/// Tiles `volume`, feeds each tile to `logits_of` (`[1,s,s,s,1] → [1,s,s,s,C]`),
/// averages per-class softmax probabilities over the tiles covering each
/// voxel and returns the argmax label field (ties to the lowest class).
pub fn stitch_with<F>(
    volume: &Volume,
    patch: usize,
    step: usize,
    classes: usize,
    mut logits_of: F,
) -> Result<LabelMap>
where
    F: FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    check(volume.dims, patch, step)?;
    let [_, h, w] = volume.dims;
    let n = volume.len();
    let mut acc = vec![0.0f32; n * classes];
    let mut count = vec![0u32; n];
    for corner in tiles(volume.dims, patch, step) {
        let input = Tensor::new(
            &[1, patch, patch, patch, 1],
            crop(&volume.voxels, volume.dims, corner, patch),
        )?;
        let logits = logits_of(&input)?;
        let expect = [1, patch, patch, patch, classes];
        if logits.shape() != expect {
            return Err(Error::shape("stitch", logits.shape(), &expect));
        }
        let probs = softmax_values(logits.data(), logits.shape(), 4);
        let [cz, cy, cx] = corner;
        let mut t = 0;
        for z in cz..cz + patch {
            for y in cy..cy + patch {
                for x in cx..cx + patch {
                    let v = (z * h + y) * w + x;
                    count[v] += 1;
                    for c in 0..classes {
                        acc[v * classes + c] += probs[t * classes + c];
                    }
                    t += 1;
                }
            }
        }
    }
    let labels = acc
        .chunks_exact(classes)
        .zip(&count)
        .map(|(p, &k)| {
            let inv = 1.0 / k as f32;
            let mut best = 0;
            for c in 1..classes {
                if p[c] * inv > p[best] * inv {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(volume.dims, labels)
}

/// Whole-volume segmentation with an eval-mode model.
pub fn stitch_inference(
    weights: &NamedWeights<f32>,
    config: &ModelConfig,
    volume: &Volume,
    patch: usize,
    step: usize,
) -> Result<LabelMap> {
    // eval mode draws no random numbers; the generator only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    stitch_with(volume, patch, step, config.num_classes, |x| {
        infer_logits(weights, config, x, &mut rng)
    })
}
