use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CropStrategy {
    /// Stride-`size` tiling; the last row and column of tiles are anchored
    /// to the image border so every pixel is covered.
    #[default]
    Grid,
    /// `crops_per_image` uniformly placed crops.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSpec {
    pub size: usize,
    pub strategy: CropStrategy,
    pub crops_per_image: usize,
    pub seed: u64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { size: 256, strategy: CropStrategy::Grid, crops_per_image: 1, seed: 0 }
    }
}

/// Tile offsets along one axis of length `len` for tiles of `size`.
pub fn grid_offsets(len: usize, size: usize) -> Vec<usize> {
    debug_assert!(len >= size && size > 0);
    let mut out: Vec<usize> = (0..).map(|i| i * size).take_while(|o| o + size <= len).collect();
    if let Some(&last) = out.last() {
        if last + size < len {
            out.push(len - size);
        }
    }
    out
}

/// Mirror index for reflection padding; valid for any integer position.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflection-pads `a` to at least `(min_h, min_w)`, splitting the padding
/// between both sides (the extra pixel goes to the bottom/right).
pub fn reflect_pad<T: Copy>(a: &Array2<T>, min_h: usize, min_w: usize) -> Array2<T> {
    let (h, w) = a.dim();
    let (th, tw) = (h.max(min_h), w.max(min_w));
    if (th, tw) == (h, w) {
        return a.clone();
    }
    let top = ((th - h) / 2) as isize;
    let left = ((tw - w) / 2) as isize;
    Array2::from_shape_fn((th, tw), |(y, x)| a[[reflect(y as isize - top, h), reflect(x as isize - left, w)]])
}

/// Crop offsets `(y, x)` for one image of shape `(h, w)` (both ≥ `size`).
pub fn crop_offsets(h: usize, w: usize, spec: &CropSpec, stream_seed: u64) -> Vec<(usize, usize)> {
    if h == spec.size && w == spec.size {
        return vec![(0, 0)];
    }
    match spec.strategy {
        CropStrategy::Grid => {
            let ys = grid_offsets(h, spec.size);
            let xs = grid_offsets(w, spec.size);
            ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
        }
        CropStrategy::Random => {
            let mut r = rng::stream(stream_seed);
            (0..spec.crops_per_image)
                .map(|_| (r.random_range(0..=h - spec.size), r.random_range(0..=w - spec.size)))
                .collect()
        }
    }
}

/// Cuts every sample of `dataset` into `size × size` crops. Image and mask
/// are cropped at identical offsets. Images smaller than the crop are
/// reflection-padded first.
pub fn crop_training_set(dataset: &DomainDataset, spec: &CropSpec) -> Result<DomainDataset> {
    if spec.size == 0 {
        return Err(Error::arg("crop size must be positive"));
    }
    if spec.strategy == CropStrategy::Random && spec.crops_per_image == 0 {
        return Err(Error::arg("crops_per_image must be positive"));
    }
    let per_sample = par::map_range(dataset.samples.len(), |i| {
        let s = &dataset.samples[i];
        let image = reflect_pad(&s.image, spec.size, spec.size);
        let mask = reflect_pad(&s.mask, spec.size, spec.size);
        let (h, w) = image.dim();
        let seed = rng::derive(spec.seed, &[i as u64, rng::tag(&s.id)]);
        crop_offsets(h, w, spec, seed)
            .into_iter()
            .enumerate()
            .map(|(c, (y, x))| Sample {
                id: format!("{}_c{c}_{y}_{x}", s.id),
                domain_id: s.domain_id.clone(),
                image: image.slice(s![y..y + spec.size, x..x + spec.size]).to_owned(),
                mask: mask.slice(s![y..y + spec.size, x..x + spec.size]).to_owned(),
            })
            .collect::<Vec<_>>()
    });
    DomainDataset::new(
        dataset.domain_id.clone(),
        dataset.cell_type.clone(),
        per_sample.into_iter().flatten().collect(),
        dataset.role,
    )
}
