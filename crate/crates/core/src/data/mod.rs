//! Domain datasets, ingestion, cropping and episodic sampling.

mod crop;
mod loader;
mod mask;
mod sampling;
mod synthetic;

pub use crop::{crop_offsets, crop_training_set, grid_offsets, reflect_pad, CropSpec, CropStrategy};
pub use loader::{load_domain, write_domain, DatasetManifest};
pub use mask::{binarize_mask, foreground_weight, foreground_weight_capped, DEFAULT_WEIGHT_CAP};
pub use sampling::{sample_task, select_shots, ShotSelection, TaskBatch};
pub use synthetic::{generate_synthetic_domain, standard_suite, BlobShape, SyntheticDomainSpec};

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image with its binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub domain_id: String,
    /// Grayscale intensities in `[0, 1]`.
    pub image: Array2<f64>,
    /// Foreground mask with values in `{0, 1}`.
    pub mask: Array2<u8>,
}

impl Sample {
    /// Builds a sample, checking shape agreement and mask binarity.
    pub fn new(
        id: impl Into<String>,
        domain_id: impl Into<String>,
        image: Array2<f64>,
        mask: Array2<u8>,
    ) -> Result<Self> {
        let id = id.into();
        if image.dim() != mask.dim() {
            return Err(Error::Data(format!(
                "sample {id}: image shape {:?} differs from mask shape {:?}",
                image.dim(),
                mask.dim()
            )));
        }
        if image.is_empty() {
            return Err(Error::Data(format!("sample {id}: empty image")));
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("sample {id}: mask is not binary")));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {id}: non-finite intensity")));
        }
        Ok(Self { id, domain_id: domain_id.into(), image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Source,
    Target,
}

/// All samples of one microscopy domain (one cell type and appearance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: String,
    pub cell_type: String,
    pub samples: Vec<Sample>,
    /// `(height, width)` of the first sample as ingested.
    pub native_resolution: (usize, usize),
    pub role: Role,
}

impl DomainDataset {
    /// Builds a dataset and validates its invariants: non-empty, matching
    /// domain ids and unique sample ids.
    pub fn new(
        domain_id: impl Into<String>,
        cell_type: impl Into<String>,
        samples: Vec<Sample>,
        role: Role,
    ) -> Result<Self> {
        let domain_id = domain_id.into();
        let Some(first) = samples.first() else {
            return Err(Error::Data(format!("dataset {domain_id} has no samples")));
        };
        let native_resolution = (first.height(), first.width());
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.domain_id != domain_id {
                return Err(Error::Data(format!("sample {} belongs to domain {}, not {domain_id}", s.id, s.domain_id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {} in {domain_id}", s.id)));
            }
        }
        Ok(Self { domain_id, cell_type: cell_type.into(), samples, native_resolution, role })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Looks up samples by id, preserving the order of `ids`.
    pub fn by_ids(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::arg(format!("sample {id} not in dataset {}", self.domain_id)))
            })
            .collect()
    }
}
