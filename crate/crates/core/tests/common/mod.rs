#![allow(dead_code)]

use cellseg::data::{generate_synthetic_domain, BlobShape, DomainDataset, Role, SyntheticDomainSpec, TaskBatch};
use cellseg::losses::{LossBreakdown, LossOptions, LossWeights};
use cellseg::meta::MetaLearner;
use cellseg::models::{LayoutBuilder, ParamEntry, ParamKind, ParameterVector, Phase};

pub fn blob_spec(id: &str, size: usize, count: usize, shape: BlobShape, seed: u64) -> SyntheticDomainSpec {
    let s = size as f64;
    SyntheticDomainSpec {
        domain_id: id.into(),
        image_size: (size, size),
        blob_count_range: (1, 3),
        blob_radius_range: (s * 0.1, s * 0.2),
        blob_shape: shape,
        foreground_intensity_range: (0.6, 0.9),
        background_intensity_range: (0.0, 0.2),
        noise_sigma: 0.05,
        sample_count: count,
        seed,
        cell_type: None,
        role: Role::Source,
    }
}

pub fn blobs(id: &str, size: usize, count: usize, seed: u64) -> DomainDataset {
    generate_synthetic_domain(&blob_spec(id, size, count, BlobShape::Disc, seed)).unwrap()
}

/// Relative difference with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `½·a·(x − c)² + ½·b·(y − d)²`, independent of the batches.
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub poison: bool,
}

impl Quadratic {
    pub fn grad(&self, v: &[f64]) -> [f64; 2] {
        [self.a * (v[0] - self.c), self.b * (v[1] - self.d)]
    }
}

impl MetaLearner for Quadratic {
    fn task_loss_and_grad(
        &self,
        params: &mut ParameterVector,
        _: &TaskBatch<'_>,
        _: &TaskBatch<'_>,
        _: &TaskBatch<'_>,
        _: LossWeights,
        _: &LossOptions,
    ) -> cellseg::Result<(LossBreakdown, ParameterVector)> {
        let v = params.values();
        let loss = if self.poison {
            f64::NAN
        } else {
            0.5 * self.a * (v[0] - self.c).powi(2) + 0.5 * self.b * (v[1] - self.d).powi(2)
        };
        let g = self.grad(v);
        let grad = ParameterVector::from_values(params.layout().clone(), g.to_vec())?;
        Ok((LossBreakdown { bce: loss, er: 0.0, dist: 0.0, total: loss }, grad))
    }

    fn is_trainable(&self, _: &ParamEntry, _: Phase) -> bool {
        true
    }
}

pub fn two_params(x: f64, y: f64) -> ParameterVector {
    let mut b = LayoutBuilder::default();
    b.push("w", ParamKind::Weight, vec![2]);
    ParameterVector::from_values(b.finish(), vec![x, y]).unwrap()
}
