//! Task objectives: foreground-weighted binary cross entropy, entropy
//! regularization on an unlabeled task, and cross-task latent distillation.
//!
//! Pixel terms are summed over the image and averaged over samples unless
//! [`PixelReduction::Mean`] is selected. Predictions are clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before any logarithm; the clamp has zero
//! derivative where it is active.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{foreground_weight_capped, TaskBatch, DEFAULT_WEIGHT_CAP};
use crate::error::{Error, Result};
use crate::models::{BatchForward, Mode, ParameterVector, PredictionMap, SegmentationNetwork};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the entropy regularizer.
    pub alpha: f64,
    /// Weight of the distillation term.
    pub beta: f64,
}

impl LossWeights {
    pub const BCE_ONLY: Self = Self { alpha: 0.0, beta: 0.0 };
    pub const BCE_ER: Self = Self { alpha: 0.1, beta: 0.0 };
    pub const BCE_D: Self = Self { alpha: 0.0, beta: 0.01 };
    pub const FULL: Self = Self { alpha: 0.01, beta: 0.01 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `-p ln p` only.
    #[default]
    ForegroundOnly,
    /// `-p ln p - (1 - p) ln(1 - p)`.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    #[serde(default)]
    pub entropy: EntropyForm,
    #[serde(default)]
    pub reduction: PixelReduction,
    /// Foreground weight used for masks without foreground.
    #[serde(default = "default_cap")]
    pub weight_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_WEIGHT_CAP
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { entropy: EntropyForm::ForegroundOnly, reduction: PixelReduction::Sum, weight_cap: DEFAULT_WEIGHT_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub bce: f64,
    pub er: f64,
    pub dist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.bce.is_finite() && self.er.is_finite() && self.dist.is_finite() && self.total.is_finite()
    }
}

fn clamp(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

fn pixel_scale(reduction: PixelReduction, pixels: usize) -> f64 {
    match reduction {
        PixelReduction::Sum => 1.0,
        PixelReduction::Mean => 1.0 / pixels as f64,
    }
}

/// Weighted BCE and its gradient with respect to each prediction map.
pub fn weighted_bce_with_grad(
    predictions: &[PredictionMap],
    masks: &[&Array2<u8>],
    weights: &[f64],
    reduction: PixelReduction,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if predictions.len() != masks.len() || predictions.len() != weights.len() {
        return Err(Error::arg("weighted_bce: list lengths differ"));
    }
    if predictions.is_empty() {
        return Err(Error::arg("weighted_bce: empty batch"));
    }
    let n = predictions.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for ((pred, mask), &w) in predictions.iter().zip(masks).zip(weights) {
        if pred.0.dim() != mask.dim() {
            return Err(Error::arg(format!("weighted_bce: prediction {:?} vs mask {:?}", pred.0.dim(), mask.dim())));
        }
        let scale = pixel_scale(reduction, pred.0.len()) / n;
        let mut g = Array2::zeros(pred.0.dim());
        let mut sum = 0.0;
        Zip::from(&mut g).and(&pred.0).and(*mask).for_each(|g, &p, &y| {
            let (p, live) = clamp(p);
            if y != 0 {
                sum += w * p.ln();
                *g = -scale * live * w / p;
            } else {
                sum += (1.0 - p).ln();
                *g = scale * live / (1.0 - p);
            }
        });
        total -= sum * scale;
        grads.push(g);
    }
    Ok((total, grads))
}

/// `-(1/N) Σ_samples Σ_pixels [w·y·ln p + (1-y)·ln(1-p)]` with `w` the
/// per-mask background/foreground ratio supplied in `weights`.
pub fn weighted_bce(predictions: &[PredictionMap], masks: &[&Array2<u8>], weights: &[f64]) -> Result<f64> {
    weighted_bce_with_grad(predictions, masks, weights, PixelReduction::Sum).map(|(v, _)| v)
}

pub fn entropy_with_grad(
    predictions: &[PredictionMap],
    form: EntropyForm,
    reduction: PixelReduction,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if predictions.is_empty() {
        return Err(Error::arg("entropy_regularizer: empty batch"));
    }
    let n = predictions.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for pred in predictions {
        if pred.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("entropy_regularizer: non-finite prediction"));
        }
        let scale = pixel_scale(reduction, pred.0.len()) / n;
        let mut sum = 0.0;
        let g = pred.0.mapv(|p| {
            let (p, live) = clamp(p);
            match form {
                EntropyForm::ForegroundOnly => {
                    sum -= p * p.ln();
                    -scale * live * (p.ln() + 1.0)
                }
                EntropyForm::Binary => {
                    let q = 1.0 - p;
                    sum -= p * p.ln() + q * q.ln();
                    scale * live * (q.ln() - p.ln())
                }
            }
        });
        total += sum * scale;
        grads.push(g);
    }
    Ok((total, grads))
}

/// `(1/N) Σ_samples Σ_pixels -p·ln p`.
pub fn entropy_regularizer(predictions: &[PredictionMap]) -> Result<f64> {
    entropy_with_grad(predictions, EntropyForm::ForegroundOnly, PixelReduction::Sum).map(|(v, _)| v)
}

/// Loss value with the gradients for the `m` and `p` latents.
pub type DistillationGrad = (f64, Vec<Array3<f64>>, Vec<Array3<f64>>);

/// Distillation value and gradients for both latent lists.
pub fn distillation_with_grad(latents_m: &[Array3<f64>], latents_p: &[Array3<f64>]) -> Result<DistillationGrad> {
    let (Some(first), false) = (latents_m.first(), latents_p.is_empty()) else {
        return Err(Error::arg("distillation: empty latent list"));
    };
    let shape = first.dim();
    if latents_m.iter().chain(latents_p).any(|l| l.dim() != shape) {
        return Err(Error::arg("distillation: latent shapes differ"));
    }
    let (m, p) = (latents_m.len() as f64, latents_p.len() as f64);
    let norm = 1.0 / (m * p);
    let mut value = 0.0;
    for a in latents_m {
        for b in latents_p {
            value += Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        }
    }
    let sum_m = latents_m.iter().fold(Array3::<f64>::zeros(shape), |acc, a| acc + a);
    let sum_p = latents_p.iter().fold(Array3::<f64>::zeros(shape), |acc, b| acc + b);
    let dm = latents_m.iter().map(|a| (a * p - &sum_p) * (2.0 * norm)).collect();
    let dp = latents_p.iter().map(|b| (b * m - &sum_m) * (2.0 * norm)).collect();
    Ok((value * norm, dm, dp))
}

/// Mean over all cross pairs of the squared Euclidean distance between
/// latents.
pub fn distillation(
    latents_m: &[crate::models::LatentActivation],
    latents_p: &[crate::models::LatentActivation],
) -> Result<f64> {
    let m: Vec<Array3<f64>> = latents_m.iter().map(|l| l.0.clone()).collect();
    let p: Vec<Array3<f64>> = latents_p.iter().map(|l| l.0.clone()).collect();
    distillation_with_grad(&m, &p).map(|(v, _, _)| v)
}

/// Per-mask foreground weights.
pub fn mask_weights(masks: &[&Array2<u8>], cap: f64) -> Vec<f64> {
    masks.iter().map(|m| foreground_weight_capped(m, cap)).collect()
}

/// Result of evaluating the composite objective with its gradient.
pub struct CompositeEval {
    pub breakdown: LossBreakdown,
    pub gradient: ParameterVector,
    /// Train-mode forward of the labeled task, for running-statistics updates.
    pub forward_m: BatchForward,
}

fn images<'a>(batch: &'a TaskBatch<'_>) -> Vec<&'a Array2<f64>> {
    batch.samples.iter().map(|s| &s.image).collect()
}

/// Composite objective `bce(m) + alpha·er(n) + beta·dist(m, p)` and its
/// gradient. All three forward passes use batch statistics. Every term is
/// computed even when its weight is zero.
pub fn composite_loss_and_grad(
    net: &SegmentationNetwork,
    params: &ParameterVector,
    batch_m: &TaskBatch<'_>,
    batch_n: &TaskBatch<'_>,
    batch_p: &TaskBatch<'_>,
    weights: LossWeights,
    options: &LossOptions,
) -> Result<CompositeEval> {
    if !batch_m.labeled {
        return Err(Error::arg("the supervised task batch must be labeled"));
    }
    let fwd_m = net.forward_batch(params, &images(batch_m), Mode::Train)?;
    let fwd_n = net.forward_batch(params, &images(batch_n), Mode::Train)?;
    let fwd_p = net.forward_batch(params, &images(batch_p), Mode::Train)?;

    let masks: Vec<&Array2<u8>> = batch_m.samples.iter().map(|s| &s.mask).collect();
    let w = mask_weights(&masks, options.weight_cap);
    let (bce, d_pred_m) = weighted_bce_with_grad(&fwd_m.predictions, &masks, &w, options.reduction)?;
    let (er, d_pred_n) = entropy_with_grad(&fwd_n.predictions, options.entropy, options.reduction)?;
    let lat_m: Vec<Array3<f64>> = net.latents(&fwd_m).into_iter().map(|l| l.0).collect();
    let lat_p: Vec<Array3<f64>> = net.latents(&fwd_p).into_iter().map(|l| l.0).collect();
    let (dist, d_lat_m, d_lat_p) = distillation_with_grad(&lat_m, &lat_p)?;

    let breakdown = LossBreakdown { bce, er, dist, total: bce + weights.alpha * er + weights.beta * dist };

    // Latent gradients enter the m-graph together with the BCE gradient.
    let d_lat_m: Vec<Array3<f64>> = d_lat_m.into_iter().map(|g| g * weights.beta).collect();
    let d_lat_p: Vec<Array3<f64>> = d_lat_p.into_iter().map(|g| g * weights.beta).collect();
    let d_pred_n: Vec<Array2<f64>> = d_pred_n.into_iter().map(|g| g * weights.alpha).collect();

    let mut gradient = net.backward(params, &fwd_m, Some(&d_pred_m), Some(&d_lat_m))?;
    gradient.axpy(1.0, &net.backward(params, &fwd_n, Some(&d_pred_n), None)?)?;
    gradient.axpy(1.0, &net.backward(params, &fwd_p, None, Some(&d_lat_p))?)?;

    Ok(CompositeEval { breakdown, gradient, forward_m: fwd_m })
}

/// Value-only composite objective.
pub fn composite_loss(
    net: &SegmentationNetwork,
    params: &ParameterVector,
    batch_m: &TaskBatch<'_>,
    batch_n: &TaskBatch<'_>,
    batch_p: &TaskBatch<'_>,
    weights: LossWeights,
    options: &LossOptions,
) -> Result<LossBreakdown> {
    if !batch_m.labeled {
        return Err(Error::arg("the supervised task batch must be labeled"));
    }
    let fwd_m = net.forward_batch(params, &images(batch_m), Mode::Train)?;
    let fwd_n = net.forward_batch(params, &images(batch_n), Mode::Train)?;
    let fwd_p = net.forward_batch(params, &images(batch_p), Mode::Train)?;
    let masks: Vec<&Array2<u8>> = batch_m.samples.iter().map(|s| &s.mask).collect();
    let w = mask_weights(&masks, options.weight_cap);
    let (bce, _) = weighted_bce_with_grad(&fwd_m.predictions, &masks, &w, options.reduction)?;
    let (er, _) = entropy_with_grad(&fwd_n.predictions, options.entropy, options.reduction)?;
    let lat_m: Vec<Array3<f64>> = net.latents(&fwd_m).into_iter().map(|l| l.0).collect();
    let lat_p: Vec<Array3<f64>> = net.latents(&fwd_p).into_iter().map(|l| l.0).collect();
    let (dist, _, _) = distillation_with_grad(&lat_m, &lat_p)?;
    Ok(LossBreakdown { bce, er, dist, total: bce + weights.alpha * er + weights.beta * dist })
}

/// Weighted BCE over a labeled batch (used by fine-tuning and the transfer
/// baseline) with its gradient.
pub fn bce_loss_and_grad(
    net: &SegmentationNetwork,
    params: &ParameterVector,
    images: &[&Array2<f64>],
    masks: &[&Array2<u8>],
    options: &LossOptions,
) -> Result<(f64, ParameterVector, BatchForward)> {
    let fwd = net.forward_batch(params, images, Mode::Train)?;
    let w = mask_weights(masks, options.weight_cap);
    let (bce, d_pred) = weighted_bce_with_grad(&fwd.predictions, masks, &w, options.reduction)?;
    let grad = net.backward(params, &fwd, Some(&d_pred), None)?;
    Ok((bce, grad, fwd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pm(a: Array2<f64>) -> PredictionMap {
        PredictionMap(a)
    }

    #[test]
    fn bce_hand_example() {
        let mask = array![[1u8, 0], [0, 0]];
        let pred = pm(Array2::from_elem((2, 2), 0.5));
        let v = weighted_bce(std::slice::from_ref(&pred), &[&mask], &[3.0]).unwrap();
        assert!((v - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 4.1589).abs() < 1e-4);
        let two = weighted_bce(&[pred.clone(), pred], &[&mask, &mask], &[3.0, 3.0]).unwrap();
        assert!((two - v).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let mask = array![[1u8, 0], [0, 1]];
        let pred = pm(mask.mapv(f64::from));
        let v = weighted_bce(&[pred], &[&mask], &[1.0]).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        assert!(v <= 4.0 * 1000.0 * PROB_EPS * PROB_EPS.ln().abs());
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let mask = array![[1u8, 0]];
        let pred = pm(Array2::from_elem((2, 2), 0.5));
        assert!(weighted_bce(&[pred], &[&mask], &[1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let half = pm(Array2::from_elem((2, 2), 0.5));
        let v = entropy_regularizer(&[half]).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        let hi = pm(Array2::from_elem((2, 2), 1.0));
        assert!(entropy_regularizer(&[hi]).unwrap() < 1e-6);
        let lo = pm(Array2::from_elem((2, 2), 0.0));
        let v = entropy_regularizer(&[lo]).unwrap();
        assert!((v - 4.0 * PROB_EPS * PROB_EPS.ln().abs()).abs() < 1e-15);
    }

    #[test]
    fn distillation_examples() {
        let one = |v: f64| Array3::from_elem((1, 1, 1), v);
        assert_eq!(distillation_with_grad(&[one(0.3)], &[one(0.3)]).unwrap().0, 0.0);
        assert_eq!(distillation_with_grad(&[one(1.0)], &[one(0.0)]).unwrap().0, 1.0);
        assert!(distillation_with_grad(&[one(1.0)], &[Array3::zeros((1, 1, 2))]).is_err());
    }

    #[test]
    fn weight_presets_match_ablation_table() {
        assert_eq!(LossWeights::BCE_ONLY, LossWeights { alpha: 0.0, beta: 0.0 });
        assert_eq!(LossWeights::BCE_ER, LossWeights { alpha: 0.1, beta: 0.0 });
        assert_eq!(LossWeights::BCE_D, LossWeights { alpha: 0.0, beta: 0.01 });
        assert_eq!(LossWeights::FULL, LossWeights { alpha: 0.01, beta: 0.01 });
        assert!(LossWeights { alpha: -1.0, beta: 0.0 }.validate().is_err());
    }
}
