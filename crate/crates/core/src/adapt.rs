//! Target adaptation and evaluation: K-shot fine-tuning, the pooled transfer
//! baseline, IoU scoring and the leave-one-dataset-out protocol.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{crop_training_set, select_shots, CropSpec, CropStrategy, DomainDataset, Sample, ShotSelection};
use crate::error::{Error, Result};
use crate::losses::{bce_loss_and_grad, LossOptions, LossWeights};
use crate::meta::{meta_train_network, MetaConfig};
use crate::models::{build_network, Mode, NetworkSpec, ParameterVector, Phase, SegmentationNetwork, BN_MOMENTUM};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub binarize_threshold: f64,
    /// Cut each shot into `tile_size` tiles before training; otherwise the
    /// shots are used whole and must share one size.
    pub tile_shots: bool,
    pub tile_size: usize,
    pub loss_options: LossOptions,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-4,
            weight_decay: 5e-4,
            binarize_threshold: 0.5,
            tile_shots: true,
            tile_size: 256,
            loss_options: LossOptions::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("fine-tune epochs must be at least 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.binarize_threshold)));
        }
        if self.tile_shots && self.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        OptimizerConfig::adam(self.lr, self.weight_decay).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub params: ParameterVector,
    /// Weighted BCE before each epoch's step.
    pub losses: Vec<f64>,
}

fn training_pairs(shots: &[&Sample], config: &FinetuneConfig) -> Result<Vec<Sample>> {
    if !config.tile_shots {
        let (h, w) = (shots[0].height(), shots[0].width());
        if shots.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(Error::arg("shots differ in size; enable tiling to fine-tune on them"));
        }
        return Ok(shots.iter().map(|s| (*s).clone()).collect());
    }
    let spec = CropSpec { size: config.tile_size, strategy: CropStrategy::Grid, ..CropSpec::default() };
    let mut out = Vec::new();
    for s in shots {
        let one = DomainDataset::new(s.domain_id.clone(), "", vec![(*s).clone()], Default::default())?;
        out.extend(crop_training_set(&one, &spec)?.samples);
    }
    Ok(out)
}

/// Weighted-BCE fine-tuning on the K shots, full batch, one step per epoch.
pub fn fine_tune(
    net: &SegmentationNetwork,
    theta: &ParameterVector,
    shots: &[&Sample],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if shots.is_empty() {
        return Err(Error::arg("fine-tuning needs at least one shot"));
    }
    let pairs = training_pairs(shots, config)?;
    let images: Vec<&Array2<f64>> = pairs.iter().map(|s| &s.image).collect();
    let masks: Vec<&Array2<u8>> = pairs.iter().map(|s| &s.mask).collect();
    let policy = net.spec().bn_policy;
    let mut params = theta.clone();
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr, config.weight_decay), &params, |e| {
        policy.is_trainable(e.kind, Phase::FineTune)
    });
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grad, fwd) = bce_loss_and_grad(net, &params, &images, &masks, &config.loss_options)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence(format!("non-finite fine-tuning loss at epoch {epoch}")));
        }
        losses.push(loss);
        opt.step(&mut params, &grad)?;
        net.update_running_stats(&mut params, &fwd, BN_MOMENTUM);
    }
    Ok(FinetuneOutcome { params, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub loss_options: LossOptions,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 5,
            lr: 0.001,
            weight_decay: 0.0005,
            max_steps: None,
            loss_options: LossOptions::default(),
            seed: 0,
        }
    }
}

impl TransferConfig {
    /// The settings that spend the same number of optimizer steps, at the
    /// same batch size and rates, as meta-training with `meta` on
    /// `num_sources` sources.
    pub fn matching_budget(meta: &MetaConfig, num_sources: usize) -> Self {
        Self {
            epochs: usize::MAX,
            batch_size: meta.k,
            lr: meta.inner_lr,
            weight_decay: meta.inner_weight_decay,
            max_steps: Some(meta.outer_iterations * meta.inner_steps * num_sources),
            loss_options: meta.loss_options,
            seed: meta.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("transfer epochs and batch size must be positive".into()));
        }
        OptimizerConfig::adam(self.lr, self.weight_decay).validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub params: ParameterVector,
    /// Mean batch loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Supervised weighted-BCE training on the pooled, shuffled samples of all
/// sources, starting from `init`.
pub fn transfer_train_network(
    net: &SegmentationNetwork,
    init: ParameterVector,
    sources: &[DomainDataset],
    config: &TransferConfig,
) -> Result<TransferOutcome> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("transfer training needs at least one source".into()));
    }
    let pooled: Vec<&Sample> = sources.iter().flat_map(|d| d.samples.iter()).collect();
    let policy = net.spec().bn_policy;
    let mut params = init;
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr, config.weight_decay), &params, |e| {
        policy.is_trainable(e.kind, Phase::Pretrain)
    });
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0;
    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    for epoch in 0..config.epochs {
        if steps >= max_steps {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut rng::stream_for(config.seed, &[rng::tag("transfer"), epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if steps >= max_steps {
                break;
            }
            let images: Vec<&Array2<f64>> = chunk.iter().map(|&i| &pooled[i].image).collect();
            let masks: Vec<&Array2<u8>> = chunk.iter().map(|&i| &pooled[i].mask).collect();
            let (loss, grad, fwd) = bce_loss_and_grad(net, &params, &images, &masks, &config.loss_options)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence(format!("non-finite transfer loss at step {steps}")));
            }
            opt.step(&mut params, &grad)?;
            net.update_running_stats(&mut params, &fwd, BN_MOMENTUM);
            total += loss;
            batches += 1;
            steps += 1;
        }
        if batches > 0 {
            epoch_losses.push(total / batches as f64);
        }
    }
    Ok(TransferOutcome { params, epoch_losses, steps })
}

/// Builds the network for `spec` from `config.seed` and trains the transfer
/// baseline on `sources`.
pub fn transfer_train(
    sources: &[DomainDataset],
    spec: &NetworkSpec,
    config: &TransferConfig,
) -> Result<(SegmentationNetwork, TransferOutcome)> {
    let (net, init) = build_network(spec, rng::derive(config.seed, &[rng::tag("init")]))?;
    let out = transfer_train_network(&net, init, sources, config)?;
    Ok((net, out))
}

/// Foreground IoU of `prediction > threshold` against `mask`; 1.0 when both
/// are empty.
pub fn iou(prediction: &Array2<f64>, mask: &Array2<u8>, threshold: f64) -> Result<f64> {
    if prediction.dim() != mask.dim() {
        return Err(Error::arg(format!("prediction {:?} and mask {:?} differ in shape", prediction.dim(), mask.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &m) in prediction.iter().zip(mask) {
        let (p, m) = (p > threshold, m != 0);
        inter += (p && m) as usize;
        union += (p || m) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-image IoU over `test_set`, predicted in evaluation mode at
/// native resolution.
pub fn evaluate(
    net: &SegmentationNetwork,
    theta: &ParameterVector,
    test_set: &[&Sample],
    threshold: f64,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty test set"));
    }
    let scores = par::try_map_range(test_set.len(), |i| {
        let s = test_set[i];
        let pred = net.forward(theta, &s.image, Mode::Eval)?;
        iou(&pred.0, &s.mask, threshold)
    })?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    ML_BCE,
    ML_BCE_ER,
    ML_BCE_D,
    ML_FULL,
    TRANSFER,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::ML_BCE, Method::ML_BCE_ER, Method::ML_BCE_D, Method::ML_FULL, Method::TRANSFER];

    /// Loss weights used during meta-training; `None` for the transfer baseline.
    pub fn loss_weights(self) -> Option<LossWeights> {
        match self {
            Method::ML_BCE => Some(LossWeights::BCE_ONLY),
            Method::ML_BCE_ER => Some(LossWeights::BCE_ER),
            Method::ML_BCE_D => Some(LossWeights::BCE_D),
            Method::ML_FULL => Some(LossWeights::FULL),
            Method::TRANSFER => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ML_BCE => "ML_BCE",
            Method::ML_BCE_ER => "ML_BCE_ER",
            Method::ML_BCE_D => "ML_BCE_D",
            Method::ML_FULL => "ML_FULL",
            Method::TRANSFER => "TRANSFER",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub target_domain_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub repeat_ious: Vec<f64>,
    pub mean_iou: f64,
    /// Population standard deviation of `repeat_ious`.
    pub std_iou: f64,
}

impl ExperimentResult {
    pub fn from_ious(method: Method, target_domain_id: impl Into<String>, k: usize, repeat_ious: Vec<f64>) -> Self {
        let (mean_iou, std_iou) = mean_std(&repeat_ious);
        Self { method, target_domain_id: target_domain_id.into(), k, repeat_ious, mean_iou, std_iou }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything the leave-one-dataset-out protocol needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub k_grid: Vec<usize>,
    pub repeats: usize,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    /// Transfer settings; `None` matches the meta-training step budget.
    pub transfer: Option<TransferConfig>,
    /// Cropping applied to source domains before training.
    pub crop: CropSpec,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 3, 5, 7, 10],
            repeats: 10,
            meta: MetaConfig::default(),
            finetune: FinetuneConfig::default(),
            transfer: None,
            crop: CropSpec::default(),
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::Config("K grid must be non-empty and positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.finetune.validate()
    }

    pub fn init_seed(&self, target: &str) -> u64 {
        rng::derive(self.seed, &[rng::tag("init"), rng::tag(target)])
    }

    pub fn training_seed(&self, target: &str) -> u64 {
        rng::derive(self.seed, &[rng::tag("train"), rng::tag(target)])
    }

    pub fn shot_seed(&self, target: &str, k: usize) -> u64 {
        rng::derive(self.seed, &[rng::tag("shots"), rng::tag(target), k as u64])
    }
}

/// How a target's initialization is trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trainer {
    Meta(LossWeights),
    Transfer,
}

impl Method {
    pub fn trainer(self) -> Trainer {
        self.loss_weights().map_or(Trainer::Transfer, Trainer::Meta)
    }
}

/// Trains the initialization used for `target_id` on the (uncropped)
/// `sources`. The network initialization and training seed depend only on
/// the target, so every trainer starts from the same weights.
pub fn train_for_target(
    sources: &[DomainDataset],
    target_id: &str,
    trainer: Trainer,
    spec: &NetworkSpec,
    config: &ProtocolConfig,
) -> Result<(SegmentationNetwork, ParameterVector)> {
    let (net, init) = build_network(spec, config.init_seed(target_id))?;
    let sources = sources.iter().map(|d| crop_training_set(d, &config.crop)).collect::<Result<Vec<_>>>()?;
    let seed = config.training_seed(target_id);
    let params = match trainer {
        Trainer::Meta(loss_weights) => {
            let meta = MetaConfig { seed, loss_weights, ..config.meta.clone() };
            meta_train_network(&net, init, &sources, &meta)?.params
        }
        Trainer::Transfer => {
            let transfer = match config.transfer {
                Some(t) => TransferConfig { seed, ..t },
                None => TransferConfig::matching_budget(&MetaConfig { seed, ..config.meta.clone() }, sources.len()),
            };
            transfer_train_network(&net, init, &sources, &transfer)?.params
        }
    };
    Ok((net, params))
}

/// Fine-tunes from the same `theta` on each of the `repeats` shot selections
/// of `target` and scores the complement.
pub fn evaluate_cell(
    net: &SegmentationNetwork,
    theta: &ParameterVector,
    target: &DomainDataset,
    method: Method,
    k: usize,
    config: &ProtocolConfig,
) -> Result<(ExperimentResult, Vec<ShotSelection>)> {
    let selections = select_shots(target, k, config.repeats, config.shot_seed(&target.domain_id, k))?;
    let ious = par::try_map_range(selections.len(), |r| {
        evaluate_selection(net, theta, target, &selections[r], &config.finetune)
    })?;
    Ok((ExperimentResult::from_ious(method, target.domain_id.clone(), k, ious), selections))
}

/// Fine-tunes on one selection's shots and returns the mean IoU on its test ids.
pub fn evaluate_selection(
    net: &SegmentationNetwork,
    theta: &ParameterVector,
    target: &DomainDataset,
    selection: &ShotSelection,
    finetune: &FinetuneConfig,
) -> Result<f64> {
    let shots = target.by_ids(&selection.shot_ids)?;
    let tuned = fine_tune(net, theta, &shots, finetune)?;
    let test = target.by_ids(&selection.test_ids)?;
    evaluate(net, &tuned.params, &test, finetune.binarize_threshold)
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub results: Vec<ExperimentResult>,
    pub selections: Vec<ShotSelection>,
}

/// Leave-one-dataset-out: every dataset in turn is the target, the others
/// train `method`, and every K of the grid is fine-tuned and scored over
/// `repeats` shot selections.
pub fn leave_one_out(
    datasets: &[DomainDataset],
    method: Method,
    spec: &NetworkSpec,
    config: &ProtocolConfig,
) -> Result<ProtocolOutput> {
    check_protocol_data(datasets, config)?;
    let mut out = ProtocolOutput { results: Vec::new(), selections: Vec::new() };
    for target in 0..datasets.len() {
        let sources: Vec<DomainDataset> =
            datasets.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, d)| d.clone()).collect();
        let (net, theta) = train_for_target(&sources, &datasets[target].domain_id, method.trainer(), spec, config)?;
        for &k in &config.k_grid {
            let (result, selections) = evaluate_cell(&net, &theta, &datasets[target], method, k, config)?;
            out.results.push(result);
            out.selections.extend(selections);
        }
    }
    Ok(out)
}

/// Checks the dataset count and that every dataset leaves a test sample at
/// the largest K.
pub fn check_protocol_data(datasets: &[DomainDataset], config: &ProtocolConfig) -> Result<()> {
    config.validate()?;
    if datasets.len() < 2 {
        return Err(Error::Config(format!("leave-one-out needs at least two datasets, got {}", datasets.len())));
    }
    let k_max = config.k_grid.iter().copied().max().unwrap_or(0);
    if let Some(d) = datasets.iter().find(|d| d.len() < k_max + 1) {
        return Err(Error::Config(format!(
            "dataset {} has {} samples; K = {k_max} needs at least {}",
            d.domain_id,
            d.len(),
            k_max + 1
        )));
    }
    Ok(())
}
