//! Episodic meta-training: every episode adapts a copy of the meta-parameters
//! to one K-shot task per source domain, using the composite objective on a
//! labeled task `m`, an unlabeled entropy task `n ≠ m` and a distillation task
//! `p ≠ m`, then moves the meta-parameters toward the adapted copies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_task, DomainDataset, TaskBatch};
use crate::error::{Error, Result};
use crate::losses::{composite_loss_and_grad, LossBreakdown, LossOptions, LossWeights};
use crate::models::{
    build_network, NetworkSpec, ParamEntry, ParamKind, ParameterVector, Phase, SegmentationNetwork, BN_MOMENTUM,
};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub outer_iterations: usize,
    /// Optimizer steps producing each task's adapted parameters.
    pub inner_steps: usize,
    /// Shots per task.
    pub k: usize,
    /// Meta step size.
    pub epsilon: f64,
    pub inner_optimizer: OptimizerKind,
    pub inner_lr: f64,
    pub inner_weight_decay: f64,
    pub loss_weights: LossWeights,
    pub loss_options: LossOptions,
    /// Reset running batch-norm statistics at the start of every task
    /// instead of carrying them across tasks and episodes.
    pub reset_running_stats_per_task: bool,
    pub early_stop: Option<EarlyStopConfig>,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 1000,
            inner_steps: 5,
            k: 5,
            epsilon: 1.0,
            inner_optimizer: OptimizerKind::Adam,
            inner_lr: 0.001,
            inner_weight_decay: 0.0005,
            loss_weights: LossWeights::FULL,
            loss_options: LossOptions::default(),
            reset_running_stats_per_task: false,
            early_stop: None,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        self.loss_weights.validate()?;
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { kind: self.inner_optimizer, ..OptimizerConfig::adam(self.inner_lr, self.inner_weight_decay) }
    }
}

/// Stops meta-training when the mean IoU on a held-out split of the
/// sources stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Fraction of each source held out (at least one sample).
    pub holdout_fraction: f64,
    /// Episodes between holdout evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

/// Indices of the three tasks used for one source task `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTriple {
    pub m: usize,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub iteration: usize,
    /// Composite loss of each source task at the start of its adaptation.
    #[serde(rename = "losses")]
    pub task_losses: Vec<LossBreakdown>,
    /// `‖θ_new − θ_old‖₂`.
    pub meta_update_norm: f64,
}

/// Draws `n` and `p` uniformly and independently from the sources other
/// than `m`; `n == p` is allowed.
pub fn sample_task_triple<R: Rng + ?Sized>(num_sources: usize, m: usize, stream: &mut R) -> Result<TaskTriple> {
    if num_sources < 2 {
        return Err(Error::Config(format!("meta-training needs at least two sources, got {num_sources}")));
    }
    if m >= num_sources {
        return Err(Error::arg(format!("task index {m} out of range")));
    }
    let mut other = || {
        let r = stream.random_range(0..num_sources - 1);
        if r >= m {
            r + 1
        } else {
            r
        }
    };
    let n = other();
    let p = other();
    Ok(TaskTriple { m, n, p })
}

/// Something that can be meta-trained: evaluates the composite objective
/// and its gradient and declares which parameters may learn.
pub trait MetaLearner: Sync {
    /// Loss and gradient at `params`. Implementations may update
    /// non-trainable state held in `params` (running statistics).
    fn task_loss_and_grad(
        &self,
        params: &mut ParameterVector,
        batch_m: &TaskBatch<'_>,
        batch_n: &TaskBatch<'_>,
        batch_p: &TaskBatch<'_>,
        weights: LossWeights,
        options: &LossOptions,
    ) -> Result<(LossBreakdown, ParameterVector)>;

    fn is_trainable(&self, entry: &ParamEntry, phase: Phase) -> bool;
}

impl MetaLearner for SegmentationNetwork {
    fn task_loss_and_grad(
        &self,
        params: &mut ParameterVector,
        batch_m: &TaskBatch<'_>,
        batch_n: &TaskBatch<'_>,
        batch_p: &TaskBatch<'_>,
        weights: LossWeights,
        options: &LossOptions,
    ) -> Result<(LossBreakdown, ParameterVector)> {
        let eval = composite_loss_and_grad(self, params, batch_m, batch_n, batch_p, weights, options)?;
        self.update_running_stats(params, &eval.forward_m, BN_MOMENTUM);
        Ok((eval.breakdown, eval.gradient))
    }

    fn is_trainable(&self, entry: &ParamEntry, phase: Phase) -> bool {
        self.spec().bn_policy.is_trainable(entry.kind, phase)
    }
}

/// Adapts a copy of `theta` to one task triple. Returns the adapted
/// parameters and the loss observed before each step. `theta` is untouched.
pub fn inner_adapt<L: MetaLearner + ?Sized>(
    learner: &L,
    theta: &ParameterVector,
    batches: (&TaskBatch<'_>, &TaskBatch<'_>, &TaskBatch<'_>),
    config: &MetaConfig,
) -> Result<(ParameterVector, Vec<LossBreakdown>)> {
    let (bm, bn, bp) = batches;
    let mut params = theta.clone();
    if config.reset_running_stats_per_task {
        reset_running_stats(&mut params);
    }
    let mut opt = Optimizer::new(config.optimizer(), &params, |e| learner.is_trainable(e, Phase::MetaTrain));
    let mut losses = Vec::with_capacity(config.inner_steps);
    for step in 0..config.inner_steps {
        let (loss, grad) =
            learner.task_loss_and_grad(&mut params, bm, bn, bp, config.loss_weights, &config.loss_options)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at inner step {step} on task {}: {loss:?}",
                bm.domain_id
            )));
        }
        losses.push(loss);
        opt.step(&mut params, &grad)?;
    }
    Ok((params, losses))
}

fn reset_running_stats(params: &mut ParameterVector) {
    let entries: Vec<(usize, ParamKind)> = params.entries().iter().enumerate().map(|(i, e)| (i, e.kind)).collect();
    for (i, kind) in entries {
        match kind {
            ParamKind::RunningMean => params.slice_mut(i).fill(0.0),
            ParamKind::RunningVar => params.slice_mut(i).fill(1.0),
            _ => {}
        }
    }
}

/// `θ + ε·(1/|S|)·Σ(θ′_m − θ)`.
///
/// At `ε = 1` the result is the mean of the task parameters, computed
/// directly so that a single task returns its parameters exactly.
pub fn meta_update(theta: &ParameterVector, task_params: &[ParameterVector], epsilon: f64) -> Result<ParameterVector> {
    let Some(first) = task_params.first() else {
        return Err(Error::arg("meta_update needs at least one task"));
    };
    for t in task_params {
        theta.ensure_same_structure(t)?;
    }
    let s = task_params.len() as f64;
    let th = theta.values();
    let values = (0..theta.len())
        .map(|i| {
            if epsilon == 1.0 {
                let anchor = first.values()[i];
                let spread: f64 = task_params.iter().map(|t| t.values()[i] - anchor).sum();
                anchor + spread / s
            } else {
                let diff: f64 = task_params.iter().map(|t| t.values()[i] - th[i]).sum();
                th[i] + epsilon * (diff / s)
            }
        })
        .collect();
    ParameterVector::from_values(theta.layout().clone(), values)
}

/// Decision returned by episode observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutput {
    pub params: ParameterVector,
    pub logs: Vec<EpisodeLog>,
}

/// Runs one episode: adapts to every source task in parallel, then applies
/// the meta-update.
pub fn run_episode<L: MetaLearner + ?Sized>(
    learner: &L,
    theta: &ParameterVector,
    sources: &[DomainDataset],
    config: &MetaConfig,
    iteration: usize,
) -> Result<(ParameterVector, EpisodeLog)> {
    let num = sources.len();
    let adapted = par::try_map_range(num, |m| {
        let mut stream = rng::stream_for(config.seed, &[rng::tag("episode"), iteration as u64, m as u64]);
        let bm = sample_task(&sources[m], config.k, true, &mut stream)?;
        let triple = sample_task_triple(num, m, &mut stream)?;
        let bn = sample_task(&sources[triple.n], config.k, false, &mut stream)?;
        let bp = sample_task(&sources[triple.p], config.k, false, &mut stream)?;
        inner_adapt(learner, theta, (&bm, &bn, &bp), config).map_err(|e| annotate(e, iteration))
    })?;
    let (task_params, losses): (Vec<_>, Vec<_>) = adapted.into_iter().unzip();
    let next = meta_update(theta, &task_params, config.epsilon)?;
    if !next.is_finite() {
        return Err(Error::Divergence(format!("non-finite meta-parameters after episode {iteration}")));
    }
    let norm = next.checked_sub(theta)?.norm();
    let log = EpisodeLog {
        iteration,
        task_losses: losses.into_iter().map(|l: Vec<LossBreakdown>| l[0]).collect(),
        meta_update_norm: norm,
    };
    Ok((next, log))
}

fn annotate(e: Error, iteration: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("episode {iteration}: {msg}")),
        other => other,
    }
}

/// Meta-trains from `init`, calling `observer` after every episode.
pub fn meta_train_from<L, F>(
    learner: &L,
    init: ParameterVector,
    sources: &[DomainDataset],
    config: &MetaConfig,
    observer: F,
) -> Result<MetaTrainOutput>
where
    L: MetaLearner + ?Sized,
    F: FnMut(&EpisodeLog, &ParameterVector) -> Result<Control>,
{
    meta_train_resume(learner, init, sources, config, 0, observer)
}

/// Continues meta-training from the parameters reached after
/// `start_iteration` episodes. Episode sampling depends only on the seed and
/// the iteration index, so an interrupted run resumed here ends where an
/// uninterrupted one would.
pub fn meta_train_resume<L, F>(
    learner: &L,
    init: ParameterVector,
    sources: &[DomainDataset],
    config: &MetaConfig,
    start_iteration: usize,
    mut observer: F,
) -> Result<MetaTrainOutput>
where
    L: MetaLearner + ?Sized,
    F: FnMut(&EpisodeLog, &ParameterVector) -> Result<Control>,
{
    config.validate()?;
    if sources.len() < 2 {
        return Err(Error::Config(format!("meta-training needs at least two sources, got {}", sources.len())));
    }
    if let Some(small) = sources.iter().find(|s| s.len() < config.k) {
        return Err(Error::Config(format!(
            "source {} has {} samples, fewer than K = {}",
            small.domain_id,
            small.len(),
            config.k
        )));
    }
    let mut theta = init;
    let mut logs = Vec::new();
    for iteration in start_iteration..config.outer_iterations {
        let (next, log) = run_episode(learner, &theta, sources, config, iteration)?;
        theta = next;
        let control = observer(&log, &theta)?;
        logs.push(log);
        if control == Control::Stop {
            break;
        }
    }
    Ok(MetaTrainOutput { params: theta, logs })
}

/// Builds the network for `spec` (initialized from `config.seed`) and
/// meta-trains it on `sources`. Honors `config.early_stop`.
pub fn meta_train(
    sources: &[DomainDataset],
    spec: &NetworkSpec,
    config: &MetaConfig,
) -> Result<(SegmentationNetwork, MetaTrainOutput)> {
    let (net, init) = build_network(spec, rng::derive(config.seed, &[rng::tag("init")]))?;
    let out = meta_train_network(&net, init, sources, config)?;
    Ok((net, out))
}

/// Meta-trains an existing network from `init`. Honors `config.early_stop`.
pub fn meta_train_network(
    net: &SegmentationNetwork,
    init: ParameterVector,
    sources: &[DomainDataset],
    config: &MetaConfig,
) -> Result<MetaTrainOutput> {
    match config.early_stop {
        None => meta_train_from(net, init, sources, config, |_, _| Ok(Control::Continue)),
        Some(es) => meta_train_early_stopping(net, init, sources, config, es),
    }
}

fn meta_train_early_stopping(
    net: &SegmentationNetwork,
    init: ParameterVector,
    sources: &[DomainDataset],
    config: &MetaConfig,
    es: EarlyStopConfig,
) -> Result<MetaTrainOutput> {
    if !(es.holdout_fraction > 0.0 && es.holdout_fraction < 1.0) || es.eval_every == 0 {
        return Err(Error::Config("early stopping needs 0 < holdout_fraction < 1 and eval_every ≥ 1".into()));
    }
    let mut train = Vec::with_capacity(sources.len());
    let mut holdout = Vec::new();
    for s in sources {
        let n_hold = ((s.len() as f64 * es.holdout_fraction).round() as usize).clamp(1, s.len() - 1);
        let mut d = s.clone();
        let held = d.samples.split_off(s.len() - n_hold);
        holdout.extend(held);
        train.push(d);
    }
    let holdout_refs: Vec<_> = holdout.iter().collect();
    let mut best: Option<(f64, ParameterVector)> = None;
    let mut since_best = 0;
    let out = meta_train_from(net, init, &train, config, |log, theta| {
        if (log.iteration + 1) % es.eval_every != 0 {
            return Ok(Control::Continue);
        }
        let score = crate::adapt::evaluate(net, theta, &holdout_refs, 0.5)?;
        match &best {
            Some((b, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, theta.clone()));
                since_best = 0;
            }
        }
        Ok(if since_best >= es.patience { Control::Stop } else { Control::Continue })
    })?;
    Ok(match best {
        Some((_, params)) => MetaTrainOutput { params, logs: out.logs },
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LayoutBuilder;

    fn scalar(v: f64) -> ParameterVector {
        let mut b = LayoutBuilder::default();
        b.push("x", ParamKind::Weight, vec![1]);
        ParameterVector::from_values(b.finish(), vec![v]).unwrap()
    }

    #[test]
    fn meta_update_identities() {
        let theta = scalar(0.1);
        let t1 = scalar(0.3);
        assert!(meta_update(&theta, std::slice::from_ref(&t1), 1.0).unwrap().bit_eq(&t1));
        assert_eq!(meta_update(&theta, std::slice::from_ref(&t1), 0.0).unwrap(), theta);
        for eps in [0.1, 0.37, 1.0] {
            let same = vec![theta.clone(); 3];
            assert!(meta_update(&theta, &same, eps).unwrap().bit_eq(&theta));
        }
        let zero = scalar(0.0);
        let r = meta_update(&zero, &[scalar(2.0), scalar(4.0)], 0.5).unwrap();
        assert_eq!(r.values(), &[1.5]);
        assert!(meta_update(&zero, &[], 0.5).is_err());
    }

    #[test]
    fn triple_sampling() {
        let mut s = rng::stream(3);
        assert_eq!(sample_task_triple(2, 0, &mut s).unwrap(), TaskTriple { m: 0, n: 1, p: 1 });
        assert!(matches!(sample_task_triple(1, 0, &mut s), Err(Error::Config(_))));
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let t = sample_task_triple(5, 2, &mut s).unwrap();
            assert_ne!(t.n, 2);
            assert_ne!(t.p, 2);
            counts[t.n] += 1;
        }
        assert_eq!(counts[2], 0);
        for c in [counts[0], counts[1], counts[3], counts[4]] {
            assert!((c as f64 - 2500.0).abs() / 2500.0 < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MetaConfig::default();
        c.validate().unwrap();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        c.epsilon = 1.0;
        c.inner_steps = 0;
        assert!(c.validate().is_err());
    }
}
