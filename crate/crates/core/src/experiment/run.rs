use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::{cmd_report, write_summary, SummaryRow};
use super::{target_plan, write_json, RunConfig};
use crate::adapt::{
    evaluate_cell, evaluate_selection, train_for_target, ExperimentResult, Method, ProtocolConfig, Trainer,
};
use crate::data::{select_shots, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{load_checkpoint, save_checkpoint, NetworkSpec, ParameterVector, SegmentationNetwork};
use crate::par;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the ledger and checkpoints in the output directory.
    pub resume: bool,
    /// Stop after computing this many new (method, target, K) cells.
    pub max_new_cells: Option<usize>,
}

/// One fine-tune-and-evaluate repeat, as recorded in `ledger.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub method: Method,
    pub target_domain_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub repeat_index: usize,
    pub iou: f64,
    pub shot_ids: Vec<String>,
}

type CellKey = (Method, String, usize);

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub results: Vec<ExperimentResult>,
    /// False when the run stopped early because of `max_new_cells`.
    pub complete: bool,
}

const RESULTS: &str = "results.jsonl";
const LEDGER: &str = "ledger.jsonl";
const SUMMARY: &str = "summary.csv";
const CONFIG: &str = "config.json";

fn prepare_output(config: &RunConfig, resume: bool) -> Result<()> {
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG);
    if resume && cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let stored: serde_json::Value = serde_json::from_str(&text)?;
        if stored != serde_json::to_value(config)? {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration; rerun without --resume",
                out.display()
            )));
        }
        return Ok(());
    }
    for name in [RESULTS, LEDGER, SUMMARY] {
        let p = out.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for dir in [out.join("plots"), config.ckpt_dir()] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    write_json(&cfg_path, config)
}

fn read_ledger(path: &Path) -> Result<BTreeMap<(CellKey, usize), LedgerEntry>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted write is recomputed.
        let Ok(entry) = serde_json::from_str::<LedgerEntry>(&line) else { continue };
        let key = ((entry.method, entry.target_domain_id.clone(), entry.k), entry.repeat_index);
        out.insert(key, entry);
    }
    Ok(out)
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_targets(datasets: &[DomainDataset], plan: &[(usize, Vec<usize>)], k_grid: &[usize]) -> Result<()> {
    let k_max = k_grid.iter().copied().max().unwrap_or(0);
    for (t, sources) in plan {
        let d = &datasets[*t];
        if d.len() < k_max + 1 {
            return Err(Error::Config(format!(
                "target {} has {} samples; K = {k_max} needs at least {}",
                d.domain_id,
                d.len(),
                k_max + 1
            )));
        }
        if sources.is_empty() {
            return Err(Error::Config(format!("target {} has no source domains", d.domain_id)));
        }
    }
    Ok(())
}

fn trained_init(
    config: &RunConfig,
    datasets: &[DomainDataset],
    target: usize,
    sources: &[usize],
    method: Method,
    resume: bool,
) -> Result<(SegmentationNetwork, ParameterVector)> {
    let spec = config.network_spec();
    let target_id = &datasets[target].domain_id;
    let path = config.ckpt_dir().join(format!("{method}_{target_id}.ckpt"));
    if resume && path.exists() {
        let (net, params) = load_checkpoint(&path)?;
        if *net.spec() == spec {
            return Ok((net, params));
        }
    }
    let srcs: Vec<DomainDataset> = sources.iter().map(|&i| datasets[i].clone()).collect();
    let (net, params) = train_for_target(&srcs, target_id, method.trainer(), &spec, &config.protocol())?;
    save_checkpoint(&path, &spec, &params)?;
    Ok((net, params))
}

/// Runs every (method, target, K) cell of the configured grid, appending
/// each repeat to the ledger as it completes, then writes `results.jsonl`,
/// `summary.csv` and the charts.
pub fn cmd_run_protocol(config: &RunConfig, options: RunOptions) -> Result<ProtocolRun> {
    if config.methods.is_empty() {
        return Err(Error::arg("the method list is empty"));
    }
    config.validate()?;
    prepare_output(config, options.resume)?;
    let datasets = config.load_domains()?;
    let plan = target_plan(&datasets);
    check_targets(&datasets, &plan, &config.k_grid)?;
    let protocol = config.protocol();
    let ledger_path = config.output_dir.join(LEDGER);
    let mut ledger = read_ledger(&ledger_path)?;
    let mut budget = options.max_new_cells.unwrap_or(usize::MAX);
    let mut complete = true;

    'outer: for &method in &config.methods {
        for (t, sources) in &plan {
            let target = &datasets[*t];
            let pending: Vec<usize> = config
                .k_grid
                .iter()
                .copied()
                .filter(|&k| {
                    (0..config.repeats).any(|r| !ledger.contains_key(&((method, target.domain_id.clone(), k), r)))
                })
                .collect();
            if pending.is_empty() {
                continue;
            }
            if budget == 0 {
                complete = false;
                break 'outer;
            }
            let (net, theta) = trained_init(config, &datasets, *t, sources, method, options.resume)?;
            for k in pending {
                if budget == 0 {
                    complete = false;
                    break 'outer;
                }
                let key: CellKey = (method, target.domain_id.clone(), k);
                let selections = select_shots(target, k, config.repeats, protocol.shot_seed(&target.domain_id, k))?;
                for s in &selections {
                    if let Some(done) = ledger.get(&(key.clone(), s.repeat_index)) {
                        if done.shot_ids != s.shot_ids {
                            return Err(Error::Config(format!(
                                "ledger entry for {method}/{}/K={k}/repeat {} disagrees with the configured seed",
                                target.domain_id, s.repeat_index
                            )));
                        }
                    }
                }
                let missing: Vec<_> =
                    selections.iter().filter(|s| !ledger.contains_key(&(key.clone(), s.repeat_index))).collect();
                let ious = par::try_map_range(missing.len(), |i| {
                    evaluate_selection(&net, &theta, target, missing[i], &protocol.finetune)
                })?;
                let entries: Vec<LedgerEntry> = missing
                    .iter()
                    .zip(ious)
                    .map(|(s, iou)| LedgerEntry {
                        method,
                        target_domain_id: target.domain_id.clone(),
                        k,
                        repeat_index: s.repeat_index,
                        iou,
                        shot_ids: s.shot_ids.clone(),
                    })
                    .collect();
                append_lines(&ledger_path, &entries)?;
                for e in entries {
                    ledger.insert((key.clone(), e.repeat_index), e);
                }
                budget -= 1;
            }
        }
    }

    let mut results = Vec::new();
    for &method in &config.methods {
        for (t, _) in &plan {
            let target_id = &datasets[*t].domain_id;
            for &k in &config.k_grid {
                let ious: Option<Vec<f64>> = (0..config.repeats)
                    .map(|r| ledger.get(&((method, target_id.clone(), k), r)).map(|e| e.iou))
                    .collect();
                if let Some(ious) = ious {
                    results.push(ExperimentResult::from_ious(method, target_id.clone(), k, ious));
                }
            }
        }
    }
    write_lines(&config.output_dir.join(RESULTS), &results)?;
    let rows: Vec<SummaryRow> = results.iter().map(SummaryRow::from).collect();
    write_summary(&config.output_dir.join(SUMMARY), &rows)?;
    if complete {
        cmd_report(&config.output_dir)?;
    }
    Ok(ProtocolRun { results, complete })
}

/// One (α, β) point of the grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mean_iou: f64,
}

/// Orders grid points by descending mean IoU, breaking ties by smaller α,
/// then smaller β, and assigns ranks from 1.
pub fn rank_grid(points: &[(f64, f64, f64)]) -> Vec<GridRow> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.total_cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, (alpha, beta, mean_iou))| GridRow { rank: i + 1, alpha, beta, mean_iou })
        .collect()
}

/// The best grid point under the ranking of [`rank_grid`].
pub fn select_best(points: &[(f64, f64, f64)]) -> Option<GridRow> {
    rank_grid(points).into_iter().next()
}

fn grid_protocol(config: &RunConfig) -> ProtocolConfig {
    let g = &config.grid_search;
    let mut p = config.protocol();
    if let Some(n) = g.outer_iterations {
        p.meta.outer_iterations = n;
    }
    if let Some(r) = g.repeats {
        p.repeats = r;
    }
    if let Some(k) = &g.k_grid {
        p.k_grid = k.clone();
    }
    p
}

/// Meta-trains with every (α, β) of the grid at the reduced budget and
/// writes the ranked table to `grid_search.csv`.
pub fn cmd_grid_search(config: &RunConfig) -> Result<Vec<GridRow>> {
    config.validate()?;
    let g = &config.grid_search;
    if g.alpha_grid.is_empty() || g.beta_grid.is_empty() {
        return Err(Error::arg("alpha and beta grids must be non-empty"));
    }
    let protocol = grid_protocol(config);
    protocol.validate()?;
    let datasets = config.load_domains()?;
    let plan = target_plan(&datasets);
    check_targets(&datasets, &plan, &protocol.k_grid)?;
    let spec: NetworkSpec = config.network_spec();
    let mut points = Vec::new();
    for &alpha in &g.alpha_grid {
        for &beta in &g.beta_grid {
            let weights = LossWeights { alpha, beta };
            weights.validate()?;
            let mut cell_means = Vec::new();
            for (t, sources) in &plan {
                let srcs: Vec<DomainDataset> = sources.iter().map(|&i| datasets[i].clone()).collect();
                let target = &datasets[*t];
                let (net, theta) =
                    train_for_target(&srcs, &target.domain_id, Trainer::Meta(weights), &spec, &protocol)?;
                for &k in &protocol.k_grid {
                    let (r, _) = evaluate_cell(&net, &theta, target, Method::ML_FULL, k, &protocol)?;
                    cell_means.push(r.mean_iou);
                }
            }
            points.push((alpha, beta, cell_means.iter().sum::<f64>() / cell_means.len() as f64));
        }
    }
    let rows = rank_grid(&points);
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let path = config.output_dir.join("grid_search.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_smaller_alpha_then_beta() {
        let best = select_best(&[(0.1, 0.0, 0.5), (0.01, 0.1, 0.5), (0.01, 0.01, 0.5), (0.0, 0.0, 0.4)]).unwrap();
        assert_eq!((best.alpha, best.beta), (0.01, 0.01));
        let ranked = rank_grid(&[(0.0, 0.0, 0.4), (0.1, 0.1, 0.6)]);
        assert_eq!(ranked[0].rank, 1);
        assert_eq!(ranked[0].alpha, 0.1);
        assert!(select_best(&[]).is_none());
    }
}
