use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{training_sources, write_json, RunConfig};
use crate::adapt::{evaluate, fine_tune, transfer_train_network, TransferConfig};
use crate::data::{
    crop_training_set, generate_synthetic_domain, select_shots, standard_suite, write_domain, CropSpec, DomainDataset,
    Role, Sample, ShotSelection,
};
use crate::error::{Error, Result};
use crate::meta::{meta_train_resume, Control, MetaConfig};
use crate::models::{build_network, load_checkpoint, save_checkpoint, ParameterVector, SegmentationNetwork};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub domain_id: String,
    pub role: Role,
    pub source_images: usize,
    pub crops: usize,
    pub sha256: String,
}

/// `crops/manifest.json`: what the crop store holds and a digest of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropStoreManifest {
    pub crop: CropSpec,
    pub domains: Vec<StoreEntry>,
    pub sha256: String,
}

fn digest_dataset(d: &DomainDataset) -> String {
    let mut h = Sha256::new();
    for s in &d.samples {
        h.update(s.id.as_bytes());
        h.update((s.height() as u64).to_le_bytes());
        h.update((s.width() as u64).to_le_bytes());
        for v in &s.image {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(s.mask.iter().copied().collect::<Vec<u8>>());
    }
    format!("{:x}", h.finalize())
}

/// Crops every training domain to the configured size and writes the crops
/// under `<output>/crops/`. Running it again over an unchanged store leaves
/// the files alone. Returns the manifest and whether anything was written.
pub fn cmd_prepare_data(config: &RunConfig) -> Result<(CropStoreManifest, bool)> {
    config.validate()?;
    let datasets = config.load_domains()?;
    let store = config.output_dir.join("crops");
    let mut entries = Vec::new();
    let mut cropped = Vec::new();
    for d in training_sources(&datasets) {
        let crops = crop_training_set(&d, &config.crop)?;
        entries.push(StoreEntry {
            domain_id: d.domain_id.clone(),
            role: d.role,
            source_images: d.len(),
            crops: crops.len(),
            sha256: digest_dataset(&crops),
        });
        cropped.push(crops);
    }
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&config.crop)?);
    for e in &entries {
        h.update(e.sha256.as_bytes());
    }
    let manifest = CropStoreManifest { crop: config.crop, domains: entries, sha256: format!("{:x}", h.finalize()) };
    let manifest_path = store.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        if serde_json::from_str::<CropStoreManifest>(&text).ok().as_ref() == Some(&manifest) {
            return Ok((manifest, false));
        }
        fs::remove_dir_all(&store).map_err(|e| Error::io(&store, e))?;
    }
    for crops in &cropped {
        write_domain(crops, &store)?;
    }
    write_json(&manifest_path, &manifest)?;
    Ok((manifest, true))
}

/// Writes the configured synthetic domains (the built-in suite when none
/// are configured) under `data_root`, one directory per domain.
pub fn cmd_synth_gen(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut specs: Vec<_> = config
        .domain_refs()
        .into_iter()
        .filter_map(|d| {
            d.synthetic.map(|s| crate::data::SyntheticDomainSpec { domain_id: d.domain_id, role: d.role, ..s })
        })
        .collect();
    if specs.is_empty() {
        specs = standard_suite(64, 30, config.seed);
    }
    specs.iter().map(|s| write_domain(&generate_synthetic_domain(s)?, &config.data_root)).collect()
}

fn cropped_sources(config: &RunConfig) -> Result<Vec<DomainDataset>> {
    let datasets = config.load_domains()?;
    training_sources(&datasets).iter().map(|d| crop_training_set(d, &config.crop)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct MetaState {
    completed_episodes: usize,
}

/// Meta-trains on the training domains. Writes `ckpt/meta.ckpt` every
/// `checkpoint_every` episodes and at the end, and streams episode logs to
/// `meta_log.jsonl`. With `resume`, continues from the last checkpoint.
pub fn cmd_meta_train(config: &RunConfig, resume: bool) -> Result<PathBuf> {
    config.validate()?;
    let sources = cropped_sources(config)?;
    let meta = MetaConfig { seed: config.seed, ..config.meta.clone() };
    let spec = config.network_spec();
    let ckpt_dir = config.ckpt_dir();
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let ckpt = ckpt_dir.join("meta.ckpt");
    let state_path = ckpt_dir.join("meta_state.json");
    let log_path = config.output_dir.join("meta_log.jsonl");

    let (net, init, start) = match resume.then(|| read_state(&state_path)).transpose()?.flatten() {
        Some(state) => {
            let (net, params) = load_checkpoint(&ckpt)?;
            if *net.spec() != spec {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            (net, params, state.completed_episodes)
        }
        None => {
            File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let (net, params) = build_network(&spec, rng::derive(meta.seed, &[rng::tag("init")]))?;
            (net, params, 0)
        }
    };
    let log_file = OpenOptions::new().append(true).create(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let every = config.checkpoint_every.max(1);
    let out = meta_train_resume(&net, init, &sources, &meta, start, |entry, theta| {
        writeln!(log, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(&log_path, e))?;
        let done = entry.iteration + 1;
        if done % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&ckpt, &spec, theta)?;
            write_json(&state_path, &MetaState { completed_episodes: done })?;
        }
        Ok(Control::Continue)
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&ckpt, &spec, &out.params)?;
    write_json(&state_path, &MetaState { completed_episodes: meta.outer_iterations })?;
    Ok(ckpt)
}

fn read_state(path: &Path) -> Result<Option<MetaState>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Trains the pooled transfer baseline and writes `ckpt/transfer.ckpt`.
pub fn cmd_transfer_train(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let sources = cropped_sources(config)?;
    let meta = MetaConfig { seed: config.seed, ..config.meta.clone() };
    let transfer = match config.transfer {
        Some(t) => TransferConfig { seed: config.seed, ..t },
        None => TransferConfig::matching_budget(&meta, sources.len()),
    };
    let spec = config.network_spec();
    let (net, init) = build_network(&spec, rng::derive(config.seed, &[rng::tag("init")]))?;
    let out = transfer_train_network(&net, init, &sources, &transfer)?;
    let path = config.ckpt_dir().join("transfer.ckpt");
    save_checkpoint(&path, &spec, &out.params)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineTuneArgs {
    pub checkpoint: PathBuf,
    pub target: String,
    pub k: usize,
    pub repeat: usize,
}

fn target_domain(config: &RunConfig, id: &str) -> Result<DomainDataset> {
    config
        .load_domains()?
        .into_iter()
        .find(|d| d.domain_id == id)
        .ok_or_else(|| Error::Config(format!("unknown target domain {id:?}")))
}

fn selection(config: &RunConfig, target: &DomainDataset, k: usize, repeat: usize) -> Result<ShotSelection> {
    let seed = config.protocol().shot_seed(&target.domain_id, k);
    Ok(select_shots(target, k, repeat + 1, seed)?.swap_remove(repeat))
}

/// Fine-tunes a checkpoint on one shot selection of the target and writes
/// `ckpt/finetune_<target>_k<K>_r<repeat>.ckpt`.
pub fn cmd_fine_tune(config: &RunConfig, args: &FineTuneArgs) -> Result<(PathBuf, ShotSelection)> {
    config.finetune.validate()?;
    let (net, theta) = load_checkpoint(&args.checkpoint)?;
    let target = target_domain(config, &args.target)?;
    let sel = selection(config, &target, args.k, args.repeat)?;
    let shots = target.by_ids(&sel.shot_ids)?;
    let tuned = fine_tune(&net, &theta, &shots, &config.finetune)?;
    let path = config.ckpt_dir().join(format!("finetune_{}_k{}_r{}.ckpt", args.target, args.k, args.repeat));
    save_checkpoint(&path, net.spec(), &tuned.params)?;
    Ok((path, sel))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub target: String,
    /// Score only the test complement of this shot selection.
    pub selection: Option<(usize, usize)>,
}

/// Mean IoU of a checkpoint on the target (or on a selection's test ids)
/// and the number of images scored.
pub fn cmd_evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(f64, usize)> {
    let (net, theta): (SegmentationNetwork, ParameterVector) = load_checkpoint(&args.checkpoint)?;
    let target = target_domain(config, &args.target)?;
    let test: Vec<&Sample> = match args.selection {
        Some((k, r)) => target.by_ids(&selection(config, &target, k, r)?.test_ids)?,
        None => target.samples.iter().collect(),
    };
    let score = evaluate(&net, &theta, &test, config.finetune.binarize_threshold)?;
    Ok((score, test.len()))
}
