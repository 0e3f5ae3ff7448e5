//! Experiment plumbing behind the `cellseg` command-line tool: run
//! configuration, data preparation, the protocol runner with its resume
//! ledger, grid search and reporting.

mod commands;
mod font;
mod report;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{FinetuneConfig, Method, ProtocolConfig, TransferConfig};
use crate::data::{
    generate_synthetic_domain, load_domain, standard_suite, CropSpec, DatasetManifest, DomainDataset, Role,
    SyntheticDomainSpec,
};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::models::{Architecture, NetworkSpec};

pub use commands::{
    cmd_evaluate, cmd_fine_tune, cmd_meta_train, cmd_prepare_data, cmd_synth_gen, cmd_transfer_train,
    CropStoreManifest, EvaluateArgs, FineTuneArgs, StoreEntry,
};
pub use report::{cmd_report, read_summary, render_chart, write_summary, ChartSeries, SummaryRow};
pub use run::{
    cmd_grid_search, cmd_run_protocol, rank_grid, select_best, GridRow, LedgerEntry, ProtocolRun, RunOptions,
};

/// One domain referenced by a run: either a directory with a
/// `manifest.json` under `data_root`, or an in-memory synthetic spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRef {
    pub domain_id: String,
    #[serde(default)]
    pub role: Role,
    /// Directory relative to `data_root`; defaults to `domain_id`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticDomainSpec>,
}

/// Shorthand for the built-in synthetic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRef {
    pub image_size: usize,
    pub sample_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Subset of suite domain ids to use, in order; all when absent.
    #[serde(default)]
    pub domains: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchConfig {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Reduced budget per grid point; unset fields keep the run's values.
    #[serde(default)]
    pub outer_iterations: Option<usize>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub k_grid: Option<Vec<usize>>,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            alpha_grid: vec![0.0, 0.01, 0.1],
            beta_grid: vec![0.0, 0.01, 0.1],
            outer_iterations: None,
            repeats: None,
            k_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub domains: Vec<DomainRef>,
    pub synthetic_suite: Option<SuiteRef>,
    pub architecture: Architecture,
    pub base_width: usize,
    pub depth: usize,
    pub methods: Vec<Method>,
    pub k_grid: Vec<usize>,
    pub repeats: usize,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    pub transfer: Option<TransferConfig>,
    pub crop: CropSpec,
    pub grid_search: GridSearchConfig,
    /// Episodes between meta-training checkpoints.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            data_root: PathBuf::from("data"),
            domains: Vec::new(),
            synthetic_suite: None,
            architecture: Architecture::Fcrn,
            base_width: 32,
            depth: 3,
            methods: Method::ALL.to_vec(),
            k_grid: p.k_grid,
            repeats: p.repeats,
            meta: p.meta,
            finetune: p.finetune,
            transfer: None,
            crop: p.crop,
            grid_search: GridSearchConfig::default(),
            checkpoint_every: 10,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_refs().is_empty() {
            return Err(Error::Config("no domains configured".into()));
        }
        let mut ids: Vec<_> = self.domain_refs().into_iter().map(|d| d.domain_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate domain ids".into()));
        }
        self.network_spec().validate()?;
        self.protocol().validate()?;
        self.meta.validate()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.architecture, self.base_width, self.depth)
    }

    /// Protocol settings derived from this run.
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            k_grid: self.k_grid.clone(),
            repeats: self.repeats,
            meta: self.meta.clone(),
            finetune: self.finetune,
            transfer: self.transfer,
            crop: self.crop,
            seed: self.seed,
        }
    }

    /// Explicit domains followed by the expanded synthetic suite.
    pub fn domain_refs(&self) -> Vec<DomainRef> {
        let mut out = self.domains.clone();
        if let Some(suite) = &self.synthetic_suite {
            for spec in standard_suite(suite.image_size, suite.sample_count, suite.seed) {
                let wanted = suite.domains.as_ref().is_none_or(|d| d.contains(&spec.domain_id));
                if wanted {
                    out.push(DomainRef {
                        domain_id: spec.domain_id.clone(),
                        role: spec.role,
                        path: None,
                        synthetic: Some(spec),
                    });
                }
            }
        }
        if let Some(order) = self.synthetic_suite.as_ref().and_then(|s| s.domains.as_ref()) {
            out.sort_by_key(|d| order.iter().position(|o| *o == d.domain_id).unwrap_or(usize::MAX));
        }
        out
    }

    pub fn domain_dir(&self, d: &DomainRef) -> PathBuf {
        self.data_root.join(d.path.clone().unwrap_or_else(|| PathBuf::from(&d.domain_id)))
    }

    /// Loads (or generates) every configured domain.
    pub fn load_domains(&self) -> Result<Vec<DomainDataset>> {
        self.domain_refs().iter().map(|d| self.load_domain(d)).collect()
    }

    fn load_domain(&self, d: &DomainRef) -> Result<DomainDataset> {
        let mut ds = match &d.synthetic {
            Some(spec) => {
                generate_synthetic_domain(&SyntheticDomainSpec { domain_id: d.domain_id.clone(), ..spec.clone() })?
            }
            None => {
                let dir = self.domain_dir(d);
                let manifest_path = dir.join("manifest.json");
                if !manifest_path.exists() {
                    return Err(Error::Data(format!("missing {}", manifest_path.display())));
                }
                load_domain(&dir, &DatasetManifest::read(&manifest_path)?)?
            }
        };
        ds.role = d.role;
        Ok(ds)
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.output_dir.join("ckpt")
    }
}

/// `(target index, source indices)` for every evaluation target. Domains
/// with the target role are targets evaluated against every source-role
/// domain; without any, each domain is held out in turn.
pub fn target_plan(datasets: &[DomainDataset]) -> Vec<(usize, Vec<usize>)> {
    let explicit: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].role == Role::Target).collect();
    if explicit.is_empty() {
        (0..datasets.len()).map(|t| (t, (0..datasets.len()).filter(|&i| i != t).collect())).collect()
    } else {
        let sources: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].role == Role::Source).collect();
        explicit.into_iter().map(|t| (t, sources.clone())).collect()
    }
}

/// Source-role domains, or all domains when no target is designated.
pub fn training_sources(datasets: &[DomainDataset]) -> Vec<DomainDataset> {
    let has_target = datasets.iter().any(|d| d.role == Role::Target);
    datasets.iter().filter(|d| !has_target || d.role == Role::Source).cloned().collect()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
