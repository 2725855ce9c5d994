use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_bifurcation, gen_petal, load_csv, BifurcationSpec, PetalSpec, SnapshotDataset};
use crate::evaluation::MetricConfig;
use crate::gae::GaeConfig;
use crate::training::MioflowConfig;

/// Where a command gets its snapshots from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv(PathBuf),
    Petal(PetalSpec),
    Bifurcation(BifurcationSpec),
}

impl DataSource {
    pub fn load(&self) -> anyhow::Result<SnapshotDataset> {
        Ok(match self {
            DataSource::Csv(p) => load_csv(p).with_context(|| format!("reading {}", p.display()))?,
            DataSource::Petal(s) => gen_petal(s)?,
            DataSource::Bifurcation(s) => gen_bifurcation(s)?,
        })
    }
}

/// Complete configuration of a run. Every key is optional; command-line
/// flags override whatever the file sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub gae: GaeConfig,
    pub mioflow: MioflowConfig,
    pub metrics: MetricConfig,
    pub output: Option<PathBuf>,
    pub held_time: Option<u32>,
    /// Overrides `mioflow.seed` and seeds every other random draw.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.mioflow.seed)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.gae.validate().context("gae")?;
        self.mioflow.validate().context("mioflow")?;
        if self.metrics.mmd_scales.is_empty() || self.metrics.mmd_scales.iter().any(|s| !(*s > 0.0)) {
            anyhow::bail!("metrics: mmd_scales must be non-empty and positive");
        }
        Ok(())
    }
}
