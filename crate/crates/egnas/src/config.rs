//! Run configuration: one JSON file drives data generation, search and
//! retraining. Unknown keys are rejected; paths are validated by each
//! command before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, TaskSpec};
use crate::search::SearchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Sbm {
        num_train: usize,
        num_val: usize,
        num_test: usize,
        nodes_per_community: usize,
        num_communities: usize,
        p_intra: f64,
        p_inter: f64,
        feature_noise: f64,
    },
    Tsp {
        num_train: usize,
        num_val: usize,
        num_test: usize,
        num_cities: usize,
        knn_k: usize,
    },
    Graphreg {
        num_train: usize,
        num_val: usize,
        num_test: usize,
        min_nodes: usize,
        max_nodes: usize,
        edge_prob: f64,
    },
}

impl GeneratorConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            GeneratorConfig::Sbm { .. } => "sbm",
            GeneratorConfig::Tsp { .. } => "tsp",
            GeneratorConfig::Graphreg { .. } => "graphreg",
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        match *self {
            GeneratorConfig::Sbm { num_train, num_val, num_test, .. }
            | GeneratorConfig::Tsp { num_train, num_val, num_test, .. }
            | GeneratorConfig::Graphreg { num_train, num_val, num_test, .. } => {
                (num_train, num_val, num_test)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.network.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// The data paths, which must all exist on disk.
    pub fn data_checked(&self) -> Result<&DataPaths> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::config("config has no \"data\" section"))?;
        for (name, p) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            if !p.is_file() {
                return Err(Error::config(format!(
                    "{name} dataset {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(data)
    }
}
